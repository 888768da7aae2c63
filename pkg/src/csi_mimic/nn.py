"""CRNet-style encoder/decoder networks, the binarized-FC student, and UE complexity counting."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigError, Node

LEAKY_SLOPE = 0.3
INPUT_CENTER = 0.5


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv" | "fc"
    in_dim: int  # channels for conv, features for fc
    out_dim: int
    kernel: tuple[int, int] = (1, 1)
    binarized: bool = False
    activation: str = "none"  # "leaky_relu" | "sigmoid" | "none"
    group: str = ""  # residual block / branch tag, informational

    def __post_init__(self):
        if self.kind not in ("conv", "fc"):
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.binarized and self.kind != "fc":
            raise ConfigError(f"layer {self.name}: only fc layers may be binarized")


@dataclass(frozen=True)
class ModelSpec:
    role: str  # "encoder" | "decoder"
    codeword_size: int
    input_dims: tuple[int, int, int] = (2, 32, 32)
    binarized: bool = False
    layers: tuple[LayerSpec, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.role not in ("encoder", "decoder"):
            raise ConfigError(f"role must be encoder or decoder, got {self.role!r}")
        c, h, w = self.input_dims
        total = c * h * w
        if not 0 < self.codeword_size < total:
            raise ConfigError(
                f"codeword_size M={self.codeword_size} is not a compression of {total} reals")
        if self.binarized and self.role != "encoder":
            raise ConfigError("only the encoder fc layer is binarized")
        if not self.layers:
            layers = _encoder_layers(self) if self.role == "encoder" else _decoder_layers(self)
            object.__setattr__(self, "layers", tuple(layers))

    @property
    def eta(self) -> float:
        c, h, w = self.input_dims
        return self.codeword_size / (c * h * w)

    def to_dict(self) -> dict:
        return {"role": self.role, "codeword_size": self.codeword_size,
                "input_dims": list(self.input_dims), "binarized": self.binarized}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(role=d["role"], codeword_size=int(d["codeword_size"]),
                   input_dims=tuple(int(v) for v in d["input_dims"]),
                   binarized=bool(d["binarized"]))


def _encoder_layers(spec: ModelSpec) -> list[LayerSpec]:
    c, h, w = spec.input_dims
    lr = "leaky_relu"
    return [
        LayerSpec("enc_b1_conv3x3", "conv", c, 2, (3, 3), activation=lr, group="branch1"),
        LayerSpec("enc_b1_conv1x9", "conv", 2, 2, (1, 9), activation=lr, group="branch1"),
        LayerSpec("enc_b1_conv9x1", "conv", 2, 2, (9, 1), activation=lr, group="branch1"),
        LayerSpec("enc_b2_conv3x3", "conv", c, 2, (3, 3), activation=lr, group="branch2"),
        LayerSpec("enc_merge_conv1x1", "conv", 4, c, (1, 1), group="merge"),
        LayerSpec("enc_fc", "fc", c * h * w, spec.codeword_size, binarized=spec.binarized),
    ]


def _res_block_layers(tag: str, c: int) -> list[LayerSpec]:
    lr = "leaky_relu"
    return [
        LayerSpec(f"{tag}_b1_conv3x3", "conv", c, 8, (3, 3), activation=lr, group=f"{tag}/branch1"),
        LayerSpec(f"{tag}_b1_conv1x9", "conv", 8, 8, (1, 9), activation=lr, group=f"{tag}/branch1"),
        LayerSpec(f"{tag}_b1_conv9x1", "conv", 8, c, (9, 1), activation=lr, group=f"{tag}/branch1"),
        LayerSpec(f"{tag}_b2_conv1x5", "conv", c, 8, (1, 5), activation=lr, group=f"{tag}/branch2"),
        LayerSpec(f"{tag}_b2_conv5x1", "conv", 8, c, (5, 1), activation=lr, group=f"{tag}/branch2"),
        LayerSpec(f"{tag}_merge_conv1x1", "conv", 2 * c, c, (1, 1), activation=lr, group=f"{tag}/merge"),
    ]


def _decoder_layers(spec: ModelSpec) -> list[LayerSpec]:
    c, h, w = spec.input_dims
    return [
        LayerSpec("dec_fc", "fc", spec.codeword_size, c * h * w),
        LayerSpec("dec_head_conv5x5", "conv", c, c, (5, 5), activation="leaky_relu", group="head"),
        *_res_block_layers("dec_res1", c),
        *_res_block_layers("dec_res2", c),
    ]


# ---------------------------------------------------------------- complexity

@dataclass(frozen=True)
class ComplexityReport:
    mul_count: int
    param_count_equiv: float

    def line(self) -> str:
        params = self.param_count_equiv
        params_txt = str(int(params)) if float(params).is_integer() else f"{params:.2f}"
        return f"muls={self.mul_count} params_equiv={params_txt}"


def count_complexity(spec: ModelSpec | Iterable[LayerSpec] | None) -> ComplexityReport:
    """Multiplications for one forward pass and 32-bit-equivalent parameter count.

    Conv: H*W*kh*kw*Cin*Cout muls. Float fc: in*out muls. A binarized fc needs
    only sign-flips and adds, so it costs zero muls and each weight counts as
    1/32 of a float parameter. Biases are always float.
    """
    if spec is None:
        return ComplexityReport(0, 0)
    if isinstance(spec, ModelSpec):
        layers, (_, h, w) = spec.layers, spec.input_dims
    else:
        layers, h, w = list(spec), 32, 32
    muls = 0
    float_params = 0
    binary_weights = 0
    for layer in layers:
        if layer.kind == "conv":
            kh, kw = layer.kernel
            muls += h * w * kh * kw * layer.in_dim * layer.out_dim
            float_params += kh * kw * layer.in_dim * layer.out_dim + layer.out_dim
        elif layer.binarized:
            binary_weights += layer.in_dim * layer.out_dim
            float_params += layer.out_dim
        else:
            muls += layer.in_dim * layer.out_dim
            float_params += layer.in_dim * layer.out_dim + layer.out_dim
    params = float_params + binary_weights / 32
    if float(params).is_integer():
        params = int(params)
    return ComplexityReport(muls, params)


# ---------------------------------------------------------------- networks

class Network:
    """Parameters as persistent leaf nodes plus a forward that builds a fresh graph."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.layers = {layer.name: layer for layer in spec.layers}
        self.params: dict[str, Node] = {}
        for layer in spec.layers:
            if layer.kind == "conv":
                kh, kw = layer.kernel
                wshape = (layer.out_dim, layer.in_dim, kh, kw)
            else:
                wshape = (layer.out_dim, layer.in_dim)
            wname = f"{layer.name}.latent" if layer.binarized else f"{layer.name}.weight"
            self.params[wname] = ad.tensor(np.zeros(wshape), requires_grad=True)
            self.params[f"{layer.name}.bias"] = ad.tensor(np.zeros(layer.out_dim), requires_grad=True)

    # -- parameter plumbing
    def parameters(self) -> list[tuple[str, Node]]:
        return list(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if state[k].shape != p.value.shape:
                raise ad.DimensionError(f"{k}: expected {p.value.shape}, got {state[k].shape}")
            p.value = np.array(state[k], dtype=p.value.dtype)

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.value.ravel() for p in self.params.values()])

    def load_flat(self, flat: np.ndarray) -> None:
        offset = 0
        for p in self.params.values():
            n = p.value.size
            if offset + n > flat.size:
                raise ad.DimensionError(f"flat parameter vector too short ({flat.size})")
            p.value = np.array(flat[offset:offset + n], dtype=p.value.dtype).reshape(p.value.shape)
            offset += n
        if offset != flat.size:
            raise ad.DimensionError(f"flat parameter vector has {flat.size} entries, expected {offset}")

    def astype(self, dtype) -> "Network":
        for p in self.params.values():
            p.value = p.value.astype(dtype)
        return self

    def clip_latents(self) -> None:
        for name, p in self.params.items():
            if name.endswith(".latent"):
                np.clip(p.value, -1.0, 1.0, out=p.value)

    # -- layer application
    def _conv(self, name: str, x: Node) -> Node:
        y = ad.conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])
        act = self.layers[name].activation
        return ad.leaky_relu(y, LEAKY_SLOPE) if act == "leaky_relu" else y

    def _fc(self, name: str, x: Node) -> Node:
        layer = self.layers[name]
        if layer.binarized:
            weight = ad.binarize(self.params[f"{name}.latent"])
        else:
            weight = self.params[f"{name}.weight"]
        return ad.linear(x, weight, self.params[f"{name}.bias"])

    def __call__(self, x: Node) -> Node:
        return self.forward(x)

    def forward(self, x: Node) -> Node:
        raise NotImplementedError


class Encoder(Network):
    def forward(self, x: Node) -> Node:
        if x.value.ndim == 3:
            x = ad.reshape(x, (1, *x.shape))
        if tuple(x.shape[1:]) != self.spec.input_dims:
            raise ad.DimensionError(f"encoder expects inputs {self.spec.input_dims}, got {x.shape[1:]}")
        # inputs live in [0, 1] around 0.5; removing the offset is free (no muls)
        # and keeps the first activations from being swamped by a constant
        x = ad.sub(x, ad.constant(np.full((1, 1, 1, 1), INPUT_CENTER)))
        b1 = self._conv("enc_b1_conv3x3", x)
        b1 = self._conv("enc_b1_conv1x9", b1)
        b1 = self._conv("enc_b1_conv9x1", b1)
        b2 = self._conv("enc_b2_conv3x3", x)
        merged = self._conv("enc_merge_conv1x1", ad.concat([b1, b2], axis=1))
        flat = ad.reshape(merged, (merged.shape[0], -1))
        return self._fc("enc_fc", flat)


class Decoder(Network):
    def _res_block(self, tag: str, x: Node) -> Node:
        b1 = self._conv(f"{tag}_b1_conv3x3", x)
        b1 = self._conv(f"{tag}_b1_conv1x9", b1)
        b1 = self._conv(f"{tag}_b1_conv9x1", b1)
        b2 = self._conv(f"{tag}_b2_conv1x5", x)
        b2 = self._conv(f"{tag}_b2_conv5x1", b2)
        merged = self._conv(f"{tag}_merge_conv1x1", ad.concat([b1, b2], axis=1))
        return ad.leaky_relu(ad.add(merged, x), LEAKY_SLOPE)

    def forward(self, v: Node) -> Node:
        if v.value.ndim == 1:
            v = ad.reshape(v, (1, v.shape[0]))
        if v.shape[1] != self.spec.codeword_size:
            raise ad.DimensionError(
                f"decoder expects codewords of length {self.spec.codeword_size}, got {v.shape[1]}")
        h = self._fc("dec_fc", v)
        h = ad.reshape(h, (h.shape[0], *self.spec.input_dims))
        h = self._conv("dec_head_conv5x5", h)
        h = self._res_block("dec_res1", h)
        h = self._res_block("dec_res2", h)
        return ad.sigmoid(h)


def build_network(spec: ModelSpec) -> Network:
    return Encoder(spec) if spec.role == "encoder" else Decoder(spec)


def _check_codeword(M: int) -> None:
    if not isinstance(M, (int, np.integer)) or M <= 0:
        raise ConfigError(f"codeword size M must be a positive integer, got {M!r}")


def build_teacher_encoder(M: int, input_dims=(2, 32, 32), seed: int | None = 0) -> Encoder:
    _check_codeword(M)
    net = Encoder(ModelSpec("encoder", M, tuple(input_dims), binarized=False))
    if seed is not None:
        init_parameters(net, seed)
    return net


def build_student_encoder(M: int, input_dims=(2, 32, 32), seed: int | None = 0) -> Encoder:
    _check_codeword(M)
    net = Encoder(ModelSpec("encoder", M, tuple(input_dims), binarized=True))
    if seed is not None:
        init_parameters(net, seed)
    return net


def build_decoder(M: int, input_dims=(2, 32, 32), seed: int | None = 0) -> Decoder:
    _check_codeword(M)
    net = Decoder(ModelSpec("decoder", M, tuple(input_dims)))
    if seed is not None:
        init_parameters(net, seed)
    return net


def init_parameters(network: Network, seed: int) -> None:
    """Fan-in scaled uniform weights (variance 1/fan_in), zero biases.

    Binarized latents use the same draw, clipped into [-1, 1].
    """
    rng = np.random.default_rng(seed)
    dtype = ad.default_dtype()
    for name, p in network.params.items():
        shape = p.value.shape
        if name.endswith(".bias"):
            p.value = np.zeros(shape, dtype=dtype)
            continue
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(3.0 / fan_in)
        w = rng.uniform(-bound, bound, size=shape)
        if name.endswith(".latent"):
            w = np.clip(w, -1.0, 1.0)
        p.value = w.astype(dtype)


def spec_summary(spec: ModelSpec) -> dict:
    d = spec.to_dict()
    d["layers"] = [asdict(layer) for layer in spec.layers]
    return d
