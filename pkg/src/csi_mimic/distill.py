"""Losses, schedules, Adam, and the plain / vanilla-KD / codeword-mimic training pipelines."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigError, DimensionError, Node, UsageError
from .data import Dataset
from .nn import Decoder, Encoder, Network, build_decoder, build_student_encoder, build_teacher_encoder

log = logging.getLogger(__name__)

PIPELINES = ("plain", "vanilla_kd", "codeword_mimic")
SCHEDULERS = ("const", "linear", "cosine")


@dataclass(frozen=True)
class TrainPlan:
    pipeline: str = "plain"
    epochs: int = 100
    mimic_epochs: int = 20
    batch_size: int = 200
    alpha0: float | None = 1e-4  # None = balance the two loss terms on the first batch
    alpha_scheduler: str = "cosine"
    beta0: float | None = None  # vanilla KD weight; None = auto-scale from a one-batch probe
    warmup_epochs: int = 30
    lr_benchmark: tuple[float, float] = (2e-3, 4e-5)
    lr_mimic: tuple[float, float] = (2e-3, 4e-5)
    lr_explore_decoder: tuple[float, float] = (4e-3, 4e-5)
    lr_explore_encoder: tuple[float, float] = (2e-4, 4e-5)
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    reset_adam_at_boundary: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"pipeline must be one of {PIPELINES}, got {self.pipeline!r}")
        if self.alpha_scheduler not in SCHEDULERS:
            raise ConfigError(f"alpha_scheduler must be one of {SCHEDULERS}, got {self.alpha_scheduler!r}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.mimic_epochs < 0 or (self.pipeline == "codeword_mimic" and self.mimic_epochs > self.epochs):
            raise ConfigError(f"mimic_epochs={self.mimic_epochs} must lie in [0, epochs={self.epochs}]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        for key in ("lr_benchmark", "lr_mimic", "lr_explore_decoder", "lr_explore_encoder"):
            if min(getattr(self, key)) <= 0:
                raise ConfigError(f"{key}: learning rates must be positive")
        for key in ("alpha0", "beta0"):
            v = getattr(self, key)
            if v is not None and not 0 <= v <= 1:
                raise ConfigError(f"{key} must lie in [0, 1], got {v}")

    @property
    def two_stage(self) -> bool:
        return self.pipeline == "codeword_mimic" and self.mimic_epochs > 0

    def summary(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- schedules

def alpha_schedule(t: int, mimic_epochs: int, alpha0: float, kind: str = "cosine") -> float:
    """Distillation weight for epoch ``t``; zero once the mimic stage is over."""
    if mimic_epochs <= 0:
        raise ConfigError("the codeword-mimic scheduler needs mimic_epochs > 0")
    if t < 0:
        raise UsageError(f"epoch must be non-negative, got {t}")
    if alpha0 < 0:
        raise ConfigError("alpha0 must be non-negative")
    if t > mimic_epochs:
        return 0.0
    if kind == "cosine":
        if t == mimic_epochs:
            return 0.0
        return 0.5 * alpha0 * (1.0 + math.cos(math.pi * t / mimic_epochs))
    if kind == "linear":
        return alpha0 * (1.0 - t / mimic_epochs)
    if kind == "const":
        return alpha0
    raise ConfigError(f"unknown scheduler kind {kind!r}")


def cosine_anneal(u: float, length: float, start: float, end: float) -> float:
    if length <= 0:
        return start
    return end + 0.5 * (start - end) * (1.0 + math.cos(math.pi * u / length))


def benchmark_lr(t: int, epochs: int, warmup: int, start: float, end: float) -> float:
    warmup = min(warmup, epochs)
    if t < warmup:
        return end + (start - end) * t / warmup
    return cosine_anneal(t - warmup, epochs - warmup, start, end)


def lr_schedule(t: int, plan: TrainPlan) -> tuple[float, float]:
    """(encoder LR, decoder LR) for epoch ``t``."""
    if not 0 <= t < plan.epochs:
        raise UsageError(f"epoch {t} outside [0, {plan.epochs})")
    if not plan.two_stage:
        lr = benchmark_lr(t, plan.epochs, plan.warmup_epochs, *plan.lr_benchmark)
        return lr, lr
    if t < plan.mimic_epochs:
        lr = cosine_anneal(t, plan.mimic_epochs, *plan.lr_mimic)
        return lr, lr
    u, length = t - plan.mimic_epochs, plan.epochs - plan.mimic_epochs
    return (cosine_anneal(u, length, *plan.lr_explore_encoder),
            cosine_anneal(u, length, *plan.lr_explore_decoder))


# ---------------------------------------------------------------- losses

def cm_loss(v_teacher: Node, v_student: Node, h: Node, h_hat: Node, alpha: float) -> Node:
    """alpha * MSE(v_T, v_S) + (1 - alpha) * MSE(H, Ĥ); the teacher codeword is detached."""
    if v_teacher.shape != v_student.shape:
        raise DimensionError(f"codeword shapes differ: {v_teacher.shape} vs {v_student.shape}")
    if h.shape != h_hat.shape:
        raise DimensionError(f"CSI shapes differ: {h.shape} vs {h_hat.shape}")
    l_cm = ad.mse(ad.detach(v_teacher), v_student)
    l_gt = ad.mse(h, h_hat)
    return ad.add(ad.scale(l_cm, alpha), ad.scale(l_gt, 1.0 - alpha))


def vanilla_kd_loss(h_teacher: Node, h_student: Node, h: Node, beta: float) -> Node:
    if not (h_teacher.shape == h_student.shape == h.shape):
        raise DimensionError(
            f"KD shapes differ: teacher {h_teacher.shape}, student {h_student.shape}, target {h.shape}")
    l_kd = ad.mse(ad.detach(h_teacher), h_student)
    l_gt = ad.mse(h, h_student)
    return ad.add(ad.scale(l_kd, beta), ad.scale(l_gt, 1.0 - beta))


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None], state: AdamState,
              lr: float | dict[str, float], betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction; binarized latents are clipped to [-1, 1]."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        step_lr = lr[name] if isinstance(lr, dict) else lr
        p -= (step_lr / c1) * m / (np.sqrt(v / c2) + eps)
        if name.endswith(".latent"):
            np.clip(p, -1.0, 1.0, out=p)


class Adam:
    """Adam over named parameter groups, each with its own learning rate."""

    def __init__(self, groups: dict[str, Network], betas=(0.9, 0.999), eps: float = 1e-8):
        for tag, net in groups.items():
            if getattr(net, "frozen", False):
                raise UsageError(f"network {tag!r} is frozen and cannot be optimized")
        self.groups = groups
        self.betas = betas
        self.eps = eps
        self.lrs = {tag: 0.0 for tag in groups}
        self.state = AdamState()

    def reset(self) -> None:
        self.state = AdamState()

    def step(self) -> None:
        params, grads, lrs = {}, {}, {}
        for tag, net in self.groups.items():
            for name, node in net.parameters():
                key = f"{tag}/{name}"
                params[key] = node.value
                grads[key] = node.grad
                lrs[key] = self.lrs[tag]
        adam_step(params, grads, self.state, lrs, self.betas, self.eps)

    def zero_grad(self) -> None:
        for net in self.groups.values():
            net.zero_grad()


# ---------------------------------------------------------------- training

@dataclass
class EpochRecord:
    epoch: int
    loss_gt: float
    loss_cm: float | None
    weight: float  # alpha(t) for CM, beta(t) for KD, 0 for plain
    lr_encoder: float
    lr_decoder: float


@dataclass
class TrainedPair:
    encoder: Encoder
    decoder: Decoder
    plan: TrainPlan
    history: list[EpochRecord] = field(default_factory=list)
    mse_cm_mid: float | None = None
    mse_cm_end: float | None = None
    alpha0: float | None = None
    beta0: float | None = None
    seconds: float = 0.0

    def freeze(self) -> "TrainedPair":
        self.encoder.frozen = True
        self.decoder.frozen = True
        return self


def forward_values(net: Network, x: np.ndarray, batch: int = 500) -> np.ndarray:
    """Inference in chunks without keeping graphs around."""
    outs = [net(ad.constant(x[i:i + batch])).value for i in range(0, len(x), batch)]
    return np.concatenate(outs) if outs else np.empty((0,))


def _codeword_mse(v_a: np.ndarray, v_b: np.ndarray) -> float:
    return float(np.mean((v_a.astype(np.float64) - v_b.astype(np.float64)) ** 2))


def _split_seeds(seed: int) -> tuple[int, int, int]:
    enc, dec, shuffle = np.random.SeedSequence(seed).generate_state(3)
    return int(enc), int(dec), int(shuffle)


def _check_data(train: Dataset | np.ndarray) -> np.ndarray:
    x = train.x if isinstance(train, Dataset) else np.asarray(train)
    if len(x) == 0:
        raise ValueError("training data is empty")
    return np.ascontiguousarray(x, dtype=ad.default_dtype())


def fit(encoder: Encoder, decoder: Decoder, x_train: np.ndarray, plan: TrainPlan, *,
        loss_kind: str = "plain", teacher_codewords: np.ndarray | None = None,
        teacher_outputs: np.ndarray | None = None, weight_fn=None,
        eval_teacher_codewords: np.ndarray | None = None, x_eval: np.ndarray | None = None,
        progress: bool = False) -> TrainedPair:
    """Shared mini-batch loop.

    ``loss_kind`` is "plain", "cm" or "kd". Schedules are epoch-granular. In a
    two-stage plan the Adam moments are reset at the mimic/explore boundary and
    the explore stage builds graphs without any codeword term.
    """
    _, _, shuffle_seed = _split_seeds(plan.seed)
    rng = np.random.default_rng(shuffle_seed)
    opt = Adam({"encoder": encoder, "decoder": decoder}, plan.adam_betas, plan.adam_eps)
    result = TrainedPair(encoder, decoder, plan)
    n = len(x_train)
    started = time.perf_counter()

    def eval_codeword_mse():
        if eval_teacher_codewords is None or x_eval is None:
            return None
        return _codeword_mse(eval_teacher_codewords, forward_values(encoder, x_eval))

    for t in range(plan.epochs):
        if plan.two_stage and t == plan.mimic_epochs:
            result.mse_cm_mid = eval_codeword_mse()
            if plan.reset_adam_at_boundary:
                opt.reset()
        lr_enc, lr_dec = lr_schedule(t, plan)
        opt.lrs["encoder"], opt.lrs["decoder"] = lr_enc, lr_dec
        mimic = loss_kind == "cm" and plan.two_stage and t < plan.mimic_epochs
        weight = weight_fn(t) if weight_fn is not None and (loss_kind == "kd" or mimic) else 0.0
        order = rng.permutation(n)
        sum_gt, sum_cm, batches = 0.0, 0.0, 0
        for start in range(0, n, plan.batch_size):
            idx = order[start:start + plan.batch_size]
            h = ad.constant(x_train[idx])
            v_s = encoder(h)
            h_hat = decoder(v_s)
            if mimic:
                loss = cm_loss(ad.constant(teacher_codewords[idx]), v_s, h, h_hat, weight)
            elif loss_kind == "kd":
                loss = vanilla_kd_loss(ad.constant(teacher_outputs[idx]), h_hat, h, weight)
            else:
                loss = ad.mse(h, h_hat)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            sum_gt += float(np.mean((h.value - h_hat.value) ** 2))
            if teacher_codewords is not None:
                sum_cm += _codeword_mse(teacher_codewords[idx], v_s.value)
            batches += 1
        rec = EpochRecord(t, sum_gt / batches, sum_cm / batches if teacher_codewords is not None else None,
                          weight, lr_enc, lr_dec)
        result.history.append(rec)
        if progress:
            log.info("epoch %d gt=%.3e cm=%s w=%.2e lr=(%.2e, %.2e)", t, rec.loss_gt, rec.loss_cm,
                     weight, lr_enc, lr_dec)
    if plan.two_stage and plan.mimic_epochs == plan.epochs:
        result.mse_cm_mid = eval_codeword_mse()
    result.mse_cm_end = eval_codeword_mse()
    result.seconds = time.perf_counter() - started
    return result


def _eval_arrays(test: Dataset | None, teacher_encoder: Encoder | None):
    if test is None or teacher_encoder is None:
        return None, None
    x = np.ascontiguousarray(test.x, dtype=ad.default_dtype())
    return forward_values(teacher_encoder, x), x


def train_plain(plan: TrainPlan, train: Dataset, test: Dataset | None = None, *, student: bool = True,
                codeword_size: int | None = None, teacher_encoder: Encoder | None = None,
                progress: bool = False) -> TrainedPair:
    """Ground-truth-only training on the benchmark LR curve.

    ``teacher_encoder`` is used for reporting codeword MSE only.
    """
    x = _check_data(train)
    M = codeword_size or x.shape[1] * x.shape[2] * x.shape[3] // 4
    enc_seed, dec_seed, _ = _split_seeds(plan.seed)
    builder = build_student_encoder if student else build_teacher_encoder
    encoder = builder(M, x.shape[1:], seed=enc_seed)
    decoder = build_decoder(M, x.shape[1:], seed=dec_seed)
    v_eval, x_eval = _eval_arrays(test, teacher_encoder)
    plain = TrainPlan(**{**plan.summary(), "pipeline": "plain"})
    return fit(encoder, decoder, x, plain, loss_kind="plain", eval_teacher_codewords=v_eval,
               x_eval=x_eval, progress=progress)


def train_teacher(plan: TrainPlan, train: Dataset, test: Dataset | None = None, *,
                  codeword_size: int | None = None, progress: bool = False) -> TrainedPair:
    if plan.pipeline != "plain":
        raise ConfigError("teacher training uses the plain pipeline")
    return train_plain(plan, train, test, student=False, codeword_size=codeword_size,
                       progress=progress).freeze()


def train_student_cm(plan: TrainPlan, train: Dataset, teacher_encoder: Encoder,
                     test: Dataset | None = None, progress: bool = False) -> TrainedPair:
    """Codeword-mimic student. Only the teacher encoder is needed; its codewords are cached once."""
    if plan.pipeline != "codeword_mimic":
        raise ConfigError("train_student_cm needs pipeline = codeword_mimic")
    x = _check_data(train)
    M = teacher_encoder.spec.codeword_size
    enc_seed, dec_seed, _ = _split_seeds(plan.seed)
    encoder = build_student_encoder(M, x.shape[1:], seed=enc_seed)
    decoder = build_decoder(M, x.shape[1:], seed=dec_seed)
    if teacher_encoder.spec.input_dims != encoder.spec.input_dims:
        raise ConfigError("teacher and student encoders disagree on input dims")
    v_teacher = forward_values(teacher_encoder, x)
    v_eval, x_eval = _eval_arrays(test, teacher_encoder)
    if not plan.two_stage:
        # zero mimic epochs is the benchmark run
        return fit(encoder, decoder, x, plan, loss_kind="plain", teacher_codewords=v_teacher,
                   eval_teacher_codewords=v_eval, x_eval=x_eval, progress=progress)

    alpha0 = plan.alpha0
    if alpha0 is None:
        alpha0 = probe_alpha0(encoder, decoder, x, v_teacher, plan.batch_size)

    def weight(t):
        return alpha_schedule(t, plan.mimic_epochs, alpha0, plan.alpha_scheduler)
    result = fit(encoder, decoder, x, plan, loss_kind="cm", teacher_codewords=v_teacher, weight_fn=weight,
                 eval_teacher_codewords=v_eval, x_eval=x_eval, progress=progress)
    result.alpha0 = alpha0
    return result


def _balance(l_distill: float, l_gt: float) -> float:
    """w such that w * l_distill == (1 - w) * l_gt."""
    if l_distill + l_gt == 0:
        return 0.0
    return l_gt / (l_gt + l_distill)


def probe_alpha0(encoder: Encoder, decoder: Decoder, x: np.ndarray, teacher_codewords: np.ndarray,
                 batch_size: int) -> float:
    """alpha0 scaling L_cm and L_gt to the same size on the first batch of the untrained student."""
    h = x[:batch_size]
    v = forward_values(encoder, h)
    l_cm = _codeword_mse(teacher_codewords[:batch_size], v)
    l_gt = float(np.mean((h - forward_values(decoder, v)) ** 2))
    return _balance(l_cm, l_gt)


def probe_beta0(encoder: Encoder, decoder: Decoder, x: np.ndarray, teacher_out: np.ndarray,
                batch_size: int) -> float:
    """Weight making beta*L_kd and (1-beta)*L_gt equal on the first batch."""
    h = x[:batch_size]
    h_hat = forward_values(decoder, forward_values(encoder, h))
    l_kd = float(np.mean((teacher_out[:batch_size] - h_hat) ** 2))
    l_gt = float(np.mean((h - h_hat) ** 2))
    return _balance(l_kd, l_gt)


def train_student_kd(plan: TrainPlan, train: Dataset, teacher: TrainedPair,
                     test: Dataset | None = None, progress: bool = False) -> TrainedPair:
    """Vanilla KD baseline: the student output chases the teacher output on the benchmark LR curve."""
    if plan.pipeline != "vanilla_kd":
        raise ConfigError("train_student_kd needs pipeline = vanilla_kd")
    x = _check_data(train)
    M = teacher.encoder.spec.codeword_size
    enc_seed, dec_seed, _ = _split_seeds(plan.seed)
    encoder = build_student_encoder(M, x.shape[1:], seed=enc_seed)
    decoder = build_decoder(M, x.shape[1:], seed=dec_seed)
    teacher_out = forward_values(teacher.decoder, forward_values(teacher.encoder, x))
    beta0 = plan.beta0
    if beta0 is None:
        beta0 = probe_beta0(encoder, decoder, x, teacher_out, plan.batch_size)
    horizon = max(plan.epochs, 1)

    def weight(t):
        return alpha_schedule(t, horizon, beta0, plan.alpha_scheduler)
    v_eval, x_eval = _eval_arrays(test, teacher.encoder)
    result = fit(encoder, decoder, x, plan, loss_kind="kd", teacher_outputs=teacher_out, weight_fn=weight,
                 eval_teacher_codewords=v_eval, x_eval=x_eval, progress=progress)
    result.beta0 = beta0
    return result
