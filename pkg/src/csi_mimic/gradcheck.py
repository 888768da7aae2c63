"""Central finite-difference checks for the autodiff core (run in 64-bit)."""
from __future__ import annotations

from dataclasses import replace
from typing import Callable

import numpy as np

from . import autodiff as ad

EPS = 1e-5
TOL = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def numeric_grad(loss_fn: Callable[[], float], arr: np.ndarray, index, eps: float = EPS) -> float:
    old = arr[index]
    arr[index] = old + eps
    up = loss_fn()
    arr[index] = old - eps
    down = loss_fn()
    arr[index] = old
    return (up - down) / (2 * eps)


def _crosses_kink(pattern, base, arr, index, eps) -> bool:
    """True when x +/- eps flips the sign of some leaky_relu input: the
    function is not differentiable inside the stencil there."""
    old = arr[index]
    try:
        for delta in (eps, -eps):
            arr[index] = old + delta
            if any(not np.array_equal(a, b) for a, b in zip(pattern(), base)):
                return True
    finally:
        arr[index] = old
    return False


def check_gradients(build: Callable[[dict[str, ad.Node]], ad.Node], inputs: dict[str, np.ndarray], *,
                    eps: float = EPS, max_entries: int | None = None,
                    rng: np.random.Generator | None = None,
                    skipped: dict[str, int] | None = None) -> dict[str, float]:
    """Compare backward() against central differences for every input array.

    ``build`` maps leaf nodes to a scalar loss. ``max_entries`` samples that many
    entries per input instead of all of them. Entries whose stencil straddles a
    leaky_relu kink are left out and counted in ``skipped``. Returns the
    relative error per input.
    """
    rng = rng or np.random.default_rng(0)
    with ad.precision(np.float64):
        arrays = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
        leaves = {k: ad.Node(a, requires_grad=True) for k, a in arrays.items()}
        ad.backward(build(leaves))
        errors = {}
        for name, arr in arrays.items():
            grad = leaves[name].grad
            grad = np.zeros_like(arr) if grad is None else grad
            if max_entries is None or arr.size <= max_entries:
                picks = list(np.ndindex(arr.shape))
            else:
                flat = rng.choice(arr.size, size=max_entries, replace=False)
                picks = [np.unravel_index(i, arr.shape) for i in flat]

            def loss_value():
                return float(build({k: ad.Node(a) for k, a in arrays.items()}).value)

            def pattern():
                with ad.kink_trace() as trace:
                    build({k: ad.Node(a) for k, a in arrays.items()})
                return [m.copy() for m in trace]

            base = pattern()
            kept = [idx for idx in picks if not _crosses_kink(pattern, base, arr, idx, eps)]
            if skipped is not None:
                skipped[name] = len(picks) - len(kept)
            numeric = np.array([numeric_grad(loss_value, arr, idx, eps) for idx in kept])
            analytic = np.array([grad[idx] for idx in kept])
            errors[name] = relative_error(analytic, numeric)
    return errors


def check_network_gradients(encoder, decoder, x: np.ndarray, *, eps: float = EPS, max_entries: int = 8,
                            rng: np.random.Generator | None = None,
                            skipped: dict[str, int] | None = None) -> dict[str, float]:
    """Gradient check of mse(x, decoder(encoder(x))) over every network parameter.

    A binarized layer is checked through its effective weight s*sign(latent):
    the straight-through rule for the latent is a surrogate, not a derivative,
    so finite differences cannot verify it (it has its own definition test).
    """
    rng = rng or np.random.default_rng(0)
    nets = {"enc": encoder, "dec": decoder}
    with ad.precision(np.float64):
        for net in nets.values():
            net.astype(np.float64)
        effective = {}
        for tag, net in nets.items():
            for name, node in net.params.items():
                key = f"{tag}:{name}"
                if name.endswith(".latent"):
                    effective[key] = ad.binarize_forward(node.value)
                else:
                    effective[key] = node.value

        def build(leaves):
            saved = {}
            for key, leaf in leaves.items():
                if key == "x":
                    continue
                tag, name = key.split(":", 1)
                net = nets[tag]
                saved[key] = net.params[name]
                net.params[name] = leaf
            patched = {}
            try:
                # binarize is bypassed: the leaf already holds the effective weight
                for key in leaves:
                    if key.endswith(".latent"):
                        tag, name = key.split(":", 1)
                        layer = name.rsplit(".", 1)[0]
                        patched[tag, layer] = nets[tag].layers[layer]
                        nets[tag].layers[layer] = _unbinarized(nets[tag].layers[layer])
                        nets[tag].params[f"{layer}.weight"] = leaves[key]
                return ad.mse(leaves["x"], decoder(encoder(leaves["x"])))
            finally:
                for (tag, layer), spec in patched.items():
                    nets[tag].layers[layer] = spec
                    nets[tag].params.pop(f"{layer}.weight", None)
                for key, node in saved.items():
                    tag, name = key.split(":", 1)
                    nets[tag].params[name] = node

        inputs = {"x": np.asarray(x, dtype=np.float64), **effective}
        return check_gradients(build, inputs, eps=eps, max_entries=max_entries, rng=rng, skipped=skipped)


def _unbinarized(layer):
    return replace(layer, binarized=False)
