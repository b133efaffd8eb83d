"""Shared test helpers: finite-difference gradient checking.

Forward passes store float32, so a central difference of a scalar loss
carries rounding noise of roughly ulp(loss)/(2*eps). Checks therefore use
the two-branch rule gap <= atol + rtol*max(|a|, |b|): rtol carries the
relative agreement requirement and atol absorbs the measured noise floor
(and covers parameters whose true gradient is exactly zero, where a purely
relative comparison is undefined).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from trajdistill.numerics import Tensor, grad


def central_fd(value_fn: Callable[[], float], arr: np.ndarray, idx, eps: float) -> float:
    """Symmetric secant through f(x +- eps) at one element of arr.

    Uses the actually-representable perturbed values so float32 storage of
    the parameter does not bias the step size.
    """
    old = arr[idx]
    hi = np.float32(float(old) + eps)
    lo = np.float32(float(old) - eps)
    arr[idx] = hi
    fp = value_fn()
    arr[idx] = lo
    fm = value_fn()
    arr[idx] = old
    return (fp - fm) / (float(hi) - float(lo))


def check_gradients(
    build: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    eps: float = 1e-2,
    rtol: float = 1e-3,
    atol: float = 2e-5,
    max_elements: int = 64,
    sample_seed: int = 0,
) -> float:
    """Compare analytic gradients of a scalar-loss builder against FD.

    Rebuilds the graph per probe so each evaluation sees the perturbed
    leaf. Returns the worst gap/allowance ratio (< 1 means pass).
    """
    loss = build()
    grads = grad(loss, leaves)
    pick = np.random.default_rng(sample_seed)
    worst = 0.0
    for leaf, g in zip(leaves, grads):
        flat_param = leaf.data.reshape(-1)
        flat_grad = g.reshape(-1)
        n = flat_param.size
        idxs = range(n) if n <= max_elements else pick.choice(n, max_elements, replace=False)
        for j in idxs:
            g_fd = central_fd(lambda: float(build().data), flat_param, j, eps)
            g_an = float(flat_grad[j])
            gap = abs(g_an - g_fd)
            allowed = atol + rtol * max(abs(g_an), abs(g_fd))
            ratio = gap / allowed
            if ratio > worst:
                worst = ratio
            assert gap <= allowed, (
                f"gradient mismatch at element {j}: analytic {g_an!r} vs "
                f"finite-difference {g_fd!r} (gap {gap:.3e}, allowed {allowed:.3e})"
            )
    return worst


def leaf(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Tensor:
    return Tensor((rng.standard_normal(shape) * scale).astype(np.float32), requires_grad=True)


# ---------------------------------------------------------------------------
# float64 reference implementations used as noise-free FD oracles


def ref_gelu(x: np.ndarray) -> np.ndarray:
    c = np.sqrt(2.0 / np.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


def ref_sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def ref_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def ref_layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                   eps: float = 1e-5) -> np.ndarray:
    mu = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
    return gamma * (x - mu) / np.sqrt(var + eps) + beta


def ref_embed_time(k: np.ndarray, width: int) -> np.ndarray:
    half = width // 2
    freqs = np.array([1.0]) if half == 1 else 10000.0 ** (np.arange(half) / (half - 1))
    angles = np.atleast_1d(np.asarray(k, dtype=np.float64))[:, None] * freqs[None, :]
    out = np.empty((angles.shape[0], width))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def ref_positional_encoding(length: int, width: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    half = width // 2
    div = 10000.0 ** (np.arange(half, dtype=np.float64) / half)
    table = np.zeros((length, width))
    table[:, 0::2] = np.sin(pos / div)
    table[:, 1::2] = np.cos(pos / div[: width - half])
    return table


def _ref_csl(p: dict, prefix: str, x: np.ndarray, ctx: np.ndarray) -> np.ndarray:
    gate = ref_sigmoid(ctx @ p[f"{prefix}.wg"] + p[f"{prefix}.bg"])[:, None, :]
    shift = (ctx @ p[f"{prefix}.wb"])[:, None, :]
    return (x @ p[f"{prefix}.wx"]) * gate + shift


def _ref_attention(p: dict, prefix: str, x: np.ndarray, heads: int) -> np.ndarray:
    b, n, d = x.shape
    dh = d // heads

    def split(t: np.ndarray) -> np.ndarray:
        return t.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)

    q = split(x @ p[f"{prefix}.wq"] + p[f"{prefix}.wq_b"])
    k = split(x @ p[f"{prefix}.wk"] + p[f"{prefix}.wk_b"])
    v = split(x @ p[f"{prefix}.wv"] + p[f"{prefix}.wv_b"])
    scores = (q @ k.swapaxes(-1, -2)) / np.sqrt(dh)
    mixed = ref_softmax(scores, axis=-1) @ v
    merged = mixed.transpose(0, 2, 1, 3).reshape(b, n, d)
    return merged @ p[f"{prefix}.wo"] + p[f"{prefix}.wo_b"]


def ref_denoise(p: dict, config, y: np.ndarray, k, f: np.ndarray) -> np.ndarray:
    """float64 mirror of the denoiser forward pass, for FD oracles."""
    batch = y.shape[0]
    k_arr = np.atleast_1d(np.asarray(k, dtype=np.float64))
    if k_arr.shape[0] == 1 and batch > 1:
        k_arr = np.repeat(k_arr, batch)
    ctx = np.concatenate([ref_embed_time(k_arr, config.time_width), f], axis=-1)
    h = _ref_csl(p, "in", y, ctx)
    h = h + ref_positional_encoding(config.horizon, config.model_width)
    for i in range(config.layers):
        pre = f"layer{i}"
        h = ref_layer_norm(h + _ref_attention(p, pre, h, config.heads),
                           p[f"{pre}.ln1_g"], p[f"{pre}.ln1_b"])
        ff = ref_gelu(h @ p[f"{pre}.ff1"] + p[f"{pre}.ff1_b"]) @ p[f"{pre}.ff2"] + p[f"{pre}.ff2_b"]
        h = ref_layer_norm(h + ff, p[f"{pre}.ln2_g"], p[f"{pre}.ln2_b"])
    h = _ref_csl(p, "head0", h, ctx)
    h = _ref_csl(p, "head1", h, ctx)
    return _ref_csl(p, "head2", h, ctx)


def fd_of_reference(ref_value, arrays: list, li: int, idx, eps: float = 1e-4) -> float:
    """Central difference of a float64 reference at one element of one input."""
    old = arrays[li][idx]
    arrays[li][idx] = old + eps
    fp = ref_value(arrays)
    arrays[li][idx] = old - eps
    fm = ref_value(arrays)
    arrays[li][idx] = old
    return (fp - fm) / (2.0 * eps)


def check_against_reference(
    build,
    ref_value,
    leaves: Sequence[Tensor],
    rtol: float = 1e-3,
    atol: float = 1e-7,
    eps: float = 1e-4,
    max_elements: int = 48,
    sample_seed: int = 0,
) -> float:
    """Engine analytic gradients vs central FD of a float64 reference.

    The reference is exact to ~eps^2, so rtol genuinely binds; atol only
    covers parameters whose true gradient is zero.
    """
    grads = grad(build(), leaves)
    arrays = [lf.data.astype(np.float64) for lf in leaves]
    pick = np.random.default_rng(sample_seed)
    worst = 0.0
    for li, g in enumerate(grads):
        flat = g.reshape(-1)
        n = flat.size
        idxs = range(n) if n <= max_elements else pick.choice(n, max_elements, replace=False)
        for j in idxs:
            idx = np.unravel_index(j, arrays[li].shape)
            g_fd = fd_of_reference(ref_value, arrays, li, idx, eps)
            g_an = float(flat[j])
            gap = abs(g_an - g_fd)
            allowed = atol + rtol * max(abs(g_an), abs(g_fd))
            worst = max(worst, gap / allowed)
            assert gap <= allowed, (
                f"leaf {li} element {j}: analytic {g_an!r} vs reference FD {g_fd!r} "
                f"(gap {gap:.3e}, allowed {allowed:.3e})"
            )
    return worst
