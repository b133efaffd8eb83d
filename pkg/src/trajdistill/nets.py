"""Denoiser and context encoder.

The denoiser maps a noisy future-velocity sequence (B, P, 2) plus a scalar
time k and context features f (B, F) to a velocity-parameterization estimate
of the same shape: context-conditioned input projection to width 2H, fixed
sinusoidal positional encoding over the P axis, 3 post-norm transformer
layers (4 heads, feedforward inner width 5H), and a conditioned head
2H -> H -> H/2 -> 2. Conditioning concatenates a sinusoidal embedding of k
with f; every conditioned layer gates its linear path with a sigmoid of the
context and adds a context-dependent shift.

The encoder runs a GRU over the ego history (relative states only, so the
embedding is translation invariant) and mean-pools a per-neighbor MLP over
the neighbors observed at the anchor step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ContractViolation, NumericOverflowError
from .numerics import ParamSet, RandomSource, Tensor, concat, layer_norm, tanh

# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class DenoiserConfig:
    hidden: int = 256
    horizon: int = 12
    point_dim: int = 2
    context_width: int = 256
    time_width: int = 16
    layers: int = 3
    heads: int = 4

    def __post_init__(self):
        if self.hidden < 4 or self.hidden % 4 != 0:
            raise ContractViolation(f"hidden must be a positive multiple of 4, got {self.hidden}")
        if self.horizon < 1:
            raise ContractViolation(f"horizon must be >= 1, got {self.horizon}")
        if self.time_width < 2 or self.time_width % 2 != 0:
            raise ContractViolation(f"time_width must be even and >= 2, got {self.time_width}")
        if (2 * self.hidden) % self.heads != 0:
            raise ContractViolation(
                f"model width {2*self.hidden} not divisible by {self.heads} heads"
            )

    @property
    def model_width(self) -> int:
        return 2 * self.hidden

    @property
    def ff_width(self) -> int:
        return 5 * self.hidden

    @property
    def ctx_width(self) -> int:
        return self.context_width + self.time_width


@dataclass(frozen=True)
class EncoderConfig:
    history_len: int = 8
    state_width: int = 6
    recurrent_width: int = 128
    neighbor_width: int = 64
    out_width: int = 256
    max_neighbors: int = 8
    neighbor_radius: float = 5.0

    def __post_init__(self):
        if self.history_len < 2:
            raise ContractViolation(f"history_len must be >= 2, got {self.history_len}")
        if self.state_width != 6:
            raise ContractViolation(f"per-step state width is fixed at 6, got {self.state_width}")
        if min(self.recurrent_width, self.neighbor_width, self.out_width) < 1:
            raise ContractViolation("widths must be positive")
        if self.max_neighbors < 0 or self.neighbor_radius <= 0:
            raise ContractViolation("neighbor limits must be positive")


# ---------------------------------------------------------------------------
# deterministic feature maps


def embed_time(k, width: int) -> np.ndarray:
    """Interleaved sin/cos of k against geometrically spaced frequencies."""
    if width < 2 or width % 2 != 0:
        raise ContractViolation(f"time embedding width must be even and >= 2, got {width}")
    k = np.atleast_1d(np.asarray(k, dtype=np.float64))
    if np.any(k < 0.0) or np.any(k > 1.0):
        raise ContractViolation(f"time embedding defined on [0, 1], got {k}")
    half = width // 2
    if half == 1:
        freqs = np.array([1.0])
    else:
        freqs = 10000.0 ** (np.arange(half) / (half - 1))
    angles = k[:, None] * freqs[None, :]
    out = np.empty((k.shape[0], width), dtype=np.float32)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def positional_encoding(length: int, width: int) -> np.ndarray:
    """Classic fixed sin/cos table over sequence positions."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    half = width // 2
    div = 10000.0 ** (np.arange(half, dtype=np.float64) / half)
    table = np.zeros((length, width), dtype=np.float32)
    table[:, 0::2] = np.sin(pos / div)
    table[:, 1::2] = np.cos(pos / div[: width - half])
    return table


# ---------------------------------------------------------------------------
# initialization


def _uniform_fan_in(rng: RandomSource, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(shape, -bound, bound), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def _init_csl(ps: ParamSet, prefix: str, rng: RandomSource, d_in: int, d_out: int, d_ctx: int):
    ps.add(f"{prefix}.wx", _uniform_fan_in(rng, d_in, (d_in, d_out)))
    ps.add(f"{prefix}.wg", _uniform_fan_in(rng, d_ctx, (d_ctx, d_out)))
    ps.add(f"{prefix}.bg", _zeros((d_out,)))
    ps.add(f"{prefix}.wb", _uniform_fan_in(rng, d_ctx, (d_ctx, d_out)))


def init_denoiser(config: DenoiserConfig, rng: RandomSource) -> ParamSet:
    ps = ParamSet()
    d = config.model_width
    c = config.ctx_width
    _init_csl(ps, "in", rng, config.point_dim, d, c)
    for i in range(config.layers):
        p = f"layer{i}"
        for name in ("wq", "wk", "wv", "wo"):
            ps.add(f"{p}.{name}", _uniform_fan_in(rng, d, (d, d)))
            ps.add(f"{p}.{name}_b", _zeros((d,)))
        ps.add(f"{p}.ln1_g", Tensor(np.ones(d, dtype=np.float32), requires_grad=True))
        ps.add(f"{p}.ln1_b", _zeros((d,)))
        ps.add(f"{p}.ff1", _uniform_fan_in(rng, d, (d, config.ff_width)))
        ps.add(f"{p}.ff1_b", _zeros((config.ff_width,)))
        ps.add(f"{p}.ff2", _uniform_fan_in(rng, config.ff_width, (config.ff_width, d)))
        ps.add(f"{p}.ff2_b", _zeros((d,)))
        ps.add(f"{p}.ln2_g", Tensor(np.ones(d, dtype=np.float32), requires_grad=True))
        ps.add(f"{p}.ln2_b", _zeros((d,)))
    h = config.hidden
    _init_csl(ps, "head0", rng, d, h, c)
    _init_csl(ps, "head1", rng, h, h // 2, c)
    _init_csl(ps, "head2", rng, h // 2, config.point_dim, c)
    return ps


def init_encoder(config: EncoderConfig, rng: RandomSource) -> ParamSet:
    ps = ParamSet()
    s, r = config.state_width, config.recurrent_width
    for gate in ("z", "r", "n"):
        ps.add(f"gru.wx_{gate}", _uniform_fan_in(rng, s, (s, r)))
        ps.add(f"gru.wh_{gate}", _uniform_fan_in(rng, r, (r, r)))
        ps.add(f"gru.b_{gate}", _zeros((r,)))
    w = config.neighbor_width
    ps.add("nbr.w1", _uniform_fan_in(rng, s, (s, w)))
    ps.add("nbr.b1", _zeros((w,)))
    ps.add("nbr.w2", _uniform_fan_in(rng, w, (w, w)))
    ps.add("nbr.b2", _zeros((w,)))
    ps.add("out.w", _uniform_fan_in(rng, r + w, (r + w, config.out_width)))
    ps.add("out.b", _zeros((config.out_width,)))
    return ps


# ---------------------------------------------------------------------------
# forward passes


def _csl_forward(ps: ParamSet, prefix: str, x: Tensor, ctx: Tensor) -> Tensor:
    # out = (x @ Wx) * sigmoid(ctx @ Wg + bg) + ctx @ Wb, context broadcast over P
    gate = (ctx @ ps[f"{prefix}.wg"] + ps[f"{prefix}.bg"]).sigmoid()
    shift = ctx @ ps[f"{prefix}.wb"]
    if x.ndim == 3:
        b, out_w = gate.shape
        gate = gate.reshape(b, 1, out_w)
        shift = shift.reshape(b, 1, out_w)
    return (x @ ps[f"{prefix}.wx"]) * gate + shift


def _attention(ps: ParamSet, prefix: str, x: Tensor, heads: int) -> Tensor:
    b, p, d = x.shape
    dh = d // heads
    q = x @ ps[f"{prefix}.wq"] + ps[f"{prefix}.wq_b"]
    k = x @ ps[f"{prefix}.wk"] + ps[f"{prefix}.wk_b"]
    v = x @ ps[f"{prefix}.wv"] + ps[f"{prefix}.wv_b"]

    def split(t: Tensor) -> Tensor:
        return t.reshape(b, p, heads, dh).transpose((0, 2, 1, 3))

    q, k, v = split(q), split(k), split(v)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    mixed = scores.softmax(axis=-1) @ v
    merged = mixed.transpose((0, 2, 1, 3)).reshape(b, p, d)
    return merged @ ps[f"{prefix}.wo"] + ps[f"{prefix}.wo_b"]


def denoise(params: ParamSet, config: DenoiserConfig, y_k, k, f) -> Tensor:
    """Velocity estimate for a noisy state batch.

    y_k: (B, P, point_dim); k: scalar or (B,); f: (B, context_width).
    """
    y = y_k if isinstance(y_k, Tensor) else Tensor(y_k)
    fc = f if isinstance(f, Tensor) else Tensor(f)
    if y.ndim != 3 or y.shape[1] != config.horizon or y.shape[2] != config.point_dim:
        raise ContractViolation(
            f"state batch must be (B, {config.horizon}, {config.point_dim}), got {y.shape}"
        )
    if fc.ndim != 2 or fc.shape[1] != config.context_width:
        raise ContractViolation(
            f"context must be (B, {config.context_width}), got {fc.shape}"
        )
    batch = y.shape[0]
    k_arr = np.atleast_1d(np.asarray(k, dtype=np.float64))
    if k_arr.shape[0] == 1 and batch > 1:
        k_arr = np.repeat(k_arr, batch)
    if k_arr.shape[0] != batch:
        raise ContractViolation(f"k batch {k_arr.shape[0]} does not match state batch {batch}")
    ctx = concat([Tensor(embed_time(k_arr, config.time_width)), fc], axis=-1)
    h = _csl_forward(params, "in", y, ctx)
    h = h + Tensor(positional_encoding(config.horizon, config.model_width))
    for i in range(config.layers):
        p = f"layer{i}"
        h = layer_norm(h + _attention(params, p, h, config.heads), params[f"{p}.ln1_g"], params[f"{p}.ln1_b"])
        ff = ((h @ params[f"{p}.ff1"] + params[f"{p}.ff1_b"]).gelu() @ params[f"{p}.ff2"]) + params[f"{p}.ff2_b"]
        h = layer_norm(h + ff, params[f"{p}.ln2_g"], params[f"{p}.ln2_b"])
    h = _csl_forward(params, "head0", h, ctx)
    h = _csl_forward(params, "head1", h, ctx)
    out = _csl_forward(params, "head2", h, ctx)
    if not np.all(np.isfinite(out.data)):
        raise NumericOverflowError("denoise", where="forward")
    return out


def encode_context(
    params: ParamSet,
    config: EncoderConfig,
    ego: np.ndarray | Tensor,
    neighbors: np.ndarray | Tensor,
    neighbor_mask: np.ndarray,
) -> Tensor:
    """Context features (B, out_width) from observed history.

    ego: (B, T, 6) relative per-step states; neighbors: (B, max_neighbors, 6)
    anchor-step relative states; neighbor_mask: (B, max_neighbors) in {0, 1}.
    """
    x = ego if isinstance(ego, Tensor) else Tensor(ego)
    nb = neighbors if isinstance(neighbors, Tensor) else Tensor(neighbors)
    if x.ndim != 3 or x.shape[1] != config.history_len or x.shape[2] != config.state_width:
        raise ContractViolation(
            f"ego history must be (B, {config.history_len}, {config.state_width}), got {x.shape}"
        )
    b = x.shape[0]
    if nb.shape != (b, config.max_neighbors, config.state_width):
        raise ContractViolation(
            f"neighbors must be (B, {config.max_neighbors}, {config.state_width}), got {nb.shape}"
        )
    mask = np.asarray(neighbor_mask, dtype=np.float32)
    if mask.shape != (b, config.max_neighbors):
        raise ContractViolation(f"neighbor mask must be (B, {config.max_neighbors}), got {mask.shape}")

    h = Tensor(np.zeros((b, config.recurrent_width), dtype=np.float32))
    for t in range(config.history_len):
        xt = x[:, t, :]
        z = (xt @ params["gru.wx_z"] + h @ params["gru.wh_z"] + params["gru.b_z"]).sigmoid()
        r = (xt @ params["gru.wx_r"] + h @ params["gru.wh_r"] + params["gru.b_r"]).sigmoid()
        n = tanh(xt @ params["gru.wx_n"] + (r * h) @ params["gru.wh_n"] + params["gru.b_n"])
        h = (1.0 - z) * n + z * h

    enc = (nb @ params["nbr.w1"] + params["nbr.b1"]).gelu()
    enc = (enc @ params["nbr.w2"] + params["nbr.b2"]).gelu()
    m = mask[:, :, None]
    counts = np.maximum(mask.sum(axis=1, keepdims=True), 1.0).astype(np.float32)
    pooled = (enc * Tensor(m)).sum(axis=1) * Tensor(1.0 / counts)
    out = concat([h, pooled], axis=-1) @ params["out.w"] + params["out.b"]
    if not np.all(np.isfinite(out.data)):
        raise NumericOverflowError("encode_context", where="forward")
    return out


# ---------------------------------------------------------------------------
# model wrappers (trainable things are a ParamSet plus a forward rule)


@dataclass
class Denoiser:
    config: DenoiserConfig
    params: ParamSet

    @staticmethod
    def init(config: DenoiserConfig, rng: RandomSource) -> "Denoiser":
        return Denoiser(config, init_denoiser(config, rng))

    def forward(self, y_k, k, f) -> Tensor:
        return denoise(self.params, self.config, y_k, k, f)

    def clone(self) -> "Denoiser":
        return Denoiser(self.config, self.params.copy())


@dataclass
class Encoder:
    config: EncoderConfig
    params: ParamSet

    @staticmethod
    def init(config: EncoderConfig, rng: RandomSource) -> "Encoder":
        return Encoder(config, init_encoder(config, rng))

    def forward(self, ego, neighbors, neighbor_mask) -> Tensor:
        return encode_context(self.params, self.config, ego, neighbors, neighbor_mask)

    def clone(self) -> "Encoder":
        return Encoder(self.config, self.params.copy())


# ---------------------------------------------------------------------------
# size and cost accounting


def matmul_flops(m: int, n: int, p: int) -> int:
    """An (m x n) @ (n x p) product costs 2*m*n*p floating-point operations."""
    return 2 * m * n * p


def _csl_params(d_in: int, d_out: int, d_ctx: int) -> int:
    return d_in * d_out + d_ctx * d_out + d_out + d_ctx * d_out


def count_params(config: DenoiserConfig) -> int:
    """Trainable scalar count for one denoiser; matches init_denoiser exactly."""
    d, c = config.model_width, config.ctx_width
    total = _csl_params(config.point_dim, d, c)
    attn = 4 * (d * d + d)
    ff = d * config.ff_width + config.ff_width + config.ff_width * d + d
    norms = 4 * d
    total += config.layers * (attn + ff + norms)
    h = config.hidden
    total += _csl_params(d, h, c)
    total += _csl_params(h, h // 2, c)
    total += _csl_params(h // 2, config.point_dim, c)
    return total


def count_encoder_params(config: EncoderConfig) -> int:
    s, r, w = config.state_width, config.recurrent_width, config.neighbor_width
    gru = 3 * (s * r + r * r + r)
    nbr = s * w + w + w * w + w
    proj = (r + w) * config.out_width + config.out_width
    return gru + nbr + proj


def estimate_flops(config: DenoiserConfig, steps: int) -> int:
    """Analytic multiply-add cost of `steps` denoiser evaluations (2 ops/MAC).

    Counts every linear-algebra product of one forward pass for one
    trajectory; softmax/normalization/activation element ops are excluded.
    Exactly linear in `steps`.
    """
    if steps < 1:
        raise ContractViolation(f"steps must be >= 1, got {steps}")
    p, d, c = config.horizon, config.model_width, config.ctx_width
    per_ctx = matmul_flops(1, c, d)  # gate or shift, once per window
    total = matmul_flops(p, config.point_dim, d) + 2 * per_ctx
    per_layer = (
        3 * matmul_flops(p, d, d)          # q, k, v
        + matmul_flops(p, p, d)            # scores
        + matmul_flops(p, p, d)            # attention-weighted mix
        + matmul_flops(p, d, d)            # output projection
        + 2 * matmul_flops(p, d, config.ff_width)  # feedforward in + out
    )
    total += config.layers * per_layer
    h = config.hidden
    total += matmul_flops(p, d, h) + 2 * matmul_flops(1, c, h)
    total += matmul_flops(p, h, h // 2) + 2 * matmul_flops(1, c, h // 2)
    total += matmul_flops(p, h // 2, config.point_dim) + 2 * matmul_flops(1, c, config.point_dim)
    return total * steps


def estimate_encoder_flops(config: EncoderConfig) -> int:
    """One context-encoding pass for one trajectory (2 ops/MAC)."""
    s, r, w = config.state_width, config.recurrent_width, config.neighbor_width
    gru = config.history_len * 3 * (matmul_flops(1, s, r) + matmul_flops(1, r, r))
    nbr = config.max_neighbors * (matmul_flops(1, s, w) + matmul_flops(1, w, w))
    proj = matmul_flops(1, r + w, config.out_width)
    return gru + nbr + proj
