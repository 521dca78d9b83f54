"""Noise-prediction network with hand-written reverse-mode gradients.

Architecture (DiffWave-style residual stack, no conditioning input)::

    x (B, L, C) --1x1--> h (B, L, W)
    for layer l (dilation 2**l):
        y = h + step_proj_l(temb)                    # diffusion-step embedding
        z = dilated_conv_l(y)                        # kernel 3 along L, W -> 2W
        g = tanh(z[:W]) * sigmoid(z[W:])             # gated activation
        o = 1x1_l(g)                                 # W -> 2W, channel mixing
        h = (h + o[:W]) / sqrt(2);  skip += o[W:]
    out = head(silu(1x1(skip / sqrt(n_layers))))     # W -> C, zero-initialised
    out += x                                         # if skip_input_to_output

``temb = silu(sinusoidal(t) @ W_t + b_t)``. The temporal convolutions mix
information along the time axis and the 1x1 maps mix across channels.

Parameters live in one flat vector (float32 by default). Every function
computes in the dtype of the parameter vector, so casting the parameters
to float64 gives float64 forward passes and gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ParameterError, ShapeError

KERNEL_SIZE = 3


@dataclass(frozen=True)
class DenoiserConfig:
    L: int
    C: int = 1
    residual_layers: int = 3
    channels: int = 64
    time_emb_dim: int = 128
    skip_input_to_output: bool = False

    def __post_init__(self):
        for name in ("L", "C", "residual_layers", "channels", "time_emb_dim"):
            value = getattr(self, name)
            if int(value) != value or value <= 0:
                raise ParameterError(f"{name} must be a positive integer, got {value}")
        if self.time_emb_dim % 2:
            raise ParameterError(f"time_emb_dim must be even, got {self.time_emb_dim}")

    def to_dict(self) -> dict:
        return {
            "L": self.L,
            "C": self.C,
            "residual_layers": self.residual_layers,
            "channels": self.channels,
            "time_emb_dim": self.time_emb_dim,
            "skip_input_to_output": self.skip_input_to_output,
        }


def param_layout(cfg: DenoiserConfig) -> list[tuple[str, tuple[int, ...]]]:
    W, C, D = cfg.channels, cfg.C, cfg.time_emb_dim
    layout = [
        ("temb.w", (D, W)),
        ("temb.b", (W,)),
        ("in.w", (C, W)),
        ("in.b", (W,)),
    ]
    for l in range(cfg.residual_layers):
        layout += [
            (f"res{l}.step.w", (W, W)),
            (f"res{l}.step.b", (W,)),
            (f"res{l}.conv.w", (KERNEL_SIZE * W, 2 * W)),
            (f"res{l}.conv.b", (2 * W,)),
            (f"res{l}.out.w", (W, 2 * W)),
            (f"res{l}.out.b", (2 * W,)),
        ]
    layout += [
        ("skip.w", (W, W)),
        ("skip.b", (W,)),
        ("head.w", (W, C)),
        ("head.b", (C,)),
    ]
    return layout


def param_count(cfg: DenoiserConfig) -> int:
    return sum(math.prod(shape) for _, shape in param_layout(cfg))


@dataclass
class DenoiserParams:
    """Flat parameter vector plus the offsets of each named tensor."""

    config: DenoiserConfig
    flat: np.ndarray
    init_seed: int = 0
    offsets: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.flat = np.ascontiguousarray(self.flat)
        if self.flat.ndim != 1 or self.flat.size != param_count(self.config):
            raise ShapeError(
                f"expected {param_count(self.config)} parameters, got shape {self.flat.shape}"
            )
        offsets, pos = {}, 0
        for name, shape in param_layout(self.config):
            size = math.prod(shape)
            offsets[name] = (pos, shape)
            pos += size
        self.offsets = offsets

    def tensors(self, flat=None) -> dict[str, np.ndarray]:
        """Named reshaped views into ``flat`` (defaults to the own vector)."""
        flat = self.flat if flat is None else flat
        return {
            name: flat[pos : pos + math.prod(shape)].reshape(shape)
            for name, (pos, shape) in self.offsets.items()
        }

    def astype(self, dtype) -> "DenoiserParams":
        return DenoiserParams(self.config, self.flat.astype(dtype), self.init_seed)

    def replace(self, flat) -> "DenoiserParams":
        return DenoiserParams(self.config, flat, self.init_seed)


def embed_timestep(t, dim: int) -> np.ndarray:
    """Sinusoidal step embedding; (sin, cos) interleaved at frequencies 10000^(-2k/dim).

    Scalar ``t`` gives shape (dim,), an array of steps gives (len(t), dim).
    """
    if dim % 2 or dim <= 0:
        raise ParameterError(f"embedding dim must be positive and even, got {dim}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0):
        raise ParameterError("diffusion step must be >= 0")
    freqs = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    angles = t_arr[..., None] * freqs
    emb = np.empty(angles.shape[:-1] + (dim,))
    emb[..., 0::2] = np.sin(angles)
    emb[..., 1::2] = np.cos(angles)
    return emb


def init_params(cfg: DenoiserConfig, seed: int = 0, dtype=np.float32) -> DenoiserParams:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases and the head are zero."""
    rng = np.random.default_rng(seed)
    flat = np.zeros(param_count(cfg), dtype=np.float64)
    params = DenoiserParams(cfg, flat, seed)
    views = params.tensors()
    for name, arr in views.items():
        if name.endswith(".b") or name.startswith("head."):
            continue
        bound = 1.0 / math.sqrt(arr.shape[0])
        arr[...] = rng.uniform(-bound, bound, size=arr.shape)
    return params.astype(dtype)


def _silu(a):
    return a / (1.0 + np.exp(-a))


def _silu_grad(a):
    s = 1.0 / (1.0 + np.exp(-a))
    return s * (1.0 + a * (1.0 - s))


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _mm(a, w):
    """``a @ w`` over the last axis as a single 2-D GEMM."""
    return (a.reshape(-1, a.shape[-1]) @ w).reshape(a.shape[:-1] + (w.shape[-1],))


def _im2col(y, dilation):
    """Stack the three dilated taps of ``y`` (B, L, W) into (B, L, 3W), zero padded."""
    B, L, W = y.shape
    cols = np.zeros((B, L, KERNEL_SIZE * W), dtype=y.dtype)
    # tap k reads y[i + (k - 1) * dilation]
    for k in range(KERNEL_SIZE):
        shift = (k - 1) * dilation
        lo, hi = max(0, -shift), min(L, L - shift)
        if lo < hi:
            cols[:, lo:hi, k * W : (k + 1) * W] = y[:, lo + shift : hi + shift]
    return cols


def _col2im(dcols, dilation, W):
    B, L, _ = dcols.shape
    dy = np.zeros((B, L, W), dtype=dcols.dtype)
    for k in range(KERNEL_SIZE):
        shift = (k - 1) * dilation
        lo, hi = max(0, -shift), min(L, L - shift)
        if lo < hi:
            dy[:, lo + shift : hi + shift] += dcols[:, lo:hi, k * W : (k + 1) * W]
    return dy


def _prepare(params: DenoiserParams, x, t):
    cfg = params.config
    x = np.asarray(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (cfg.L, cfg.C):
        raise ShapeError(f"expected input (B, {cfg.L}, {cfg.C}), got {np.shape(x)}")
    if not np.all(np.isfinite(x)):
        raise NumericError("denoiser input contains non-finite values")
    t = np.broadcast_to(np.asarray(t), (x.shape[0],))
    if np.any(t < 0):
        raise ParameterError("diffusion step must be >= 0")
    return x.astype(params.flat.dtype, copy=False), t, squeeze


def _forward(params: DenoiserParams, x, t):
    """Batched forward pass; returns (output, tape) with ``x`` already validated."""
    cfg = params.config
    p = params.tensors()
    dtype = params.flat.dtype
    W = cfg.channels
    emb = embed_timestep(t, cfg.time_emb_dim).astype(dtype)
    a_t = emb @ p["temb.w"] + p["temb.b"]
    temb = _silu(a_t)
    h = _mm(x, p["in.w"]) + p["in.b"]
    skip = np.zeros_like(h)
    layers = []
    for l in range(cfg.residual_layers):
        dilation = 2**l
        y = h + (temb @ p[f"res{l}.step.w"] + p[f"res{l}.step.b"])[:, None, :]
        cols = _im2col(y, dilation)
        z = _mm(cols, p[f"res{l}.conv.w"]) + p[f"res{l}.conv.b"]
        tz = np.tanh(z[..., :W])
        sz = _sigmoid(z[..., W:])
        g = tz * sz
        o = _mm(g, p[f"res{l}.out.w"]) + p[f"res{l}.out.b"]
        h = (h + o[..., :W]) * (1.0 / math.sqrt(2.0))
        skip += o[..., W:]
        layers.append((cols, tz, sz, g))
    s = skip * (1.0 / math.sqrt(cfg.residual_layers))
    a_s = _mm(s, p["skip.w"]) + p["skip.b"]
    u = _silu(a_s)
    out = _mm(u, p["head.w"]) + p["head.b"]
    if cfg.skip_input_to_output:
        out = out + x
    tape = (x, emb, a_t, temb, layers, s, a_s, u)
    return out, tape


def _backward(params: DenoiserParams, tape, v, want_params=True):
    """Pull the cotangent ``v`` (B, L, C) back to the input and (optionally) parameters."""
    cfg = params.config
    p = params.tensors()
    W = cfg.channels
    x, emb, a_t, temb, layers, s, a_s, u = tape
    v = v.astype(params.flat.dtype, copy=False)
    grad_flat = np.zeros_like(params.flat) if want_params else None
    g_ = params.tensors(grad_flat) if want_params else None

    def flat2(a):
        return a.reshape(-1, a.shape[-1])

    if want_params:
        g_["head.w"][...] = flat2(u).T @ flat2(v)
        g_["head.b"][...] = v.sum(axis=(0, 1))
    da_s = _mm(v, p["head.w"].T) * _silu_grad(a_s)
    if want_params:
        g_["skip.w"][...] = flat2(s).T @ flat2(da_s)
        g_["skip.b"][...] = da_s.sum(axis=(0, 1))
    dskip = _mm(da_s, p["skip.w"].T) * (1.0 / math.sqrt(cfg.residual_layers))

    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    dh = np.zeros(x.shape[:2] + (W,), dtype=v.dtype)
    dtemb = np.zeros_like(temb)
    for l in reversed(range(cfg.residual_layers)):
        cols, tz, sz, g = layers[l]
        dh = dh * inv_sqrt2
        do = np.concatenate([dh, dskip], axis=-1)
        if want_params:
            g_[f"res{l}.out.w"][...] = flat2(g).T @ flat2(do)
            g_[f"res{l}.out.b"][...] = do.sum(axis=(0, 1))
        dg = _mm(do, p[f"res{l}.out.w"].T)
        dz = np.concatenate([dg * sz * (1.0 - tz * tz), dg * tz * sz * (1.0 - sz)], axis=-1)
        if want_params:
            g_[f"res{l}.conv.w"][...] = flat2(cols).T @ flat2(dz)
            g_[f"res{l}.conv.b"][...] = dz.sum(axis=(0, 1))
        dy = _col2im(_mm(dz, p[f"res{l}.conv.w"].T), 2**l, W)
        ddp = dy.sum(axis=1)
        if want_params:
            g_[f"res{l}.step.w"][...] = temb.T @ ddp
            g_[f"res{l}.step.b"][...] = ddp.sum(axis=0)
        dtemb += ddp @ p[f"res{l}.step.w"].T
        dh = dh + dy

    if want_params:
        g_["in.w"][...] = flat2(x).T @ flat2(dh)
        g_["in.b"][...] = dh.sum(axis=(0, 1))
        da_t = dtemb * _silu_grad(a_t)
        g_["temb.w"][...] = emb.T @ da_t
        g_["temb.b"][...] = da_t.sum(axis=0)
    dx = _mm(dh, p["in.w"].T)
    if cfg.skip_input_to_output:
        dx = dx + v
    return dx, grad_flat


def forward(params: DenoiserParams, x_t, t) -> np.ndarray:
    """eps_theta(x_t, t), same shape as ``x_t`` ((L, C) or batched (B, L, C))."""
    x, t, squeeze = _prepare(params, x_t, t)
    out, _ = _forward(params, x, t)
    return out[0] if squeeze else out


def vjp(params: DenoiserParams, x_t, t):
    """Return ``(eps_theta(x_t, t), pullback)``.

    ``pullback(v, want_params=False)`` returns ``(J_x^T v, J_theta^T v or None)``;
    the parameter gradient is summed over the batch.
    """
    x, t, squeeze = _prepare(params, x_t, t)
    out, tape = _forward(params, x, t)

    def pullback(v, want_params=False):
        v = np.asarray(v)
        if v.shape != np.shape(x_t):
            raise ShapeError(f"cotangent shape {v.shape} != input shape {np.shape(x_t)}")
        dx, dtheta = _backward(params, tape, v[None] if squeeze else v, want_params)
        return (dx[0] if squeeze else dx), dtheta

    return (out[0] if squeeze else out), pullback


def vjp_wrt_input(params: DenoiserParams, x_t, t, cotangent) -> np.ndarray:
    _, pullback = vjp(params, x_t, t)
    return pullback(cotangent)[0]


def vjp_wrt_params(params: DenoiserParams, x_t, t, cotangent) -> np.ndarray:
    _, pullback = vjp(params, x_t, t)
    return pullback(cotangent, want_params=True)[1]
