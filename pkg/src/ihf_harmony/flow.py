"""Invertible hierarchy flow: squeeze, subtractive/additive coupling, AAN.

The harmonization map is ``x_hat = reverse(aan(forward(x), z_s))``:

* ``model_forward`` applies, per level, a squeeze followed by the
  subtractive coupling ``h_1 = x - a_1``, ``h_i = h_{i-1} - a_i`` where the
  ``a_i`` are channel chunks of ``affine_net(x)``; the latent is
  ``Concat[h_1..h_n]``.
* ``aan`` whitens each latent channel and re-colours it with affine
  parameters predicted from the source latent and the target embedding.
* ``model_reverse`` undoes each level with the additive recurrence
  ``h_n = a_n + b_n``, ``h_i = alpha (a_i + b_i) + (1 - alpha) h_{i+1}``
  using the cached ``a_i``, then unsqueezes.

With ``alpha = 1`` and AAN bypassed the reverse is the exact inverse.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    channel_stats,
    clamp,
    concat,
    conv2d,
    global_avg_pool,
    leaky_relu,
    linear,
    reshape,
    sigmoid,
    split,
    transpose,
)

ALPHA_MODES = ("learnable", "forced_one")


@dataclass
class FlowConfig:
    levels: int = 2
    splits: int = 3
    squeeze: int = 2
    affine_hidden: int = 32
    aan_hidden: int = 64
    eps: float = 1e-5
    alpha_mode: str = "learnable"
    alpha_init: float = 3.0
    in_channels: int = 3
    embedding_size: int = 480

    def validate(self) -> "FlowConfig":
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.splits < 2:
            raise ValueError("splits must be >= 2 (n=1 degenerates the hierarchy)")
        if self.squeeze < 1:
            raise ValueError("squeeze factor must be >= 1")
        if self.alpha_mode not in ALPHA_MODES:
            raise ValueError(f"alpha_mode must be one of {ALPHA_MODES}, got {self.alpha_mode!r}")
        if self.affine_hidden < 1 or self.aan_hidden < 1:
            raise ValueError("hidden widths must be positive")
        return self

    def level_channels(self) -> list[tuple[int, int]]:
        """(channels after squeeze, latent channels) for every level."""
        out, c = [], self.in_channels
        for _ in range(self.levels):
            c_sq = c * self.squeeze ** 2
            out.append((c_sq, c_sq * self.splits))
            c = c_sq * self.splits
        return out

    @property
    def latent_channels(self) -> int:
        return self.level_channels()[-1][1]

    @property
    def divisor(self) -> int:
        return self.squeeze ** self.levels

    def to_dict(self) -> dict:
        return asdict(self)


class FlowParams:
    """Named trainable tensors of the flow (affine-nets, fusion logits, AAN)."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def astype(self, dtype) -> "FlowParams":
        return FlowParams({k: Tensor(v.data.astype(dtype), requires_grad=True, name=k)
                           for k, v in self.tensors.items()})

    def copy(self) -> "FlowParams":
        return self.astype(next(iter(self.tensors.values())).dtype)

    def count(self) -> int:
        return int(sum(v.data.size for v in self.tensors.values()))


def init_params(config: FlowConfig, seed: int = 0, dtype=np.float32) -> FlowParams:
    """Identity-at-initialization parameters.

    The last affine-net conv and both AGA heads start at zero, so the
    initial model maps every image to itself (up to the AAN epsilon).
    """
    config.validate()
    rng = np.random.default_rng(seed)
    t: dict[str, np.ndarray] = {}
    hid = config.affine_hidden
    for lvl, (c_sq, c_lat) in enumerate(config.level_channels()):
        fan_in = c_sq * 9
        t[f"level{lvl}.affine.w1"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (hid, c_sq, 3, 3))
        t[f"level{lvl}.affine.b1"] = np.zeros(hid)
        t[f"level{lvl}.affine.w2"] = np.zeros((c_lat, hid, 3, 3))
        t[f"level{lvl}.affine.b2"] = np.zeros(c_lat)
        t[f"level{lvl}.rho"] = np.full(1, config.alpha_init)
    c_top = config.latent_channels
    ah = config.aan_hidden
    t["aan.content.w"] = rng.normal(0.0, 1.0 / np.sqrt(c_top), (ah, c_top))
    t["aan.content.b"] = np.zeros(ah)
    t["aan.proj.w"] = rng.normal(0.0, 1.0 / np.sqrt(config.embedding_size), (ah, config.embedding_size))
    t["aan.proj.b"] = np.zeros(ah)
    t["aan.sigma.w"] = np.zeros((c_top, 2 * ah))
    t["aan.sigma.b"] = np.zeros(c_top)
    t["aan.mu.w"] = np.zeros((c_top, 2 * ah))
    t["aan.mu.b"] = np.zeros(c_top)
    return FlowParams({k: Tensor(v.astype(dtype), requires_grad=True, name=k) for k, v in t.items()})


# ---------------------------------------------------------------------------
# squeeze
# ---------------------------------------------------------------------------


def squeeze(x, r: int) -> Tensor:
    """(C, H, W) -> (C*r*r, H/r, W/r); channel (c, dy, dx) holds x[c, r*i+dy, r*j+dx]."""
    x = as_tensor(x)
    batched = x.ndim == 4
    if not batched:
        x = reshape(x, (1,) + x.shape)
    n, c, h, w = x.shape
    if h % r or w % r:
        raise ShapeError(f"squeeze: spatial size {h}x{w} not divisible by {r}")
    y = reshape(x, (n, c, h // r, r, w // r, r))
    y = transpose(y, (0, 1, 3, 5, 2, 4))
    y = reshape(y, (n, c * r * r, h // r, w // r))
    return y if batched else reshape(y, y.shape[1:])


def unsqueeze(x, r: int) -> Tensor:
    """Exact inverse of :func:`squeeze`."""
    x = as_tensor(x)
    batched = x.ndim == 4
    if not batched:
        x = reshape(x, (1,) + x.shape)
    n, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"unsqueeze: {c} channels not divisible by r^2={r * r}")
    co = c // (r * r)
    y = reshape(x, (n, co, r, r, h, w))
    y = transpose(y, (0, 1, 4, 2, 5, 3))
    y = reshape(y, (n, co, h * r, w * r))
    return y if batched else reshape(y, y.shape[1:])


# ---------------------------------------------------------------------------
# invertible hierarchy flow
# ---------------------------------------------------------------------------


@dataclass
class FlowCache:
    """Per-level affine components from one forward pass."""

    affines: list
    shapes: list

    def __len__(self):
        return len(self.affines)


def affine_net(x: Tensor, params: FlowParams, level: int) -> Tensor:
    p = f"level{level}.affine."
    h = leaky_relu(conv2d(x, params[p + "w1"], params[p + "b1"], padding=1), 0.2)
    return conv2d(h, params[p + "w2"], params[p + "b2"], padding=1)


def coupling_forward(x: Tensor, affines: list) -> Tensor:
    """Subtractive recurrence: h_1 = x - a_1, h_i = h_{i-1} - a_i; z = Concat[h]."""
    hs, h = [], x
    for a in affines:
        h = h - a
        hs.append(h)
    return concat(hs, axis=-3)


def coupling_reverse(b: Tensor, affines: list, alpha) -> Tensor:
    """Additive recurrence from the last split back to h_1."""
    n = len(affines)
    if b.shape[-3] % n:
        raise ShapeError(f"reverse coupling: {b.shape[-3]} channels not divisible by {n} splits")
    bs = split(b, n, axis=b.ndim - 3)
    if bs[0].shape != affines[0].shape:
        raise ShapeError(f"reverse coupling: split shape {bs[0].shape} does not match cache {affines[0].shape}")
    h = affines[-1] + bs[-1]
    for i in range(n - 2, -1, -1):
        cand = affines[i] + bs[i]
        if isinstance(alpha, (int, float)) and alpha == 1.0:
            h = cand
        else:
            h = alpha * cand + (1.0 - alpha) * h
    return h


def ihf_forward(x, params: FlowParams, level: int, splits: int) -> tuple[Tensor, list]:
    x = as_tensor(x)
    a = affine_net(x if x.ndim == 4 else reshape(x, (1,) + x.shape), params, level)
    if x.ndim == 3:
        a = reshape(a, a.shape[1:])
    if a.shape[-3] != splits * x.shape[-3]:
        raise ShapeError(f"affine-net emitted {a.shape[-3]} channels, expected {splits * x.shape[-3]}")
    affines = split(a, splits, axis=a.ndim - 3)
    return coupling_forward(x, affines), affines


def ihf_reverse(b, affines: list, alpha) -> Tensor:
    return coupling_reverse(as_tensor(b), affines, alpha)


def level_alpha(params: FlowParams, config: FlowConfig, level: int, override=None):
    if override is not None:
        return float(override)
    if config.alpha_mode == "forced_one":
        return 1.0
    return sigmoid(params[f"level{level}.rho"])


def model_forward(x, params: FlowParams, config: FlowConfig) -> tuple[Tensor, FlowCache]:
    x = as_tensor(x)
    h, w = x.shape[-2:]
    if h % config.divisor or w % config.divisor:
        raise ShapeError(f"input {h}x{w} must be divisible by r^L = {config.divisor}")
    cache = FlowCache([], [])
    for lvl in range(config.levels):
        cache.shapes.append(x.shape)
        x = squeeze(x, config.squeeze)
        x, affines = ihf_forward(x, params, lvl, config.splits)
        cache.affines.append(affines)
    return x, cache


def model_reverse(z, cache: FlowCache, params: FlowParams, config: FlowConfig,
                  alpha_override=None) -> Tensor:
    x = as_tensor(z)
    if len(cache) != config.levels:
        raise ShapeError(f"cache has {len(cache)} levels, config expects {config.levels}")
    for lvl in range(config.levels - 1, -1, -1):
        alpha = level_alpha(params, config, lvl, alpha_override)
        x = ihf_reverse(x, cache.affines[lvl], alpha)
        x = unsqueeze(x, config.squeeze)
        if x.shape != cache.shapes[lvl]:
            raise ShapeError(f"level {lvl} restored shape {x.shape} != cached {cache.shapes[lvl]}")
    return x


# ---------------------------------------------------------------------------
# artefact-aware normalization
# ---------------------------------------------------------------------------


def aan_apply(z: Tensor, mu: Tensor, sigma: Tensor, aga_sigma: Tensor, aga_mu: Tensor,
              eps: float) -> Tensor:
    """(z - mu) / (sigma + eps) * aga_sigma + aga_mu with (N, C) stats over (N, C, H, W)."""
    shape = mu.shape + (1, 1)
    mu4, sig4 = reshape(mu, shape), reshape(sigma, shape)
    return (z - mu4) / (sig4 + eps) * reshape(aga_sigma, shape) + reshape(aga_mu, shape)


def aga_params(z: Tensor, z_s, params: FlowParams) -> tuple[Tensor, Tensor]:
    """Residual heads (g_sigma, g_mu) from source content and target embedding."""
    n = z.shape[0]
    z_s = np.asarray(z_s.data if isinstance(z_s, Tensor) else z_s, dtype=z.dtype)
    if z_s.ndim == 1:
        z_s = np.broadcast_to(z_s, (n, z_s.shape[0]))
    if z_s.shape[0] != n:
        raise ShapeError(f"embedding batch {z_s.shape[0]} != latent batch {n}")
    content = leaky_relu(linear(global_avg_pool(z), params["aan.content.w"], params["aan.content.b"]), 0.2)
    proj = leaky_relu(linear(Tensor(z_s), params["aan.proj.w"], params["aan.proj.b"]), 0.2)
    joint = concat([content, proj], axis=1)
    g_sigma = linear(joint, params["aan.sigma.w"], params["aan.sigma.b"])
    g_mu = linear(joint, params["aan.mu.w"], params["aan.mu.b"])
    return g_sigma, g_mu


def aan(z, z_s, params: FlowParams, config: FlowConfig, bypass: bool = False) -> Tensor:
    """Artefact-aware normalization of latent ``z`` toward embedding ``z_s``."""
    z = as_tensor(z)
    if bypass:
        return z
    batched = z.ndim == 4
    if not batched:
        z = reshape(z, (1,) + z.shape)
    mu, sigma = channel_stats(z)
    g_sigma, g_mu = aga_params(z, z_s, params)
    out = aan_apply(z, mu, sigma, sigma * (1.0 + g_sigma), mu + g_mu, config.eps)
    return out if batched else reshape(out, out.shape[1:])


def harmonize(x, z_s, params: FlowParams, config: FlowConfig, bypass_aan: bool = False,
              alpha_override=None) -> Tensor:
    """Map ``x`` (in [-1, 1]) to the site described by ``z_s``; output clamped to [-1, 1]."""
    z, cache = model_forward(x, params, config)
    z_hat = aan(z, z_s, params, config, bypass=bypass_aan)
    x_hat = model_reverse(z_hat, cache, params, config, alpha_override=alpha_override)
    return clamp(x_hat, -1.0, 1.0)
