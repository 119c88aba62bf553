"""Hierarchical latent modules.

Each level holds a context-conditioned prior whose channels are autoregressive:
channel ``t`` of the mean/log-variance receives a strictly-lower-triangular
linear map of the same level's sample at channels ``< t``. The posterior is the
prior plus a deviation produced from target features; prior and deviation heads
share one trunk ("twin" matching networks with separate heads).

Shapes: context summaries are ``L x c_s``; per-target tensors are ``T x L x ...``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import ParamBuilder, Scope, linear, norm
from .tensor import Tensor

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GaussianParams:
    mean: Tensor
    logvar: Tensor

    @property
    def shape(self):
        return self.mean.shape


@dataclass
class LatentLevel:
    level: int
    dim: int
    prior: GaussianParams
    deviation: GaussianParams | None
    posterior: GaussianParams | None
    sample: Tensor


@dataclass
class LatentState:
    levels: list[LatentLevel] = field(default_factory=list)

    @property
    def samples(self) -> list[Tensor]:
        return [lv.sample for lv in self.levels]


def causal_mask(dim: int, dtype=np.float64) -> np.ndarray:
    """``mask[s, t] = 1`` iff ``s < t``: channel t sees only earlier channels."""
    return np.triu(np.ones((dim, dim), dtype=dtype), k=1)


def _split(h: Tensor, dim: int) -> tuple[Tensor, Tensor]:
    return h[..., :dim], h[..., dim:]


class LevelModule:
    """Bound view of one latent level's parameters."""

    def __init__(self, P: Scope, dim: int, prev_dim: int | None):
        self.P = P
        self.dim = dim
        self.prev_dim = prev_dim

    def trunk(self, x: Tensor) -> Tensor:
        return T.gelu(linear(norm(x, self.P, "trunk_ln"), self.P, "trunk"))

    def conditioning(self, ctx_summary: Tensor, prev_sample: Tensor | None, n: int) -> Tensor:
        """Trunk input: context summary broadcast to ``n`` targets plus the projected previous-level sample."""
        L, c = ctx_summary.shape
        x = T.broadcast_to(ctx_summary, (n, L, c))
        if prev_sample is not None:
            x = x + linear(prev_sample, self.P, "prev")
        return x

    def prior_base(self, cond: Tensor) -> tuple[Tensor, Tensor]:
        return _split(linear(self.trunk(cond), self.P, "prior_head"), self.dim)

    def ar_terms(self, z: Tensor) -> tuple[Tensor, Tensor]:
        mask = causal_mask(self.dim, z.dtype)
        w = self.P["ar/w"] * np.concatenate([mask, mask], axis=1)
        return _split(z @ w, self.dim)

    def deviation_raw(self, cond: Tensor, target_feat: Tensor) -> tuple[Tensor, Tensor]:
        return _split(linear(self.trunk(cond + linear(target_feat, self.P, "target")), self.P, "dev_head"),
                      self.dim)


def prior_at(base: tuple[Tensor, Tensor], ar: tuple[Tensor, Tensor]) -> GaussianParams:
    return GaussianParams(base[0] + ar[0], T.clip(base[1] + ar[1], LOGVAR_MIN, LOGVAR_MAX))


def relative_posterior(prior: GaussianParams, dev_raw: tuple[Tensor, Tensor]) -> tuple[GaussianParams, GaussianParams]:
    """Posterior = prior + deviation; the deviation log-variance is trimmed so the
    posterior log-variance stays within the clamp range."""
    dmean = dev_raw[0]
    post_lv = T.clip(prior.logvar + dev_raw[1], LOGVAR_MIN, LOGVAR_MAX)
    dlv = post_lv - prior.logvar
    deviation = GaussianParams(dmean, dlv)
    return deviation, GaussianParams(prior.mean + deviation.mean, prior.logvar + deviation.logvar)


def prior_from_context(ctx_summary: Tensor, prev_sample: Tensor | None, P: Scope, dim: int,
                       z_path: Tensor | None = None, n: int | None = None) -> GaussianParams:
    """Prior parameters evaluated along ``z_path`` (the level's own sample; channel t
    only reads channels < t of it). Without ``z_path`` the autoregressive term is zero,
    which is exact for channel 0."""
    if n is None:
        n = prev_sample.shape[0] if prev_sample is not None else (z_path.shape[0] if z_path is not None else 1)
    mod = LevelModule(P, dim, prev_sample.shape[-1] if prev_sample is not None else None)
    base = mod.prior_base(mod.conditioning(ctx_summary, prev_sample, n))
    if z_path is None:
        zero = Tensor(np.zeros(base[0].shape, dtype=base[0].dtype))
        return prior_at(base, (zero, zero))
    return prior_at(base, mod.ar_terms(z_path))


def posterior_from_target(prior: GaussianParams, cond: Tensor, target_feat: Tensor, P: Scope,
                          dim: int) -> tuple[GaussianParams, GaussianParams]:
    mod = LevelModule(P, dim, None)
    return relative_posterior(prior, mod.deviation_raw(cond, target_feat))


def sample_reparam(params: GaussianParams, noise) -> Tensor:
    """``mean + exp(logvar / 2) * noise``."""
    noise = T.as_tensor(noise, like=params.mean)
    if noise.shape != params.mean.shape:
        raise ValueError(f"noise shape {noise.shape} does not match {params.mean.shape}")
    return params.mean + T.exp(params.logvar * 0.5) * noise


def ancestral_sample(base: tuple[Tensor, Tensor], mod: LevelModule, noise: np.ndarray,
                     dev_raw: tuple[Tensor, Tensor] | None = None):
    """Sample channel-autoregressively.

    Channel t's parameters depend only on channels < t, so ``dim`` sweeps of
    ``z <- mean(z) + std(z) * eps`` reach the exact sample; the triangular
    Jacobian is nilpotent, so adjoints through the sweeps are exact too.
    Returns ``(z, prior, deviation, posterior)`` evaluated at the final path.
    """
    z = None
    prior = deviation = posterior = None
    zero = Tensor(np.zeros(base[0].shape, dtype=base[0].dtype))
    for _ in range(mod.dim):
        ar = mod.ar_terms(z) if z is not None else (zero, zero)
        prior = prior_at(base, ar)
        target = prior
        if dev_raw is not None:
            deviation, posterior = relative_posterior(prior, dev_raw)
            target = posterior
        z = sample_reparam(target, noise)
    # Parameters along the final path.
    prior = prior_at(base, mod.ar_terms(z))
    if dev_raw is not None:
        deviation, posterior = relative_posterior(prior, dev_raw)
    return z, prior, deviation, posterior


def gaussian_kl(q: GaussianParams, p: GaussianParams) -> Tensor:
    """Elementwise KL(N(q) || N(p)) for diagonal Gaussians."""
    var_ratio = T.exp(q.logvar - p.logvar)
    diff = q.mean - p.mean
    return 0.5 * (var_ratio + diff * diff * T.exp(-p.logvar) - 1.0 - (q.logvar - p.logvar))


def kl_term(posterior: GaussianParams, prior: GaussianParams) -> Tensor:
    """Summed closed-form KL; both parameter sets evaluated along the posterior sample path."""
    if posterior.shape != prior.shape:
        raise ValueError(f"shape mismatch: {posterior.shape} vs {prior.shape}")
    return T.sum_(gaussian_kl(posterior, prior))


def kl_per_row(posterior: GaussianParams, prior: GaussianParams) -> Tensor:
    return T.sum_(gaussian_kl(posterior, prior), axis=tuple(range(1, posterior.mean.ndim)))


def gaussian_log_density(x, params: GaussianParams) -> np.ndarray:
    """Elementwise log N(x; mean, exp(logvar)) as a plain array."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    m, lv = params.mean.data, params.logvar.data
    return -0.5 * (_LOG_2PI + lv + (x - m) ** 2 * np.exp(-lv))


def init_level(b: ParamBuilder, prefix: str, cfg, dim: int, prev_dim: int | None) -> None:
    p = prefix + "/"
    hidden = cfg.latent_hidden or cfg.c_s
    b.norm(p + "trunk_ln", cfg.c_s)
    b.linear(p + "trunk", cfg.c_s, hidden)
    if prev_dim is not None:
        b.linear(p + "prev", prev_dim, cfg.c_s, bias=False)
    b.linear(p + "target", cfg.c_s, cfg.c_s, bias=False)
    b.linear(p + "prior_head", hidden, 2 * dim, final=True)
    b.linear(p + "dev_head", hidden, 2 * dim, final=True)
    b.table(p + "ar/w", (dim, 2 * dim), final=True, scale=1.0 / math.sqrt(max(dim, 1)))
