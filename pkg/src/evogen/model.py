"""The U-shaped conditional generator over MSAs.

Embedding -> encoder Hyperformer stack (with query conditioning) -> latent
levels -> decoder Hyperformer stack -> readout (22-way residue, 6-way deletion bin).

Latent levels are listed in encoding order with strictly increasing dims. The
encoder exposes target-row features for level ``j`` after an even split of its
blocks; the decoder consumes levels in reverse order (coarsest first), injecting
each level's sample into the target rows at evenly spaced decoder depths. Each
prior reads the mean context-row activation at its injection depth.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .featurize import N_DEL_BINS, OutputLogits, TokenGrid
from .hyperformer import hyperformer_block, init_block, relpos_bucket_matrix
from .latent import (
    GaussianParams, LatentLevel, LatentState, LevelModule, ancestral_sample, gaussian_log_density,
    init_level, kl_per_row, prior_at, relative_posterior,
)
from .msa_io import VOCAB_SIZE
from .nn import ParamBuilder, Scope, linear, norm
from .tensor import Tensor
from .tensor.checkpoint import config_digest, load_checkpoint, save_checkpoint
from .tensor.random import SeedStream


@dataclass(frozen=True)
class ModelConfig:
    n_enc_blocks: int = 12
    n_dec_blocks: int = 12
    c_s: int = 256
    c_p: int = 128
    heads: int = 8
    latent_dims: tuple[int, ...] = (64, 128, 256)
    vocab: int = VOCAB_SIZE
    del_bins: int = N_DEL_BINS
    num_buckets: int = 32
    max_distance: int = 128
    rope_base: float = 10000.0
    opm_dim: int = 32
    transition_factor: int = 2
    latent_hidden: int | None = None
    use_rope: bool = True
    skip_connections: bool = True

    def __post_init__(self):
        object.__setattr__(self, "latent_dims", tuple(int(d) for d in self.latent_dims))
        for f in ("n_enc_blocks", "n_dec_blocks", "c_s", "c_p", "heads", "num_buckets",
                  "max_distance", "opm_dim", "transition_factor"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")
        if not self.latent_dims or any(d < 1 for d in self.latent_dims):
            raise ValueError("latent_dims must be a non-empty list of positive ints")
        if any(b <= a for a, b in zip(self.latent_dims, self.latent_dims[1:])):
            raise ValueError("latent_dims must increase strictly in encoding order")
        if self.vocab != VOCAB_SIZE or self.del_bins != N_DEL_BINS:
            raise ValueError(f"vocab must be {VOCAB_SIZE} and del_bins {N_DEL_BINS}")
        if self.c_s % self.heads:
            raise ValueError("c_s must be divisible by heads")
        if self.use_rope and (self.c_s // self.heads) % 2:
            raise ValueError("rotary embedding needs an even per-head dim")
        if self.num_buckets % 2 or self.num_buckets < 4 or self.max_distance < self.num_buckets:
            raise ValueError("need even num_buckets >= 4 and max_distance >= num_buckets")

    @classmethod
    def full(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        base = dict(n_enc_blocks=2, n_dec_blocks=2, c_s=8, c_p=4, heads=2, latent_dims=(2,),
                    num_buckets=8, max_distance=16, opm_dim=2)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        base = dict(n_enc_blocks=2, n_dec_blocks=2, c_s=32, c_p=16, heads=4, latent_dims=(8, 16),
                    num_buckets=16, max_distance=64, opm_dim=4)
        base.update(overrides)
        return cls(**base)

    @property
    def n_levels(self) -> int:
        return len(self.latent_dims)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["latent_dims"] = list(self.latent_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return config_digest(self.to_dict())

    def encoder_taps(self) -> list[int]:
        """Number of encoder blocks completed when level j's target features are read."""
        K = self.n_levels
        return [math.ceil((j + 1) * self.n_enc_blocks / K) for j in range(K)]

    def decoder_slots(self) -> list[tuple[int, int]]:
        """(decoder block index, level) pairs in injection order, coarsest level first."""
        K = self.n_levels
        return [((s * self.n_dec_blocks) // K, K - 1 - s) for s in range(K)]


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float64, zero_init: bool = True) -> dict[str, np.ndarray]:
    """Fresh parameters. With ``zero_init`` the residual output projections, skip
    projections, latent heads and readout heads start at zero (identity blocks,
    standard-normal priors, uniform readout)."""
    b = ParamBuilder(SeedStream(f"init/{seed}"), dtype, zero_init)
    cs = cfg.c_s
    b.table("embed/tok", (cfg.vocab, cs), scale=1.0)
    b.table("embed/del", (cs,), scale=1.0)
    b.table("embed/bias", (cs,), scale=0.0)
    b.table("embed/target_marker", (cs,), scale=1.0)
    b.table("embed/relpos", (cfg.num_buckets, cfg.c_p), scale=1.0)
    for i in range(cfg.n_enc_blocks):
        init_block(b, f"enc/{i}", cfg, "encoder")
    for i in range(cfg.n_dec_blocks):
        init_block(b, f"dec/{i}", cfg, "decoder")
    if cfg.skip_connections:
        for k in range(1, min(cfg.n_enc_blocks, cfg.n_dec_blocks) + 1):
            b.linear(f"skip/{k}", cs, cs, bias=False, final=True)
    K = cfg.n_levels
    for j, dim in enumerate(cfg.latent_dims):
        prev = cfg.latent_dims[j + 1] if j + 1 < K else None
        init_level(b, f"latent/{j}", cfg, dim, prev)
        b.linear(f"inject/{j}", dim, cs, bias=False)
    b.norm("readout/ln", cs)
    b.linear("readout/hidden", cs, cs)
    b.linear("readout/aa", cs, cfg.vocab, final=True)
    b.linear("readout/del", cs, cfg.del_bins, final=True)
    return b.params


def as_leaves(params: dict[str, np.ndarray], requires_grad: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


# -- forward pieces ------------------------------------------------------------
def embed_rows(grid: TokenGrid, P: Scope) -> Tensor:
    dtype = P["embed/tok"].dtype
    onehot = T.one_hot(grid.tokens, VOCAB_SIZE, dtype=dtype)
    dv = grid.del_value.astype(dtype)[..., None]
    return onehot @ P["embed/tok"] + T.as_tensor(dv) * P["embed/del"] + P["embed/bias"]


def embed(grid: TokenGrid, P: Scope, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Sequence activations (N x L x c_s) and relative-position pair init (L x L x c_p)."""
    L = grid.length
    pair = T.gather(P["embed/relpos"], relpos_bucket_matrix(L, cfg.num_buckets, cfg.max_distance), axis=0)
    return embed_rows(grid, P), pair


def _scope(params) -> Scope:
    return params if isinstance(params, Scope) else Scope(params)


@dataclass
class Forward:
    aa_logits: Tensor
    del_logits: Tensor
    state: LatentState
    skips: list[Tensor] | None = None


def run_encoder(context: TokenGrid, targets: TokenGrid | None, P: Scope, cfg: ModelConfig):
    """Encoder pass over [context; targets]. Returns per-level target features and
    per-block context-row skip activations (which never depend on the targets)."""
    C = context.depth
    rows = embed_rows(context, P)
    if targets is not None and targets.depth:
        rows = T.concat([rows, embed_rows(targets, P)], axis=0)
    _, pair = embed(context, P, cfg)
    taps = cfg.encoder_taps()
    feats: list[Tensor | None] = [None] * cfg.n_levels
    skips = []
    seq = rows
    for i in range(cfg.n_enc_blocks):
        seq, pair = hyperformer_block(seq, pair, P.sub(f"enc/{i}"), cfg, "encoder", C)
        skips.append(seq[:C])
        for j, tap in enumerate(taps):
            if tap == i + 1:
                feats[j] = seq[C:]
    return feats, skips


def run_decoder(context: TokenGrid, n_targets: int, P: Scope, cfg: ModelConfig, *,
                noise: SeedStream | None = None, feats=None, given=None, skips=None) -> Forward:
    """Top-down pass. Exactly one latent source is used per level: ``given`` samples,
    posterior sampling (when ``feats`` is supplied), or prior sampling."""
    C, L = context.depth, context.length
    if n_targets < 1:
        raise ValueError("need at least one target row")
    ctx_rows, pair = embed(context, P, cfg)
    seed_row = ctx_rows[0:1] + P["embed/target_marker"]
    seq = T.concat([ctx_rows, T.broadcast_to(seed_row, (n_targets, L, cfg.c_s))], axis=0)
    slots = cfg.decoder_slots()
    levels: dict[int, LatentLevel] = {}
    prev = None
    for i in range(cfg.n_dec_blocks):
        if skips is not None and cfg.skip_connections:
            k = cfg.n_dec_blocks - i
            if 1 <= k <= len(skips):
                seq = T.concat([seq[:C] + linear(skips[k - 1], P, f"skip/{k}"), seq[C:]], axis=0)
        for block_idx, j in slots:
            if block_idx != i:
                continue
            dim = cfg.latent_dims[j]
            mod = LevelModule(P.sub(f"latent/{j}"), dim, None if prev is None else prev.shape[-1])
            ctx_summary = T.mean(seq[:C], axis=0)
            cond = mod.conditioning(ctx_summary, prev, n_targets)
            base = mod.prior_base(cond)
            dev_raw = mod.deviation_raw(cond, feats[j]) if feats is not None else None
            deviation = posterior = None
            if given is not None:
                z = T.as_tensor(given[j], like=base[0])
                if z.shape != base[0].shape:
                    raise ValueError(f"level {j} sample has shape {z.shape}, expected {base[0].shape}")
                prior = prior_at(base, mod.ar_terms(z))
                if dev_raw is not None:
                    deviation, posterior = relative_posterior(prior, dev_raw)
            else:
                if noise is None:
                    raise ValueError("noise stream required for sampling")
                eps = noise.fork(f"z{j}").normal((n_targets, L, dim)).astype(base[0].dtype)
                z, prior, deviation, posterior = ancestral_sample(base, mod, eps, dev_raw)
            levels[j] = LatentLevel(j + 1, dim, prior, deviation, posterior, z)
            seq = T.concat([seq[:C], seq[C:] + linear(z, P, f"inject/{j}")], axis=0)
            prev = z
        seq, pair = hyperformer_block(seq, pair, P.sub(f"dec/{i}"), cfg, "decoder", C)
    if given is not None and len(levels) != cfg.n_levels:
        raise ValueError("a sample is required for every latent level")
    h = T.gelu(linear(norm(seq[C:], P, "readout/ln"), P, "readout/hidden"))
    state = LatentState([levels[j] for j in range(cfg.n_levels)])
    return Forward(linear(h, P, "readout/aa"), linear(h, P, "readout/del"), state, skips)


def encode(context: TokenGrid, targets: TokenGrid, params, cfg: ModelConfig, noise: SeedStream):
    """Posterior latents for each target row plus encoder skip activations.

    Priors need the decoder's context activations, so this also runs the top-down pass.
    """
    P = _scope(params)
    feats, skips = run_encoder(context, targets, P, cfg)
    fwd = run_decoder(context, targets.depth, P, cfg, noise=noise, feats=feats,
                      skips=skips if cfg.skip_connections else None)
    return fwd.state, skips


def decode(context: TokenGrid, latents, skips, params, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Readout logits (T x L x 22, T x L x 6) for given per-level samples."""
    P = _scope(params)
    samples = latents.samples if isinstance(latents, LatentState) else list(latents)
    if len(samples) != cfg.n_levels or any(s is None for s in samples):
        raise ValueError("a sample is required for every latent level")
    n = samples[0].shape[0]
    fwd = run_decoder(context, n, P, cfg, given=samples, skips=skips)
    return fwd.aa_logits, fwd.del_logits


@dataclass
class ElboTerms:
    recon_aa: Tensor
    recon_del: Tensor
    kl: list[Tensor]
    total: Tensor
    beta: float
    aa_logits: Tensor = field(repr=False, default=None)
    del_logits: Tensor = field(repr=False, default=None)

    def as_floats(self) -> dict:
        out = {"recon_aa": float(self.recon_aa.data), "recon_del": float(self.recon_del.data),
               "total": float(self.total.data)}
        for j, k in enumerate(self.kl):
            out[f"kl_{j}"] = float(k.data)
        return out


def row_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-row sum over positions of -log softmax(logits)[label]  -> (T,)."""
    logp = T.log_softmax(logits, axis=-1)
    onehot = T.one_hot(labels, logits.shape[-1], dtype=logits.dtype)
    return -T.sum_(logp * onehot, axis=(1, 2))


def elbo(context: TokenGrid, targets: TokenGrid, params, cfg: ModelConfig, beta: float,
         noise: SeedStream) -> ElboTerms:
    """Negative ELBO with a ``beta``-weighted KL.

    Reconstruction and KL terms are summed over positions (and channels) per
    target row, then averaged across target rows. ``total`` is the quantity to
    minimize; at ``beta == 1`` it is the negative ELBO per target sequence.
    """
    if targets is None or targets.depth == 0:
        raise ValueError("elbo needs at least one target row")
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    P = _scope(params)
    feats, skips = run_encoder(context, targets, P, cfg)
    fwd = run_decoder(context, targets.depth, P, cfg, noise=noise, feats=feats,
                      skips=skips if cfg.skip_connections else None)
    recon_aa = T.mean(row_cross_entropy(fwd.aa_logits, targets.tokens))
    recon_del = T.mean(row_cross_entropy(fwd.del_logits, targets.del_bins))
    kls = [T.mean(kl_per_row(lv.posterior, lv.prior)) for lv in fwd.state.levels]
    total = recon_aa + recon_del
    for k in kls:
        total = total + k * beta
    return ElboTerms(recon_aa, recon_del, kls, total, beta, fwd.aa_logits, fwd.del_logits)


def elbo_query_only(query: TokenGrid, targets: TokenGrid, params, cfg: ModelConfig, beta: float,
                    noise: SeedStream) -> ElboTerms:
    """Objective conditioned on the query alone: the singleton-context case of :func:`elbo`."""
    return elbo(query.rows([0]), targets, params, cfg, beta, noise)


def generate(context: TokenGrid, n_out: int, noise: SeedStream, params, cfg: ModelConfig) -> OutputLogits:
    """Sample ``n_out`` new rows from the context-conditioned priors (no encoder, no skips)."""
    if n_out < 1:
        raise ValueError("n_out must be >= 1")
    P = _scope(params)
    with T.no_grad():
        fwd = run_decoder(context, n_out, P, cfg, noise=noise)
    return OutputLogits(fwd.aa_logits.data, fwd.del_logits.data)


def generate_tensors(context: TokenGrid, n_out: int, noise: SeedStream, params, cfg: ModelConfig) -> Forward:
    """Differentiable generation (used when a critic's gradient flows back into the model)."""
    if n_out < 1:
        raise ValueError("n_out must be >= 1")
    return run_decoder(context, n_out, _scope(params), cfg, noise=noise)


def reconstruct(context: TokenGrid, targets: TokenGrid, noise: SeedStream, params, cfg: ModelConfig) -> OutputLogits:
    """Encode-decode the targets given the context (posterior sample, skips on)."""
    P = _scope(params)
    with T.no_grad():
        feats, skips = run_encoder(context, targets, P, cfg)
        fwd = run_decoder(context, targets.depth, P, cfg, noise=noise, feats=feats,
                          skips=skips if cfg.skip_connections else None)
    return OutputLogits(fwd.aa_logits.data, fwd.del_logits.data)


def log_importance_weights(context: TokenGrid, target: TokenGrid, params, cfg: ModelConfig,
                           n_samples: int, noise: SeedStream, chunk: int = 4096) -> np.ndarray:
    """``log p(S|z,C) + log p(z|C) - log q(z|S,C)`` for ``n_samples`` posterior draws of one target row."""
    if target.depth != 1:
        raise ValueError("importance weights are computed for a single target row")
    P = _scope(params)
    out = []
    done = 0
    with T.no_grad():
        while done < n_samples:
            n = min(chunk, n_samples - done)
            reps = target.rows([0] * n)
            feats, skips = run_encoder(context, reps, P, cfg)
            fwd = run_decoder(context, n, P, cfg, noise=noise.fork(f"is{done}"), feats=feats,
                              skips=skips if cfg.skip_connections else None)
            logw = -(row_cross_entropy(fwd.aa_logits, reps.tokens).data
                     + row_cross_entropy(fwd.del_logits, reps.del_bins).data)
            for lv in fwd.state.levels:
                z = lv.sample.data
                logw = logw + gaussian_log_density(z, lv.prior).sum(axis=(1, 2))
                logw = logw - gaussian_log_density(z, lv.posterior).sum(axis=(1, 2))
            out.append(logw)
            done += n
    return np.concatenate(out)


class EvoGen:
    """Config + parameters bundle with convenience wrappers around the functional API."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params
        self._leaves = None

    @classmethod
    def initialize(cls, cfg: ModelConfig, seed: int = 0, dtype=np.float64, zero_init: bool = True) -> "EvoGen":
        return cls(cfg, init_params(cfg, seed, dtype, zero_init))

    def tensors(self) -> dict[str, Tensor]:
        if self._leaves is None:
            self._leaves = as_leaves(self.params, requires_grad=False)
        return self._leaves

    def generate(self, context: TokenGrid, n_out: int, noise: SeedStream) -> OutputLogits:
        return generate(context, n_out, noise, self.tensors(), self.cfg)

    def reconstruct(self, context: TokenGrid, targets: TokenGrid, noise: SeedStream) -> OutputLogits:
        return reconstruct(context, targets, noise, self.tensors(), self.cfg)

    def save(self, path, meta: dict | None = None) -> None:
        save_checkpoint(path, self.params, self.cfg.to_dict(), meta)

    @classmethod
    def load(cls, path, expect: ModelConfig | None = None) -> "EvoGen":
        params, header = load_checkpoint(path, expect.digest() if expect is not None else None)
        return cls(ModelConfig.from_dict(header["config"]), params)


def load_model_config(path) -> ModelConfig:
    with open(path) as fh:
        return ModelConfig.from_dict(json.load(fh))
