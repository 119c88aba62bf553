"""Pretraining on the ELBO, schedules, a synthetic MSA-family corpus, and critic-guided fine-tuning.

Every random choice (crops, context ratios, splits, latent noise, Gumbel noise,
batch membership) is drawn from a :class:`SeedStream` forked by step and batch
index, so a run is a pure function of its configs and seed.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .featurize import TokenGrid, split_context_target, tokenize
from .model import ModelConfig, as_leaves, elbo, generate_tensors, run_decoder, run_encoder
from .msa_io import ALPHABET, GAP_ID, VOCAB_SIZE, AlignedRow, Msa
from .nn import Scope
from .tensor import Tensor
from .tensor.core import _node
from .tensor.optim import AdamState, adam_step, clip_by_global_norm
from .tensor.random import SeedStream

log = logging.getLogger(__name__)

CRITIC_CHANNELS = ("fape", "torsion", "violation", "confidence")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    crop_length: int = 256
    crop_depth: int = 128
    lr_peak: float = 5e-4
    lr_final: float = 1e-5
    warmup_steps: int = 3000
    decay_steps: int = 100000
    total_pretrain_steps: int = 150000
    total_finetune_steps: int = 50000
    clip_norm: float = 0.1
    kl_warmup_fraction: float = 0.3
    # fape, torsion, violation, confidence, generator regularizer
    finetune_weights: tuple[float, ...] = (0.5, 0.5, 0.01, 0.01, 0.1)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-6
    r_ctx_min: float = 0.3
    r_ctx_max: float = 0.9
    finetune_feed: str = "soft"
    gumbel_temperature: float = 1.0
    finetune_n_out: int = 8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "finetune_weights", tuple(float(w) for w in self.finetune_weights))
        for f in ("batch_size", "crop_length", "crop_depth", "warmup_steps", "decay_steps",
                  "total_pretrain_steps", "total_finetune_steps", "finetune_n_out"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")
        for f in ("lr_peak", "lr_final", "clip_norm", "kl_warmup_fraction", "adam_eps", "gumbel_temperature"):
            if not getattr(self, f) > 0:
                raise ValueError(f"{f} must be positive")
        if len(self.finetune_weights) != 5 or any(w < 0 for w in self.finetune_weights):
            raise ValueError("finetune_weights needs five non-negative values")
        if not 0.0 < self.r_ctx_min <= self.r_ctx_max < 1.0:
            raise ValueError("need 0 < r_ctx_min <= r_ctx_max < 1")
        if self.finetune_feed not in ("soft", "hard"):
            raise ValueError("finetune_feed must be 'soft' or 'hard'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["finetune_weights"] = list(self.finetune_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# -- schedules -----------------------------------------------------------------
def lr_at_step(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up from 0, cosine decay to ``lr_final`` over ``decay_steps``, then flat."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    t = step - cfg.warmup_steps
    if t >= cfg.decay_steps:
        return cfg.lr_final
    cos = 0.5 * (1.0 + math.cos(math.pi * t / cfg.decay_steps))
    return cfg.lr_final + (cfg.lr_peak - cfg.lr_final) * cos


def kl_beta(step: int, cfg: TrainConfig, total_steps: int | None = None) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    total = cfg.total_pretrain_steps if total_steps is None else total_steps
    ramp = cfg.kl_warmup_fraction * total
    if ramp <= 0 or step >= ramp:
        return 1.0
    return step / ramp


def loss_weight(target_length: int) -> float:
    if target_length < 1:
        raise ValueError("length must be >= 1")
    return math.sqrt(target_length)


# -- synthetic corpus ----------------------------------------------------------
@dataclass(frozen=True)
class SyntheticFamilyConfig:
    n_families: int = 100
    depth: int = 32
    length: int = 48
    conserved_fraction: float = 0.5
    # Softmax sharpness of the variable-column residue profiles; higher means lower entropy.
    profile_sharpness: float = 2.0
    mutation_rate: float = 0.3
    gap_rate: float = 0.1
    insertion_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_families < 1 or self.depth < 1 or self.length < 1:
            raise ValueError("n_families, depth and length must be positive")
        for f in ("conserved_fraction", "mutation_rate", "gap_rate", "insertion_rate"):
            if not 0.0 <= getattr(self, f) <= 1.0:
                raise ValueError(f"{f} must lie in [0, 1]")
        if self.profile_sharpness < 0:
            raise ValueError("profile_sharpness must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticFamily:
    msa: Msa
    conserved: np.ndarray      # L bool
    profile: np.ndarray        # L x 22 expected column frequencies of homolog rows
    ancestor: np.ndarray       # L int64


def synth_family(cfg: SyntheticFamilyConfig, index: int) -> SyntheticFamily:
    s = SeedStream(f"synth/{cfg.seed}/{index}")
    L, N = cfg.length, cfg.depth
    ancestor = s.fork("ancestor").integers(20, (L,)).astype(np.int64)
    n_cons = int(round(cfg.conserved_fraction * L))
    conserved = np.zeros(L, dtype=bool)
    conserved[s.fork("conserved").permutation(L)[:n_cons]] = True
    logits = s.fork("profile").normal((L, 20)) * cfg.profile_sharpness
    col = np.exp(logits - logits.max(axis=1, keepdims=True))
    col /= col.sum(axis=1, keepdims=True)

    tokens = np.tile(ancestor, (N, 1))
    var = ~conserved
    mutate = (s.fork("mutate").uniform((N, L)) < cfg.mutation_rate) & var
    # Inverse-CDF draws from each column's residue profile.
    u = s.fork("draw").uniform((N, L))
    drawn = np.minimum((np.cumsum(col, axis=1)[None] < u[..., None]).sum(-1), 19)
    tokens = np.where(mutate, drawn, tokens)
    gaps = (s.fork("gap").uniform((N, L)) < cfg.gap_rate) & var
    tokens = np.where(gaps, GAP_ID, tokens)
    ins = (s.fork("ins").uniform((N, L)) < cfg.insertion_rate) & (tokens != GAP_ID)
    dels = np.where(ins, 1 + s.fork("ins_len").integers(3, (N, L)), 0)
    tokens[0], dels[0] = ancestor, 0

    rows = [AlignedRow("".join(ALPHABET[t] for t in tokens[r]), tuple(int(d) for d in dels[r]),
                       f"fam{index}_row{r}") for r in range(N)]
    profile = np.zeros((L, VOCAB_SIZE))
    anc_hot = np.eye(VOCAB_SIZE)[ancestor]
    m, g = cfg.mutation_rate, cfg.gap_rate
    var_prof = (1 - g) * ((1 - m) * anc_hot + m * np.pad(col, ((0, 0), (0, 2))))
    var_prof[:, GAP_ID] += g
    profile[conserved] = anc_hot[conserved]
    profile[var] = var_prof[var]
    return SyntheticFamily(Msa(tuple(rows)), conserved, profile, ancestor)


def synth_corpus(cfg: SyntheticFamilyConfig) -> list[SyntheticFamily]:
    return [synth_family(cfg, i) for i in range(cfg.n_families)]


def save_corpus(families: Sequence[SyntheticFamily], out_dir, cfg: SyntheticFamilyConfig | None = None) -> None:
    from .msa_io import save_a3m
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"config": cfg.to_dict() if cfg else None, "families": []}
    for i, fam in enumerate(families):
        name = f"family_{i:04d}.a3m"
        save_a3m(fam.msa, out / name)
        meta["families"].append({"file": name, "conserved": [int(c) for c in fam.conserved]})
    (out / "corpus.json").write_text(json.dumps(meta, indent=1) + "\n")


def load_corpus(path) -> tuple[list[Msa], list[np.ndarray | None]]:
    """MSAs from a corpus directory (``corpus.json`` optional) or a single A3M file."""
    from .msa_io import read_a3m
    p = Path(path)
    if p.is_file():
        return [read_a3m(p)], [None]
    meta_path = p / "corpus.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        msas = [read_a3m(p / f["file"]) for f in meta["families"]]
        masks = [np.asarray(f.get("conserved"), dtype=bool) if f.get("conserved") is not None else None
                 for f in meta["families"]]
        return msas, masks
    files = sorted(p.glob("*.a3m"))
    if not files:
        raise FileNotFoundError(f"no .a3m files under {p}")
    return [read_a3m(f) for f in files], [None] * len(files)


# -- batch assembly ------------------------------------------------------------
def crop_msa(msa: Msa, cfg: TrainConfig, stream: SeedStream) -> Msa:
    """Contiguous length crop at a seeded offset, then a query-keeping depth subsample."""
    if msa.length > cfg.crop_length:
        start = int(stream.fork("offset").integers(msa.length - cfg.crop_length + 1))
        msa = msa.crop(start, start + cfg.crop_length)
    if msa.depth > cfg.crop_depth:
        others = 1 + stream.fork("rows").permutation(msa.depth - 1)[: cfg.crop_depth - 1]
        msa = msa.select([0] + sorted(int(i) for i in others))
    return msa


@dataclass
class Example:
    context: TokenGrid
    targets: TokenGrid
    r_ctx: float
    length: int


def make_example(msa: Msa, cfg: TrainConfig, stream: SeedStream) -> Example | None:
    """Crop and split one MSA; ``None`` when no target row is possible."""
    if msa.depth < 2:
        return None
    msa = crop_msa(msa, cfg, stream)
    u = float(stream.fork("r").uniform(()))
    r = cfg.r_ctx_min + (cfg.r_ctx_max - cfg.r_ctx_min) * u
    split = split_context_target(msa.depth, r, stream.fork("split"))
    if not split.target_indices:
        return None
    grid = tokenize(msa)
    return Example(grid.rows(split.context_indices), grid.rows(split.target_indices), r, msa.length)


# -- optimizer plumbing --------------------------------------------------------
@dataclass
class StepOutput:
    params: dict[str, np.ndarray]
    opt_state: AdamState
    metrics: dict


def _apply(params, leaves, loss: Tensor, opt_state: AdamState, step: int, cfg: TrainConfig):
    keys = list(params)
    gs = T.grad(loss, [leaves[k] for k in keys], allow_unused=True)
    grads, pre_norm = clip_by_global_norm(dict(zip(keys, gs)), cfg.clip_norm)
    post_norm = min(pre_norm, cfg.clip_norm)
    lr = lr_at_step(step, cfg)
    new_params, new_state = adam_step(params, grads, opt_state, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    return new_params, new_state, {"lr": lr, "grad_norm": pre_norm, "clipped_norm": post_norm}


def pretrain_step(batch: Sequence[Msa], params: dict[str, np.ndarray], opt_state: AdamState, step: int,
                  cfg: TrainConfig, model_cfg: ModelConfig, total_steps: int | None = None) -> StepOutput:
    """One ADAM step on the length-weighted negative ELBO summed over the batch."""
    if not batch:
        raise ValueError("empty batch")
    stream = SeedStream(f"pretrain/{cfg.seed}").fork(step)
    beta = kl_beta(step, cfg, total_steps)
    leaves = as_leaves(params)
    loss = None
    sums = {"recon_aa": 0.0, "recon_del": 0.0, "kl": 0.0, "neg_elbo": 0.0}
    used = skipped = 0
    for i, msa in enumerate(batch):
        s = stream.fork(i)
        ex = make_example(msa, cfg, s)
        if ex is None:
            skipped += 1
            log.warning("skipping MSA %d of step %d: depth %d leaves no target row", i, step, msa.depth)
            continue
        terms = elbo(ex.context, ex.targets, leaves, model_cfg, beta, s.fork("noise"))
        w = loss_weight(ex.length)
        loss = terms.total * w if loss is None else loss + terms.total * w
        kl = sum(float(k.data) for k in terms.kl)
        sums["recon_aa"] += float(terms.recon_aa.data)
        sums["recon_del"] += float(terms.recon_del.data)
        sums["kl"] += kl
        sums["neg_elbo"] += float(terms.recon_aa.data) + float(terms.recon_del.data) + kl
        used += 1
    metrics = {"step": step, "beta": beta, "used": used, "skipped": skipped}
    if loss is None:
        metrics.update(lr=lr_at_step(step, cfg), loss=float("nan"))
        return StepOutput(params, opt_state, metrics)
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"non-finite loss at step {step}")
    new_params, new_state, upd = _apply(params, leaves, loss, opt_state, step, cfg)
    metrics.update(upd)
    metrics["loss"] = float(loss.data)
    metrics.update({k: v / used for k, v in sums.items()})
    return StepOutput(new_params, new_state, metrics)


# -- straight-through Gumbel-Softmax ---------------------------------------------
@dataclass
class GumbelSample:
    soft: Tensor
    hard: np.ndarray
    st: Tensor


def straight_through(soft: Tensor, hard: np.ndarray) -> Tensor:
    """Forward value ``hard``; adjoint passed to ``soft`` unchanged.

    Fused so the forward value is the exact one-hot: ``soft + (hard - soft)``
    in floating point can miss it by an ulp.
    """
    hard = np.asarray(hard, dtype=soft.dtype)
    if hard.shape != soft.shape:
        raise ValueError("hard and soft shapes differ")
    return _node(hard.copy(), (soft,), lambda g: (g,))


def gumbel_st(logits: Tensor, temperature: float, noise: SeedStream) -> GumbelSample:
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    logits = T.as_tensor(logits)
    g = noise.gumbel(logits.shape).astype(logits.dtype)
    soft = T.softmax((logits + g) * (1.0 / temperature), axis=-1)
    hard = np.zeros(soft.shape, dtype=soft.dtype)
    np.put_along_axis(hard, np.argmax(soft.data, axis=-1)[..., None], 1.0, axis=-1)
    return GumbelSample(soft, hard, straight_through(soft, hard))


# -- fine-tuning -----------------------------------------------------------------
def critic_surrogate(features: Tensor, grads: dict[str, np.ndarray], weights: Sequence[float]) -> Tensor:
    """Scalar whose adjoint w.r.t. ``features`` is ``sum_c w_c * dL_c/dfeatures``."""
    total = None
    for w, name in zip(weights, CRITIC_CHANNELS):
        if w == 0.0:
            continue
        term = T.sum_(features * T.stop_gradient(Tensor(grads[name].astype(features.dtype)))) * w
        total = term if total is None else total + term
    return total


def finetune_step(batch: Sequence[tuple[Msa, object]], params: dict[str, np.ndarray], opt_state: AdamState,
                  step: int, cfg: TrainConfig, model_cfg: ModelConfig) -> StepOutput:
    """Generate rows, score them with each item's critic, and backpropagate the
    weighted critic losses plus ``0.1 * (-ELBO)`` into the generator."""
    if not batch:
        raise ValueError("empty batch")
    stream = SeedStream(f"finetune/{cfg.seed}").fork(step)
    w_crit, w_gen = cfg.finetune_weights[:4], cfg.finetune_weights[4]
    leaves = as_leaves(params)
    loss = None
    agg = {f"critic_{c}": 0.0 for c in CRITIC_CHANNELS}
    agg.update(critic_weighted=0.0, confidence=0.0, neg_elbo=0.0)
    used = 0
    for i, (msa, critic) in enumerate(batch):
        s = stream.fork(i)
        msa = crop_msa(msa, cfg, s)
        grid = tokenize(msa)
        u = float(s.fork("r").uniform(()))
        r = cfg.r_ctx_min + (cfg.r_ctx_max - cfg.r_ctx_min) * u
        split = split_context_target(msa.depth, r, s.fork("split"))
        context = grid.rows(split.context_indices)
        fwd = generate_tensors(context, cfg.finetune_n_out, s.fork("noise"), leaves, model_cfg)
        if cfg.finetune_feed == "soft":
            feats = T.softmax(fwd.aa_logits, axis=-1)
        else:
            feats = gumbel_st(fwd.aa_logits, cfg.gumbel_temperature, s.fork("gumbel")).st
        report, grads = critic.differentiable_score(feats.data)
        vals = [report.losses[c] for c in CRITIC_CHANNELS]
        if not all(np.isfinite(vals)):
            raise FloatingPointError(f"critic returned a non-finite loss at step {step}")
        part = critic_surrogate(feats, grads, w_crit)
        if w_gen > 0 and split.target_indices:
            terms = elbo(context, grid.rows(split.target_indices), leaves, model_cfg, 1.0, s.fork("elbo"))
            reg = terms.total * w_gen
            part = reg if part is None else part + reg
            agg["neg_elbo"] += float(terms.total.data)
        if part is not None:
            loss = part if loss is None else loss + part
        for c, v in zip(CRITIC_CHANNELS, vals):
            agg[f"critic_{c}"] += v
        agg["critic_weighted"] += float(np.dot(w_crit, vals))
        agg["confidence"] += report.confidence
        used += 1
    metrics = {"step": step}
    metrics.update({k: v / used for k, v in agg.items()})
    if loss is None:
        metrics.update(lr=lr_at_step(step, cfg), grad_norm=0.0, clipped_norm=0.0)
        return StepOutput(params, opt_state, metrics)
    new_params, new_state, upd = _apply(params, leaves, loss, opt_state, step, cfg)
    metrics.update(upd)
    return StepOutput(new_params, new_state, metrics)


# -- loops ---------------------------------------------------------------------
class MetricsWriter:
    """Line-delimited JSON records; ``None`` path keeps them in memory only."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self._fh = open(path, "w") if path else None

    def write(self, rec: dict) -> None:
        self.records.append(rec)
        if self._fh:
            self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()


def _batch_indices(n: int, batch_size: int, stream: SeedStream) -> list[int]:
    if batch_size >= n:
        return list(range(n))
    return sorted(int(i) for i in stream.permutation(n)[:batch_size])


def run_training(items: Sequence, params: dict[str, np.ndarray], cfg: TrainConfig, model_cfg: ModelConfig,
                 steps: int, step_fn: Callable, out_dir=None, checkpoint_every: int = 0,
                 on_step: Callable[[dict], None] | None = None, start_step: int = 0,
                 opt_state: AdamState | None = None, tag: str = "pretrain"):
    """Shared loop: seeded batch draws, JSONL metrics, periodic checkpoints."""
    from .tensor.checkpoint import save_checkpoint
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    writer = MetricsWriter(out / f"{tag}_metrics.jsonl" if out else None)
    state = opt_state or AdamState()
    total = start_step + steps
    try:
        for step in range(start_step, total):
            idx = _batch_indices(len(items), cfg.batch_size, SeedStream(f"{tag}-batch/{cfg.seed}").fork(step))
            batch = [items[i] for i in idx]
            if step_fn is pretrain_step:
                res = pretrain_step(batch, params, state, step, cfg, model_cfg, total_steps=total)
            else:
                res = step_fn(batch, params, state, step, cfg, model_cfg)
            params, state = res.params, res.opt_state
            writer.write(res.metrics)
            if on_step:
                on_step(res.metrics)
            if out and checkpoint_every and (step + 1) % checkpoint_every == 0:
                save_checkpoint(out / f"{tag}_step{step + 1}.ckpt", params, model_cfg.to_dict(),
                                {"step": step + 1, "train": cfg.to_dict()})
        if out:
            save_checkpoint(out / f"{tag}_final.ckpt", params, model_cfg.to_dict(),
                            {"step": total, "train": cfg.to_dict()})
    finally:
        writer.close()
    return params, state, writer.records


# -- evaluation ----------------------------------------------------------------
def column_mode_baseline(families: Sequence[SyntheticFamily]) -> np.ndarray:
    """Most frequent token at each column index, pooled over all rows of ``families``."""
    L = families[0].msa.length
    counts = np.zeros((L, VOCAB_SIZE), dtype=np.int64)
    for fam in families:
        toks = fam.msa.token_array().astype(np.int64)
        for j in range(L):
            counts[j] += np.bincount(toks[:, j], minlength=VOCAB_SIZE)
    return counts.argmax(axis=1)


@dataclass
class ReconstructionReport:
    model_accuracy: float
    baseline_accuracy: float
    n_tokens: int

    @property
    def margin(self) -> float:
        return self.model_accuracy - self.baseline_accuracy


def conserved_reconstruction(params, model_cfg: ModelConfig, train: Sequence[SyntheticFamily],
                             held_out: Sequence[SyntheticFamily], r_ctx: float = 0.5,
                             seed: int = 0) -> ReconstructionReport:
    """Target-token reconstruction accuracy at conserved columns on held-out families,
    against the pooled column-mode baseline from the training families."""
    base = column_mode_baseline(train)
    P = Scope(as_leaves(params, requires_grad=False))
    hit = base_hit = n = 0
    with T.no_grad():
        for k, fam in enumerate(held_out):
            grid = tokenize(fam.msa)
            split = split_context_target(fam.msa.depth, r_ctx, SeedStream(f"eval/{seed}/{k}"))
            ctx, tgt = grid.rows(split.context_indices), grid.rows(split.target_indices)
            feats, skips = run_encoder(ctx, tgt, P, model_cfg)
            fwd = run_decoder(ctx, tgt.depth, P, model_cfg, noise=SeedStream(f"eval-noise/{seed}/{k}"),
                              feats=feats, skips=skips if model_cfg.skip_connections else None)
            pred = np.argmax(fwd.aa_logits.data, axis=-1)
            cols = fam.conserved
            truth = tgt.tokens[:, cols]
            hit += int((pred[:, cols] == truth).sum())
            base_hit += int((base[cols][None, :] == truth).sum())
            n += truth.size
    return ReconstructionReport(hit / n, base_hit / n, n)


def held_out_neg_elbo(params, model_cfg: ModelConfig, msas: Sequence[Msa], r_ctx: float = 0.5,
                      seed: int = 0) -> float:
    """Mean negative ELBO (beta 1) over fixed splits and fixed noise."""
    leaves = as_leaves(params, requires_grad=False)
    vals = []
    with T.no_grad():
        for k, msa in enumerate(msas):
            grid = tokenize(msa)
            split = split_context_target(msa.depth, r_ctx, SeedStream(f"eval/{seed}/{k}"))
            if not split.target_indices:
                continue
            terms = elbo(grid.rows(split.context_indices), grid.rows(split.target_indices), leaves,
                         model_cfg, 1.0, SeedStream(f"eval-noise/{seed}/{k}"))
            vals.append(float(terms.total.data))
    return float(np.mean(vals))
