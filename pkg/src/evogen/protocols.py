"""Inference protocols: MSA calibration, few-shot augmentation, zero-shot generation,
prediction ranking and alternative-conformation probing, plus the critic interface.

A critic scores feature grids (``N x L x 22`` residue probabilities). Its loss
channels are named ``fape``, ``torsion``, ``violation`` and ``confidence`` so the
fine-tuning weights apply to any critic that fills them.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from . import tensor as T
from .featurize import (
    FeatureGrid, OutputLogits, detokenize, export_features, import_features, one_hot_features,
    split_context_target, tokenize,
)
from .model import EvoGen
from .msa_io import GAP_ID, VOCAB_SIZE, AlignedRow, Msa
from .msa_trim import TrimConfig, trim
from .tensor import Tensor
from .tensor.random import SeedStream
from .training import CRITIC_CHANNELS

__all__ = [
    "CriticReport", "CriticInterface", "SyntheticCritic", "TwoBasinCritic", "synthetic_critic",
    "CalibrationConfig", "CalibrationTrial", "calibrate", "AugmentationConfig", "ZeroShotConfig",
    "AugmentationTrial", "augment", "zero_shot", "rank_predictions", "ProbeConfig", "ProbeTrial",
    "ProbeResult", "probe", "write_manifest", "export_features", "import_features",
]

_CLAMP = 1e-6


@dataclass
class CriticReport:
    losses: dict[str, float]
    confidence: float
    per_position: np.ndarray | None = None
    # Opaque summary used to compare predictions (a structure, at full scale).
    structure: np.ndarray | None = None

    def __post_init__(self):
        vals = list(self.losses.values()) + [self.confidence]
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("critic report contains non-finite values")
        if not 0.0 <= self.confidence <= 100.0:
            raise ValueError("confidence must lie in [0, 100]")


class CriticInterface(Protocol):
    differentiable: bool

    def score(self, features: np.ndarray) -> CriticReport: ...

    def differentiable_score(self, features: np.ndarray) -> tuple[CriticReport, dict[str, np.ndarray]]: ...


class SyntheticCritic:
    """Differentiable stand-in for a folding engine built around a hidden residue profile.

    ``fape``: clamped cross-entropy of the features against the profile (mean over rows
    and positions). ``torsion``: half the mean squared distance to the profile.
    ``violation``: mean gap probability. ``confidence``: ``1 - exp(-fape)``.
    The confidence score is ``100 * exp(-fape)``.
    """

    differentiable = True

    def __init__(self, profile: np.ndarray):
        profile = np.asarray(profile, dtype=np.float64)
        if profile.ndim == 1:
            profile = np.eye(VOCAB_SIZE)[profile.astype(np.int64)]
        if profile.ndim != 2 or profile.shape[1] != VOCAB_SIZE:
            raise ValueError(f"profile must be L x {VOCAB_SIZE} or L token ids")
        self.profile = profile

    def _channels(self, f: Tensor) -> dict[str, Tensor]:
        if f.shape[1:] != self.profile.shape:
            raise ValueError(f"features {f.shape} do not match profile length {self.profile.shape[0]}")
        prof = Tensor(self.profile)
        ce_pos = -T.sum_(prof * T.log(T.clip(f, _CLAMP, 1.0)), axis=-1)      # N x L
        fape = T.mean(ce_pos)
        diff = f - prof
        return {
            "fape": fape,
            "torsion": T.mean(T.sum_(diff * diff, axis=-1)) * 0.5,
            "violation": T.mean(f[..., GAP_ID]),
            "confidence": 1.0 - T.exp(-fape),
            "_per_position": T.mean(ce_pos, axis=0),
        }

    def _report(self, ch: dict[str, Tensor], features: np.ndarray) -> CriticReport:
        fape = float(ch["fape"].data)
        return CriticReport({c: float(ch[c].data) for c in CRITIC_CHANNELS}, 100.0 * math.exp(-fape),
                            100.0 * np.exp(-ch["_per_position"].data), self.structure(features))

    def structure(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64).mean(axis=0).ravel()

    def score(self, features: np.ndarray) -> CriticReport:
        with T.no_grad():
            ch = self._channels(Tensor(np.asarray(features, dtype=np.float64)))
        return self._report(ch, features)

    def differentiable_score(self, features: np.ndarray):
        f = Tensor(np.asarray(features, dtype=np.float64), requires_grad=True)
        ch = self._channels(f)
        grads = {c: T.grad(ch[c], [f])[0] for c in CRITIC_CHANNELS}
        return self._report(ch, features), grads


def synthetic_critic(profile) -> SyntheticCritic:
    return SyntheticCritic(profile)


class TwoBasinCritic(SyntheticCritic):
    """Critic whose score has two optima (profiles ``a`` and ``b``).

    Losses follow whichever profile fits better; the reported structure is the
    winning profile's signature plus a small feature-dependent term, so outputs
    in the same basin are near-identical under cosine similarity.
    """

    def __init__(self, profile_a: np.ndarray, profile_b: np.ndarray):
        self.basins = [SyntheticCritic(profile_a), SyntheticCritic(profile_b)]
        super().__init__(self.basins[0].profile)

    def _pick(self, features: np.ndarray) -> int:
        scores = [b.score(features).losses["fape"] for b in self.basins]
        return int(np.argmin(scores))

    def structure(self, features: np.ndarray) -> np.ndarray:
        k = self._pick(features)
        sig = self.basins[k].profile.ravel()
        return sig + 0.01 * np.asarray(features, dtype=np.float64).mean(axis=0).ravel()

    def score(self, features: np.ndarray) -> CriticReport:
        k = self._pick(features)
        rep = self.basins[k].score(features)
        rep.structure = self.structure(features)
        return rep

    def differentiable_score(self, features: np.ndarray):
        k = self._pick(features)
        rep, grads = self.basins[k].differentiable_score(features)
        rep.structure = self.structure(features)
        return rep, grads


# -- calibration -----------------------------------------------------------------
def _check_ratios(values) -> tuple[float, ...]:
    values = tuple(float(r) for r in values)
    if not values or any(not 0.0 < r <= 1.0 for r in values):
        raise ValueError("r_ctx values must lie in (0, 1]")
    return values


@dataclass(frozen=True)
class CalibrationConfig:
    r_ctx_values: tuple[float, ...] = (0.5, 0.7, 0.9)
    trials: int = 5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "r_ctx_values", _check_ratios(self.r_ctx_values))
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


@dataclass
class CalibrationTrial:
    r_ctx: float
    trial: int
    seed: str
    msa: Msa
    features: FeatureGrid
    context_indices: tuple[int, ...]
    flag: str = ""

    def record(self) -> dict:
        return {"protocol": "calibrate", "r_ctx": self.r_ctx, "trial": self.trial, "seed": self.seed,
                "depth": self.msa.depth, "n_context": len(self.context_indices), "flag": self.flag}


def _row_from(aa: np.ndarray, dels: np.ndarray, header: str) -> AlignedRow:
    from .msa_io import ALPHABET
    return AlignedRow("".join(ALPHABET[i] for i in aa), tuple(int(d) for d in dels), header)


def calibrate_once(msa: Msa, model: EvoGen, r_ctx: float, stream: SeedStream) -> tuple[Msa, FeatureGrid, tuple]:
    """Replace the target rows of one seeded split by their reconstructions."""
    grid = tokenize(msa)
    feats = one_hot_features(grid)
    split = split_context_target(msa.depth, r_ctx, stream.fork("split"))
    rows = list(msa.rows)
    if split.target_indices:
        ctx = grid.rows(split.context_indices)
        tgt = grid.rows(split.target_indices)
        out = model.reconstruct(ctx, tgt, stream.fork("noise"))
        hard = detokenize(out, "argmax")
        feats[list(split.target_indices)] = out.aa_probs.astype(np.float32)
        for i, row in zip(split.target_indices, hard):
            rows[i] = AlignedRow(row.symbols, row.deletions, msa.rows[i].header)
    return Msa(tuple(rows)), FeatureGrid(feats, msa.query.symbols), split.context_indices


def calibrate(msa: Msa, model: EvoGen, cfg: CalibrationConfig = CalibrationConfig()) -> list[CalibrationTrial]:
    """Depth-preserving reconstruction for every (r_ctx, trial); context rows are kept verbatim."""
    if msa.depth < 2:
        grid = FeatureGrid(one_hot_features(tokenize(msa)), msa.query.symbols)
        return [CalibrationTrial(1.0, 0, f"calibrate/{cfg.seed}", msa, grid, (0,), "nothing_to_calibrate")]
    out = []
    for r in cfg.r_ctx_values:
        for t in range(cfg.trials):
            tag = f"calibrate/{cfg.seed}/{r!r}/{t}"
            cal, feats, ctx = calibrate_once(msa, model, r, SeedStream(tag))
            out.append(CalibrationTrial(r, t, tag, cal, feats, ctx))
    return out


# -- augmentation ------------------------------------------------------------------
@dataclass(frozen=True)
class AugmentationConfig:
    n_aug: int = 128
    r_ctx_values: tuple[float, ...] = (0.5, 0.7, 0.9)
    trials: int = 5
    mode: str = "soft"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "r_ctx_values", _check_ratios(self.r_ctx_values))
        if self.n_aug < 1:
            raise ValueError("n_aug must be >= 1")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.mode not in ("soft", "hard"):
            raise ValueError("mode must be 'soft' or 'hard'")


@dataclass(frozen=True)
class ZeroShotConfig:
    n_aug_values: tuple[int, ...] = (16, 32, 64)
    trials: int = 2
    mode: str = "soft"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "n_aug_values", tuple(int(n) for n in self.n_aug_values))
        if not self.n_aug_values or min(self.n_aug_values) < 1:
            raise ValueError("n_aug values must be >= 1")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.mode not in ("soft", "hard"):
            raise ValueError("mode must be 'soft' or 'hard'")


@dataclass
class AugmentationTrial:
    r_ctx: float
    trial: int
    n_aug: int
    seed: str
    features: FeatureGrid
    msa: Msa | None = None

    def record(self) -> dict:
        return {"protocol": "augment", "r_ctx": self.r_ctx, "trial": self.trial, "n_aug": self.n_aug,
                "seed": self.seed}


def augment_once(msa: Msa, model: EvoGen, r_ctx: float, n_aug: int, mode: str,
                 stream: SeedStream) -> tuple[FeatureGrid, Msa]:
    grid = tokenize(msa)
    split = split_context_target(msa.depth, r_ctx, stream.fork("split"))
    ctx = grid.rows(split.context_indices)
    query_feat = one_hot_features(grid.rows([0]))
    rows = [msa.query]
    if n_aug == 1:
        return FeatureGrid(query_feat, msa.query.symbols), Msa(tuple(rows))
    out = model.generate(ctx, n_aug - 1, stream.fork("noise"))
    if mode == "soft":
        gen = detokenize(out, "argmax")
        probs = out.aa_probs.astype(np.float32)
    else:
        gen = detokenize(out, "sample", stream.fork("sample"))
        probs = one_hot_features(tokenize(Msa((msa.query,) + tuple(gen))))[1:]
    rows += [AlignedRow(r.symbols, r.deletions, f"generated_{i + 1}") for i, r in enumerate(gen)]
    feats = np.concatenate([query_feat, probs], axis=0)
    return FeatureGrid(feats, msa.query.symbols), Msa(tuple(rows))


def augment(msa: Msa, model: EvoGen, cfg: AugmentationConfig = AugmentationConfig()) -> list[AugmentationTrial]:
    """Virtual MSAs of depth ``n_aug``: row 0 is the query, the rest are prior samples."""
    out = []
    for r in cfg.r_ctx_values:
        for t in range(cfg.trials):
            tag = f"augment/{cfg.seed}/{r!r}/{t}"
            feats, rows = augment_once(msa, model, r, cfg.n_aug, cfg.mode, SeedStream(tag))
            out.append(AugmentationTrial(r, t, cfg.n_aug, tag, feats, rows))
    return out


def zero_shot(query: str, model: EvoGen, cfg: ZeroShotConfig = ZeroShotConfig()) -> list[AugmentationTrial]:
    """Augmentation conditioned on the query alone, over the ``n_aug`` grid."""
    if len(query) < 1:
        raise ValueError("query must be non-empty")
    msa = Msa((AlignedRow.from_sequence(query, header="query"),))
    out = []
    for n_aug in cfg.n_aug_values:
        for t in range(cfg.trials):
            tag = f"zeroshot/{cfg.seed}/{n_aug}/{t}"
            feats, rows = augment_once(msa, model, 1.0, n_aug, cfg.mode, SeedStream(tag))
            out.append(AugmentationTrial(1.0, t, n_aug, tag, feats, rows))
    return out


# -- ranking and probing --------------------------------------------------------------
def rank_predictions(reports: Sequence[CriticReport]) -> tuple[list[int], int]:
    """Indices by descending confidence (stable on ties) and the top-1 index."""
    if not reports:
        raise ValueError("no predictions to rank")
    order = sorted(range(len(reports)), key=lambda i: -reports[i].confidence)
    return order, order[0]


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


@dataclass(frozen=True)
class ProbeConfig:
    n_max: int = 512
    n_sub_values: tuple[int, ...] = (16, 32, 64)
    r_ctx_values: tuple[float, ...] = (0.25, 0.5, 0.75)
    trials: int = 1
    similarity_threshold: float = 0.9
    min_confidence: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "n_sub_values", tuple(int(n) for n in self.n_sub_values))
        object.__setattr__(self, "r_ctx_values", _check_ratios(self.r_ctx_values))
        if self.n_max < 1 or not self.n_sub_values or min(self.n_sub_values) < 1:
            raise ValueError("n_max and n_sub values must be positive")
        if max(self.n_sub_values) > self.n_max:
            raise ValueError("n_sub values must not exceed n_max")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not -1.0 <= self.similarity_threshold <= 1.0:
            raise ValueError("similarity_threshold must lie in [-1, 1]")


@dataclass
class ProbeTrial:
    n_sub: int
    r_ctx: float
    trial: int
    seed: str
    rows: tuple[int, ...]
    report: CriticReport
    features: FeatureGrid = field(repr=False, default=None)

    def record(self) -> dict:
        return {"protocol": "probe", "n_sub": self.n_sub, "r_ctx": self.r_ctx, "trial": self.trial,
                "seed": self.seed, "confidence": self.report.confidence}


@dataclass
class ProbeResult:
    trials: list[ProbeTrial]
    labels: list[int]        # ensemble id per trial; -1 when below the confidence cut
    ensembles: list[dict]


def single_linkage(items: Sequence[np.ndarray], threshold: float,
                   similarity: Callable[[np.ndarray, np.ndarray], float] = cosine_similarity) -> list[int]:
    """Connected components of the graph linking pairs with similarity >= threshold."""
    n = len(items)
    if n == 0:
        return []
    if n == 1:
        return [0]
    from scipy.cluster.hierarchy import fcluster, linkage
    from scipy.spatial.distance import squareform
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dist[i, j] = dist[j, i] = max(0.0, 1.0 - similarity(items[i], items[j]))
    tree = linkage(squareform(dist, checks=False), method="single")
    raw = fcluster(tree, t=1.0 - threshold, criterion="distance")
    # Relabel in first-appearance order so ids do not depend on scipy internals.
    remap: dict[int, int] = {}
    return [remap.setdefault(int(c), len(remap)) for c in raw]


def probe(pool: Msa, model: EvoGen, critic, cfg: ProbeConfig = ProbeConfig(),
          similarity: Callable[[np.ndarray, np.ndarray], float] = cosine_similarity) -> ProbeResult:
    """Trim, subsample (query kept), calibrate, score and cluster confident outputs."""
    trimmed = trim(pool, TrimConfig(n_max=cfg.n_max))
    if trimmed.depth < min(cfg.n_sub_values):
        raise ValueError(f"pool depth {trimmed.depth} is below the smallest n_sub {min(cfg.n_sub_values)}")
    trials = []
    for n_sub in cfg.n_sub_values:
        if n_sub > trimmed.depth:
            continue
        for r in cfg.r_ctx_values:
            for t in range(cfg.trials):
                tag = f"probe/{cfg.seed}/{n_sub}/{r!r}/{t}"
                s = SeedStream(tag)
                others = 1 + s.fork("subsample").permutation(trimmed.depth - 1)[: n_sub - 1]
                rows = (0,) + tuple(sorted(int(i) for i in others))
                _, feats, _ = calibrate_once(trimmed.select(rows), model, r, s.fork("calibrate"))
                trials.append(ProbeTrial(n_sub, r, t, tag, rows, critic.score(feats.probs), feats))
    confident = [i for i, tr in enumerate(trials) if tr.report.confidence >= cfg.min_confidence]
    sigs = [_signature(trials[i]) for i in confident]
    sub_labels = single_linkage(sigs, cfg.similarity_threshold, similarity)
    labels = [-1] * len(trials)
    for i, lab in zip(confident, sub_labels):
        labels[i] = lab
    ensembles = []
    for lab in sorted(set(sub_labels)):
        members = [i for i in confident if labels[i] == lab]
        reps = [trials[i].report for i in members]
        _, first = rank_predictions(reps)
        ensembles.append({"ensemble": lab, "size": len(members), "members": members,
                          "best_trial": members[first],
                          "mean_confidence": float(np.mean([r.confidence for r in reps]))})
    return ProbeResult(trials, labels, ensembles)


def _signature(trial: ProbeTrial) -> np.ndarray:
    if trial.report.structure is not None:
        return trial.report.structure
    return trial.features.probs.mean(axis=0).ravel()


def write_manifest(records: Sequence[dict], path) -> None:
    """One JSON record per line, keys sorted."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
