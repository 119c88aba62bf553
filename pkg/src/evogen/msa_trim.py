"""Depth-capped MSA trimming: coverage/identity filters, then greedy Hamming-nearest selection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .msa_io import GAP_ID, Msa


@dataclass(frozen=True)
class TrimConfig:
    n_max: int = 128
    cov_min: float = 0.5
    ident_max: float = 0.9
    ident_min: float = 0.2

    def __post_init__(self):
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if not 0.0 <= self.cov_min <= 1.0:
            raise ValueError("cov_min must lie in [0, 1]")
        if not 0.0 <= self.ident_min < self.ident_max <= 1.0:
            raise ValueError("need 0 <= ident_min < ident_max <= 1")


def _tokens(msa: Msa) -> np.ndarray:
    return np.ascontiguousarray(msa.token_array(), dtype=np.int8)


def primary_filter(msa: Msa, cfg: TrimConfig) -> Msa:
    """Drop homologs with low coverage, near-duplicate identity (> ident_max) or identity < ident_min.

    The query is always kept and input order is preserved.
    """
    tok = _tokens(msa)
    ident = kernels.identity_to(tok, tok[0], GAP_ID)
    cov = kernels.coverage_rows(tok, GAP_ID)
    keep = (cov >= cfg.cov_min) & (ident <= cfg.ident_max) & (ident >= cfg.ident_min)
    keep[0] = True
    return msa.select(np.flatnonzero(keep).tolist())


def greedy_select(msa: Msa, n_max: int, ident_max: float = 0.9) -> Msa:
    """Grow a pool from the query, admitting the Hamming-nearest candidate that stays
    at most ``ident_max`` identical to every pooled row.

    Ties in distance go to the lower input index. Because admissibility can only
    be lost as the pool grows, one pass in (distance, index) order is equivalent
    to repeatedly scanning for the nearest admissible candidate.
    """
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    tok = _tokens(msa)
    dist = kernels.hamming_to(tok, tok[0])
    cand = np.arange(1, msa.depth, dtype=np.int64)
    order = cand[np.lexsort((cand, dist[1:]))]
    chosen = kernels.greedy_admit(tok, np.ascontiguousarray(order), int(n_max), float(ident_max), GAP_ID)
    return msa.select(chosen.tolist())


def trim(msa: Msa, cfg: TrimConfig) -> Msa:
    if msa.depth <= cfg.n_max:
        return msa
    filtered = primary_filter(msa, cfg)
    if filtered.depth <= cfg.n_max:
        return filtered
    return greedy_select(filtered, cfg.n_max, cfg.ident_max)
