"""MSA <-> model tensors: tokens, transformed deletions, context/target splits, readout decoding.

Token ids follow :data:`evogen.msa_io.ALPHABET` (20 residues, rare ``X`` = 20, gap ``-`` = 21).
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .msa_io import ALPHABET, VOCAB_SIZE, AlignedRow, Msa
from .tensor.random import SeedStream

N_DEL_BINS = 6
DEL_BIN_EDGES = np.array([0.2, 0.35, 0.5, 0.65, 0.8])
DEL_BIN_CENTERS = np.array([0.1, 0.275, 0.425, 0.575, 0.725, 0.875])


@dataclass(frozen=True)
class TokenGrid:
    tokens: np.ndarray      # N x L int64 in [0, 21]
    del_raw: np.ndarray     # N x L int64 >= 0
    del_value: np.ndarray   # N x L float64 in [0, 1)

    @property
    def depth(self) -> int:
        return self.tokens.shape[0]

    @property
    def length(self) -> int:
        return self.tokens.shape[1]

    def rows(self, indices) -> "TokenGrid":
        idx = np.asarray(list(indices), dtype=np.int64)
        return TokenGrid(self.tokens[idx], self.del_raw[idx], self.del_value[idx])

    @property
    def del_bins(self) -> np.ndarray:
        return discretize_deletion(self.del_value)


@dataclass(frozen=True)
class ContextTargetSplit:
    context_indices: tuple[int, ...]
    target_indices: tuple[int, ...]
    r_ctx: float


@dataclass
class OutputLogits:
    aa_logits: np.ndarray    # T x L x 22
    del_logits: np.ndarray   # T x L x 6

    @property
    def aa_probs(self) -> np.ndarray:
        return _softmax(self.aa_logits)

    @property
    def del_probs(self) -> np.ndarray:
        return _softmax(self.del_logits)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def deletion_transform(d):
    """(2/pi) * arctan(d / 3); works on scalars and arrays."""
    out = (2.0 / np.pi) * np.arctan(np.asarray(d, dtype=np.float64) / 3.0)
    return float(out) if np.ndim(out) == 0 else out


def discretize_deletion(v):
    """Bin transformed deletion values into 6 classes at edges 0.2, 0.35, 0.5, 0.65, 0.8."""
    out = np.searchsorted(DEL_BIN_EDGES, np.asarray(v, dtype=np.float64), side="right")
    return int(out) if np.ndim(out) == 0 else out.astype(np.int64)


def deletion_count_from_bin(b):
    """Invert a bin back to a deletion count through the bin center."""
    c = DEL_BIN_CENTERS[np.asarray(b, dtype=np.int64)]
    out = np.rint(3.0 * np.tan(np.pi * c / 2.0)).astype(np.int64)
    return int(out) if np.ndim(out) == 0 else out


def tokenize(msa: Msa) -> TokenGrid:
    tokens = msa.token_array().astype(np.int64)
    del_raw = msa.deletion_array()
    return TokenGrid(tokens, del_raw, deletion_transform(del_raw))


def grid_from_arrays(tokens, del_raw=None) -> TokenGrid:
    tokens = np.asarray(tokens, dtype=np.int64)
    if del_raw is None:
        del_raw = np.zeros_like(tokens)
    del_raw = np.asarray(del_raw, dtype=np.int64)
    return TokenGrid(tokens, del_raw, deletion_transform(del_raw))


def split_context_target(msa_or_depth, r_ctx: float, seed) -> ContextTargetSplit:
    """Seeded context/target split; the query (index 0) is always context.

    Context size is ``max(1, floor(r_ctx * N))``; the remaining context members
    are drawn uniformly without replacement, and targets are the complement.
    ``seed`` is an int or a :class:`SeedStream`.
    """
    if not 0.0 <= r_ctx <= 1.0:
        raise ValueError("r_ctx must lie in [0, 1]")
    n = msa_or_depth if isinstance(msa_or_depth, int) else len(msa_or_depth)
    n_ctx = max(1, int(math.floor(r_ctx * n)))
    stream = seed if isinstance(seed, SeedStream) else SeedStream(f"split/{int(seed)}")
    others = np.arange(1, n)
    # Uniform random keys + stable argsort = platform-independent permutation.
    keys = stream.uniform((n - 1,))
    picked = others[np.argsort(keys, kind="stable")][: n_ctx - 1]
    ctx = (0,) + tuple(sorted(int(i) for i in picked))
    chosen = set(ctx)
    tgt = tuple(i for i in range(n) if i not in chosen)
    return ContextTargetSplit(ctx, tgt, float(r_ctx))


def detokenize(out: OutputLogits, mode: str = "argmax", seed=None) -> list[AlignedRow]:
    """Turn readout logits into aligned rows.

    ``mode`` is ``"argmax"`` (lowest index wins ties) or ``"sample"`` (categorical
    draws from a seeded stream).
    """
    if mode == "argmax":
        aa = np.argmax(out.aa_logits, axis=-1)
        bins = np.argmax(out.del_logits, axis=-1)
    elif mode == "sample":
        stream = seed if isinstance(seed, SeedStream) else SeedStream(f"detok/{int(seed or 0)}")
        aa = _categorical(out.aa_probs, stream.fork("aa"))
        bins = _categorical(out.del_probs, stream.fork("del"))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    dels = deletion_count_from_bin(bins)
    rows = []
    for t in range(aa.shape[0]):
        rows.append(AlignedRow("".join(ALPHABET[i] for i in aa[t]), tuple(int(d) for d in dels[t])))
    return rows


def _categorical(probs: np.ndarray, stream: SeedStream) -> np.ndarray:
    u = stream.uniform(probs.shape[:-1])[..., None]
    cdf = np.cumsum(probs, axis=-1)
    idx = (u > cdf).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def one_hot_features(grid: TokenGrid, dtype=np.float32) -> np.ndarray:
    out = np.zeros(grid.tokens.shape + (VOCAB_SIZE,), dtype=dtype)
    np.put_along_axis(out, grid.tokens[..., None], 1, axis=-1)
    return out


# Feature container: magic, u32 header length, JSON header, float32 LE payload (N x L x 22).
FEATURE_MAGIC = b"EVGFEAT1"
FEATURE_VERSION = 1


class FeatureFormatError(ValueError):
    pass


@dataclass
class FeatureGrid:
    probs: np.ndarray   # N_out x L x 22 float32
    query: str

    @property
    def n_out(self) -> int:
        return self.probs.shape[0]

    @property
    def length(self) -> int:
        return self.probs.shape[1]


def export_features(grid: FeatureGrid, path) -> None:
    probs = np.ascontiguousarray(grid.probs, dtype="<f4")
    if probs.ndim != 3 or probs.shape[2] != VOCAB_SIZE:
        raise ValueError(f"feature grid must be N x L x {VOCAB_SIZE}, got {probs.shape}")
    header = json.dumps({
        "format_version": FEATURE_VERSION,
        "n_out": probs.shape[0],
        "length": probs.shape[1],
        "vocab": ALPHABET,
        "query": grid.query,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(probs.tobytes(order="C"))


def import_features(path) -> FeatureGrid:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != FEATURE_MAGIC:
        raise FeatureFormatError("not a feature container (bad magic)")
    if len(blob) < 12:
        raise FeatureFormatError("truncated feature container")
    (hlen,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + hlen:
        raise FeatureFormatError("truncated feature header")
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    if header.get("format_version") != FEATURE_VERSION:
        raise FeatureFormatError(f"unsupported feature format version {header.get('format_version')!r}")
    n, L = int(header["n_out"]), int(header["length"])
    payload = blob[12 + hlen:]
    expected = n * L * VOCAB_SIZE * 4
    if len(payload) != expected:
        raise FeatureFormatError(f"payload has {len(payload)} bytes, expected {expected}")
    probs = np.frombuffer(payload, dtype="<f4").reshape(n, L, VOCAB_SIZE).copy()
    return FeatureGrid(probs, header["query"])
