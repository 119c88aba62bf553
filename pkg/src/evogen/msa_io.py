"""A3M/FASTA parsing and the row-comparison primitives used by trimming.

An :class:`Msa` is an immutable value: a query row followed by aligned homologs,
each row carrying its aligned symbols plus the number of insertions (deletions
relative to the query) that precede every aligned column.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO, Union

import numpy as np

# Token order is fixed: 20 canonical residues, rare residue 'X' (20), gap '-' (21).
AMINO_ACIDS = "ARNDCQEGHILKMFPSTWYV"
RARE = "X"
GAP = "-"
ALPHABET = AMINO_ACIDS + RARE + GAP
VOCAB_SIZE = len(ALPHABET)
RARE_ID = ALPHABET.index(RARE)
GAP_ID = ALPHABET.index(GAP)

# Nonstandard residues collapse onto the rare symbol.
_NONSTANDARD = "BZUOJ"


class MsaFormatError(ValueError):
    """Raised for malformed alignment text."""


@dataclass(frozen=True)
class AlignedRow:
    symbols: str
    deletions: tuple[int, ...]
    header: str = ""

    def __post_init__(self):
        if len(self.symbols) != len(self.deletions):
            raise ValueError(
                f"row has {len(self.symbols)} symbols but {len(self.deletions)} deletion counts"
            )
        if any(d < 0 for d in self.deletions):
            raise ValueError("deletion counts must be non-negative")
        bad = set(self.symbols) - set(ALPHABET)
        if bad:
            raise ValueError(f"illegal symbols {sorted(bad)!r}")

    def __len__(self) -> int:
        return len(self.symbols)

    @classmethod
    def from_sequence(cls, seq: str, deletions: Sequence[int] | None = None, header: str = ""):
        if deletions is None:
            deletions = (0,) * len(seq)
        return cls(seq, tuple(int(d) for d in deletions), header)


@dataclass(frozen=True)
class Msa:
    rows: tuple[AlignedRow, ...]
    _length: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        rows = tuple(self.rows)
        object.__setattr__(self, "rows", rows)
        if not rows:
            raise ValueError("an MSA needs at least the query row")
        length = len(rows[0])
        for i, row in enumerate(rows):
            if len(row) != length:
                raise ValueError(f"row {i} has length {len(row)}, query has {length}")
        query = rows[0]
        if GAP in query.symbols:
            raise ValueError("query row must not contain gaps")
        if any(query.deletions):
            raise ValueError("query row must not carry deletions")
        object.__setattr__(self, "_length", length)

    @property
    def depth(self) -> int:
        return len(self.rows)

    @property
    def length(self) -> int:
        return self._length

    @property
    def query(self) -> AlignedRow:
        return self.rows[0]

    def __len__(self) -> int:
        return len(self.rows)

    def __getitem__(self, i):
        return self.rows[i]

    def select(self, indices: Iterable[int]) -> "Msa":
        return Msa(tuple(self.rows[i] for i in indices))

    def crop(self, start: int, stop: int) -> "Msa":
        return Msa(tuple(
            AlignedRow(r.symbols[start:stop], r.deletions[start:stop], r.header) for r in self.rows
        ))

    def token_array(self) -> np.ndarray:
        """N x L int8 token ids."""
        lut = np.full(128, -1, dtype=np.int8)
        for i, ch in enumerate(ALPHABET):
            lut[ord(ch)] = i
        buf = np.frombuffer("".join(r.symbols for r in self.rows).encode("ascii"), dtype=np.uint8)
        return lut[buf].reshape(self.depth, self.length)

    def deletion_array(self) -> np.ndarray:
        return np.array([r.deletions for r in self.rows], dtype=np.int64).reshape(self.depth, self.length)

    @classmethod
    def from_sequences(cls, seqs: Sequence[str], deletions: Sequence[Sequence[int]] | None = None) -> "Msa":
        if deletions is None:
            return cls(tuple(AlignedRow.from_sequence(s) for s in seqs))
        return cls(tuple(AlignedRow.from_sequence(s, d) for s, d in zip(seqs, deletions)))


def _normalize_residue(ch: str) -> str:
    if ch in _NONSTANDARD:
        return RARE
    return ch


def _records(lines: Iterable[str]):
    header = None
    chunks: list[str] = []
    for raw in lines:
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith(">"):
            if header is not None:
                yield header, "".join(chunks)
            header, chunks = line[1:], []
        else:
            if header is None:
                raise MsaFormatError("sequence data before the first '>' header")
            chunks.append(line)
    if header is not None:
        yield header, "".join(chunks)


def _parse_record(seq: str, lineno: int) -> tuple[str, tuple[int, ...]]:
    symbols = []
    deletions = []
    pending = 0
    for ch in seq:
        if ch.islower():
            if ch.upper() not in AMINO_ACIDS and ch.upper() not in _NONSTANDARD + RARE:
                raise MsaFormatError(f"record {lineno}: illegal insertion character {ch!r}")
            pending += 1
        elif ch == ".":
            # A3M padding for insert columns; not part of the alignment.
            continue
        else:
            sym = _normalize_residue(ch)
            if sym not in ALPHABET:
                raise MsaFormatError(f"record {lineno}: illegal character {ch!r}")
            symbols.append(sym)
            deletions.append(pending)
            pending = 0
    # Trailing insertions after the last aligned column have no column to attach to.
    return "".join(symbols), tuple(deletions)


def parse_a3m(text: Union[str, TextIO]) -> Msa:
    """Parse A3M (or plain aligned FASTA) text into an :class:`Msa`.

    Lowercase letters are insertions relative to the query; each run is dropped
    from the alignment and counted as deletions on the next aligned column.
    """
    if isinstance(text, str):
        text = io.StringIO(text)
    rows = []
    for n, (header, seq) in enumerate(_records(text)):
        symbols, deletions = _parse_record(seq, n)
        if n == 0:
            if GAP in symbols:
                raise MsaFormatError("first record (query) contains gaps")
            if any(deletions):
                raise MsaFormatError("first record (query) contains insertions")
            if not symbols:
                raise MsaFormatError("query sequence is empty")
        elif len(symbols) != len(rows[0].symbols):
            raise MsaFormatError(
                f"record {n} ({header!r}) has aligned length {len(symbols)}, "
                f"query has {len(rows[0].symbols)}"
            )
        rows.append(AlignedRow(symbols, deletions, header))
    if not rows:
        raise MsaFormatError("empty input: no records found")
    return Msa(tuple(rows))


def read_a3m(path) -> Msa:
    with open(path, "r", encoding="ascii") as fh:
        return parse_a3m(fh)


def write_a3m(msa: Msa, out: TextIO | None = None) -> str:
    """Serialize to A3M; insertions are re-emitted as lowercase 'x' runs.

    The original inserted residues are not retained (only their counts), so the
    round trip is exact on symbols and deletion counts.
    """
    lines = []
    for row in msa.rows:
        lines.append(">" + row.header)
        parts = []
        for sym, d in zip(row.symbols, row.deletions):
            if d:
                parts.append("x" * d)
            parts.append(sym)
        lines.append("".join(parts))
    text = "\n".join(lines) + "\n"
    if out is not None:
        out.write(text)
    return text


def save_a3m(msa: Msa, path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        write_a3m(msa, fh)


def _check_lengths(a: AlignedRow, b: AlignedRow) -> None:
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")


def sequence_identity(row: AlignedRow, query: AlignedRow) -> float:
    """Fraction of the full aligned length where ``row`` matches ``query`` with a non-gap.

    Gap positions count as mismatches.
    """
    _check_lengths(row, query)
    if not len(row):
        return 0.0
    matches = sum(1 for a, b in zip(row.symbols, query.symbols) if a == b and a != GAP)
    return matches / len(row)


def coverage(row: AlignedRow) -> float:
    if not len(row):
        return 0.0
    return sum(1 for a in row.symbols if a != GAP) / len(row)


def hamming_distance(a: AlignedRow, b: AlignedRow) -> int:
    """Positions where the symbols differ; the gap is an ordinary symbol here."""
    _check_lengths(a, b)
    return sum(1 for x, y in zip(a.symbols, b.symbols) if x != y)
