import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evogen.msa_io import (
    ALPHABET, GAP_ID, RARE_ID, VOCAB_SIZE, AlignedRow, Msa, MsaFormatError, coverage,
    hamming_distance, parse_a3m, read_a3m, save_a3m, sequence_identity, write_a3m,
)
from conftest import SMALL_A3M


def test_vocabulary():
    assert VOCAB_SIZE == 22 == len(set(ALPHABET))
    assert GAP_ID == 21 and RARE_ID == 20


def test_single_record():
    m = parse_a3m(">q\nMKV\n")
    assert m.depth == 1 and m.length == 3
    assert m.query.deletions == (0, 0, 0)


def test_gap_row():
    m = parse_a3m(">q\nMKV\n>h1\nM-V\n")
    assert m[1].symbols == "M-V" and m[1].deletions == (0, 0, 0)


def test_insertion_counts():
    m = parse_a3m(">q\nMKV\n>h1\nMaKV\n")
    assert m[1].symbols == "MKV" and m[1].deletions == (0, 1, 0)


def test_leading_and_trailing_insertions():
    m = parse_a3m(SMALL_A3M)
    assert m.depth == 4 and m.length == 10
    assert m[3].symbols == "ACDEYGHIKL"
    assert m[3].deletions[0] == 2
    assert m[1].symbols == "ACDFGHIK-L"
    assert m[1].deletions == (0, 0, 0, 1, 0, 0, 0, 0, 0, 0)


def test_rare_residues_map_to_x():
    m = parse_a3m(">q\nMBZUOJK\n")
    assert m.query.symbols == "MXXXXXK"


def test_headers_preserved():
    m = parse_a3m(">query id=1\nMK\n>hit two\nM-\n")
    assert m[0].header == "query id=1"
    assert write_a3m(m).startswith(">query id=1\n")


def test_write_depth_one():
    text = write_a3m(Msa.from_sequences(["MKV"]))
    assert text.count("\n") == 2


def test_write_insertion_before_column():
    m = Msa.from_sequences(["MKV", "MKV"], [[0, 0, 0], [0, 1, 0]])
    body = write_a3m(m).splitlines()[3]
    assert body[0] == "M" and body[1].islower() and body[2:] == "KV"
    assert parse_a3m(write_a3m(m)) == m


def test_gaps_preserved():
    m = Msa.from_sequences(["MKV", "--V"])
    assert "--V" in write_a3m(m)


def test_stream_io(tmp_path):
    m = parse_a3m(io.StringIO(SMALL_A3M))
    path = tmp_path / "x.a3m"
    save_a3m(m, path)
    assert read_a3m(path) == m


@pytest.mark.parametrize("text", [
    "",
    "MKV\n",
    ">q\nMKV\n>h\nMK\n",
    ">q\nM-V\n",
    ">q\nM1V\n",
])
def test_malformed(text):
    with pytest.raises((MsaFormatError, ValueError)):
        parse_a3m(text)


def test_row_validation():
    with pytest.raises(ValueError):
        AlignedRow("MK", (0,))
    with pytest.raises(ValueError):
        AlignedRow("MK", (0, -1))
    with pytest.raises(ValueError):
        Msa((AlignedRow.from_sequence("MK"), AlignedRow.from_sequence("M")))


def test_identity_examples():
    q = AlignedRow.from_sequence("MKVL")
    assert sequence_identity(q, q) == 1.0
    assert sequence_identity(AlignedRow.from_sequence("----"), q) == 0.0
    assert sequence_identity(AlignedRow.from_sequence("MK--"), q) == 0.5


def test_coverage_examples():
    assert coverage(AlignedRow.from_sequence("MKV")) == 1.0
    assert coverage(AlignedRow.from_sequence("---")) == 0.0
    assert coverage(AlignedRow.from_sequence("MKVLA-----")) == pytest.approx(0.5)
    assert coverage(AlignedRow.from_sequence("MKVLAC----")) == pytest.approx(0.6)


def test_hamming_examples():
    a = AlignedRow.from_sequence("MKV")
    assert hamming_distance(a, a) == 0
    assert hamming_distance(a, AlignedRow.from_sequence("M-V")) == 1
    assert hamming_distance(AlignedRow.from_sequence("AAAAAAA"), AlignedRow.from_sequence("CCCCCCC")) == 7
    with pytest.raises(ValueError):
        hamming_distance(a, AlignedRow.from_sequence("MK"))


residues = st.sampled_from(ALPHABET[:-1])


@st.composite
def msas(draw):
    length = draw(st.integers(1, 12))
    depth = draw(st.integers(1, 6))
    seqs = [draw(st.text(residues, min_size=length, max_size=length))]
    dels = [[0] * length]
    for _ in range(depth - 1):
        seqs.append(draw(st.text(st.sampled_from(ALPHABET), min_size=length, max_size=length)))
        dels.append(draw(st.lists(st.integers(0, 5), min_size=length, max_size=length)))
    return Msa.from_sequences(seqs, dels)


@settings(max_examples=60, deadline=None)
@given(msas())
def test_round_trip(m):
    assert parse_a3m(write_a3m(m)) == m


@settings(max_examples=60, deadline=None)
@given(msas())
def test_metric_bounds(m):
    q = m.query
    assert sequence_identity(q, q) == 1.0
    assert hamming_distance(q, q) == 0
    for r in m.rows:
        assert 0.0 <= sequence_identity(r, q) <= 1.0
        assert 0.0 <= coverage(r) <= 1.0
        assert hamming_distance(r, q) == hamming_distance(q, r)
