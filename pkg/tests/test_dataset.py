import io
import json
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptbo.dataset import (Example, dump_ethos, dump_liar, load_examples, load_manifest,
                              parse_ethos, parse_liar, partition, save_manifest, stratified_counts)
from promptbo.exceptions import DataValidationError, ParseError, PartitionError

LIAR_TEXT = ("Statement: Says the Annies List political group supports third-trimester abortions "
             "on demand.\nJob title: State representative\nState: Texas\nParty: republican\n"
             "Context: a mailer")
LIAR_LINE = json.dumps({"label": 1, "text": LIAR_TEXT})
ETHOS_LINE = "Gosh you guys are getting less funny with each episode.;0.0"


def labeled(n0, n1):
    return [Example(f"e{i}", f"text {i}", 0 if i < n0 else 1) for i in range(n0 + n1)]


class TestParseLiar:
    def test_reference_record(self):
        (ex,) = parse_liar(LIAR_LINE.encode())
        assert ex.label == 1
        assert ex.text == LIAR_TEXT
        assert "\n" in ex.text

    def test_empty(self):
        assert parse_liar(b"") == []
        assert parse_liar("\n\n") == []

    def test_two_lines_keep_order(self):
        src = '{"label": 0, "text": "first"}\n{"label": 1, "text": "second"}\n'
        out = parse_liar(io.BytesIO(src.encode()))
        assert [(e.text, e.label) for e in out] == [("first", 0), ("second", 1)]
        assert out[0].id != out[1].id

    def test_malformed_line_number(self):
        src = '{"label": 0, "text": "ok"}\n{"label": 1, "text": \n'
        with pytest.raises(ParseError) as info:
            parse_liar(src)
        assert info.value.line == 2
        assert "line 2" in str(info.value)

    def test_missing_field(self):
        with pytest.raises(ParseError):
            parse_liar('{"text": "no label"}')

    def test_label_out_of_range(self):
        with pytest.raises(DataValidationError):
            parse_liar('{"label": 3, "text": "x"}')


class TestParseEthos:
    def test_reference_record(self):
        (ex,) = parse_ethos(ETHOS_LINE)
        assert ex.label == 0
        assert ex.text == "Gosh you guys are getting less funny with each episode."

    def test_boundary_score(self):
        (ex,) = parse_ethos("x;1.0")
        assert (ex.text, ex.label) == ("x", 1)

    def test_last_separator(self):
        (ex,) = parse_ethos("a;b;0.7")
        assert (ex.text, ex.label) == ("a;b", 1)

    def test_threshold_is_inclusive(self):
        assert parse_ethos("x;0.5")[0].label == 1
        assert parse_ethos("x;0.4999")[0].label == 0

    @pytest.mark.parametrize("bad", ["no separator here", "text;high"])
    def test_errors_carry_line(self, bad):
        with pytest.raises(ParseError) as info:
            parse_ethos("fine;0.1\n" + bad)
        assert info.value.line == 2


def test_example_rejects_bad_labels():
    with pytest.raises(DataValidationError):
        Example("a", "t", 2)
    with pytest.raises(DataValidationError):
        Example("a", "t", True)


def test_load_examples(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text(LIAR_LINE + "\n")
    assert load_examples(p, "liar")[0].text == LIAR_TEXT
    q = tmp_path / "q.txt"
    q.write_text("Where is it?\nHow long?\n")
    assert [e.label for e in load_examples(q, "clarification")] == [1, 1]


class TestPartition:
    def test_balanced(self):
        part = partition(labeled(50, 50), 10, 20, rng_seed=0)
        assert Counter(e.label for e in part.control) == {0: 5, 1: 5}

    def test_imbalanced_counts(self):
        part = partition(labeled(73, 27), 75, 10, rng_seed=0)
        c = Counter(e.label for e in part.control)
        assert (c[0], c[1]) == (55, 20)
        assert stratified_counts([73, 27], 75) == [55, 20]

    def test_deterministic(self):
        ex = labeled(40, 60)
        assert partition(ex, 20, 30, 5) == partition(ex, 20, 30, 5)
        assert partition(ex, 20, 30, 5).control != partition(ex, 20, 30, 6).control

    def test_size_error(self):
        with pytest.raises(PartitionError):
            partition(labeled(5, 5), 8, 5, 0)

    def test_single_class(self):
        with pytest.raises(PartitionError):
            partition(labeled(10, 0), 3, 3, 0)
        assert len(partition(labeled(10, 0), 3, 3, 0, stratify=False).control) == 3

    def test_duplicate_ids(self):
        ex = labeled(3, 3) + [Example("e0", "dup", 1)]
        with pytest.raises(DataValidationError):
            partition(ex, 2, 2, 0)

    def test_manifest_round_trip(self, tmp_path):
        ex = labeled(30, 30)
        part = partition(ex, 10, 10, 3)
        digest = save_manifest(part, tmp_path / "m.json")
        back = load_manifest(tmp_path / "m.json", ex)
        assert back == part and back.manifest_hash() == digest


@settings(max_examples=60, deadline=None)
@given(n0=st.integers(1, 60), n1=st.integers(1, 60), frac=st.floats(0.05, 0.6),
       seed=st.integers(0, 2**31 - 1))
def test_partition_invariants(n0, n1, frac, seed):
    ex = labeled(n0, n1)
    n = n0 + n1
    control = max(1, int(frac * n))
    evals = max(1, (n - control) // 2)
    if control + evals > n:
        return
    part = partition(ex, control, evals, seed)
    ids = [e.id for e in part.control + part.eval + part.test]
    assert len(ids) == len(set(ids)) == n
    assert len(part.control) == control and len(part.eval) == evals
    c = Counter(e.label for e in part.control)
    assert abs(c[0] - control * n0 / n) <= 1
    assert abs(c[1] - control * n1 / n) <= 1


texts = st.text(st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=40)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(texts, st.integers(0, 1)), max_size=12))
def test_liar_round_trip(items):
    ex = [Example(f"liar-{i}", t, y) for i, (t, y) in enumerate(items)]
    assert parse_liar(dump_liar(ex)) == ex


ethos_text = st.text(st.characters(blacklist_categories=("Cs", "Cc", "Zl", "Zp")), min_size=1, max_size=40)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(ethos_text, st.integers(0, 1)), max_size=12))
def test_ethos_round_trip(items):
    ex = [Example(f"ethos-{i}", t, y) for i, (t, y) in enumerate(items)]
    assert parse_ethos(dump_ethos(ex)) == ex
