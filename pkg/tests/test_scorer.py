import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptbo.annotator import Prompt, SimulatedBackend, SimulatedOracle, unit_hash
from promptbo.bench import synthetic_examples
from promptbo.exceptions import BackendError, ContractError, EvaluationError
from promptbo.scorer import (EvalCache, PredictionVector, Scorer, batch_id, clarification_score,
                             detect_label_reversal, is_clarifying, reversal_stats)

P = Prompt("Is it a lie?")


class ScriptedBackend:
    """Correct exactly on the example ids in ``correct``; optional failure ids."""

    def __init__(self, correct, fail=()):
        self.correct, self.fail = set(correct), set(fail)
        self.calls = 0
        self.lock = threading.Lock()

    def classify(self, prompt, example):
        with self.lock:
            self.calls += 1
        if example.id in self.fail:
            raise BackendError("boom")
        return example.label if example.id in self.correct else 1 - example.label

    def complete(self, system, user, role=None, salt=0):
        with self.lock:
            self.calls += 1
        return f"echo {user}"


BATCH = synthetic_examples(50, seed=4)


def test_accuracy_29_of_50():
    picked = [e.id for i, e in enumerate(BATCH) if i % 5 != 0][:29]
    s = Scorer(ScriptedBackend(picked))
    assert s.accuracy(P, BATCH) == pytest.approx(0.58)


def test_perfect_prompt_vector():
    s = Scorer(ScriptedBackend([e.id for e in BATCH]))
    v = s.predict_vector(P, BATCH)
    assert v.bits == (1,) * 50 and v.accuracy == 1.0


def test_cache_hit_issues_no_calls():
    backend = ScriptedBackend([e.id for e in BATCH[:20]])
    s = Scorer(backend)
    first = s.predict_vector(P, BATCH)
    calls = backend.calls
    assert s.predict_vector(P, BATCH) == first
    assert backend.calls == calls == 50
    assert s.backend_calls == {"classify": 50, "complete": 0}


def test_repeats_on_deterministic_backend(backend, base_prompt):
    s = Scorer(backend)
    one = s.accuracy(base_prompt, BATCH, repeats=1)
    assert s.evaluate(base_prompt, BATCH, repeats=3) == (pytest.approx(one), 3)
    assert s.classify_calls == 150
    # fewer requested repeats than stored passes reuse all passes
    assert s.evaluate(base_prompt, BATCH, repeats=1)[1] == 3


def test_alternating_bits_fixture():
    # search the hash seed so that a c = 0.5 prompt is right exactly on even positions
    control = synthetic_examples(6, seed=2)
    p = Prompt("No cues at all.")
    seed = next(s for s in range(100000)
                if all((unit_hash(p.id, e.id, s) < 0.5) == (i % 2 == 0) for i, e in enumerate(control)))
    oracle = SimulatedOracle({"unused": 1.0}, 0.5, 1.0, rng_seed=seed)
    assert oracle.correctness_probability(p.text) == 0.5
    v = Scorer(SimulatedBackend(oracle)).predict_vector(p, control)
    assert v.bits == (1, 0, 1, 0, 1, 0)


def test_evaluation_error_names_example_and_keeps_partial():
    bad = BATCH[7].id
    backend = ScriptedBackend([], fail=[bad])
    s = Scorer(backend)
    with pytest.raises(EvaluationError) as info:
        s.labels(P, BATCH)
    assert info.value.example_id == bad
    backend.fail.clear()
    s.labels(P, BATCH)
    assert backend.calls == 8 + 43  # examples before the failure stay cached


def test_concurrent_scoring_matches_serial(backend, base_prompt):
    serial = Scorer(backend).predict_vector(base_prompt, BATCH)
    par = Scorer(backend, max_workers=8)
    assert par.predict_vector(base_prompt, BATCH) == serial
    assert par.classify_calls == 50


def test_cache_persistence(tmp_path, backend, base_prompt):
    path = tmp_path / "cache.jsonl"
    s = Scorer(backend, EvalCache(path))
    acc = s.accuracy(base_prompt, BATCH, repeats=2)
    text = s.complete("sys", "user", role="chat")
    warm = Scorer(backend, EvalCache.load(path))
    assert warm.accuracy(base_prompt, BATCH, repeats=2) == acc
    assert warm.complete("sys", "user", role="chat") == text
    assert warm.backend_calls == {"classify": 0, "complete": 0}


def test_corrupt_cache_file(tmp_path):
    path = tmp_path / "cache.jsonl"
    path.write_text('{"kind": "pass"}\n')
    with pytest.raises(ValueError, match="record 0"):
        EvalCache.load(path)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 49), st.integers(1, 12), st.integers(1, 3)),
                min_size=1, max_size=8))
def test_cache_soundness(calls):
    """Backend calls equal the number of distinct (prompt, example, repeat) triples."""
    prompts = [Prompt(f"prompt {i}") for i in range(3)]
    backend = ScriptedBackend([e.id for e in BATCH[::2]])
    s = Scorer(backend)
    triples = set()
    for pi, start, size, reps in calls:
        batch = BATCH[start:start + size]
        s.evaluate(prompts[pi], batch, repeats=reps)
        n_passes = len(s.cache.passes(prompts[pi].id, batch_id(batch)))
        triples |= {(pi, e.id, r) for e in batch for r in range(n_passes)}
    assert backend.calls == len(triples)


def test_prediction_vector_mean_matches_prior(backend, base_prompt):
    from promptbo.surrogate import prior_mean
    v = Scorer(backend).predict_vector(base_prompt, BATCH)
    assert prior_mean(v) == sum(v.bits) / len(v.bits) == v.accuracy


# --- reversal ------------------------------------------------------------------

def vec(bits, predicted):
    return PredictionVector("x", tuple(bits), tuple(predicted))


def truth(n):
    return [i % 2 for i in range(n)]


def test_perfect_reversal_flagged():
    y = truth(20)
    reference = vec([1] * 20, y)
    candidate = vec([0] * 20, [1 - t for t in y])
    assert detect_label_reversal(candidate, reference)
    assert not detect_label_reversal(reference, reference)


def test_fifty_bit_fixture():
    y = truth(50)
    pred = [t if i < 20 else 1 - t for i, t in enumerate(y)]
    cand = vec([int(p == t) for p, t in zip(pred, y)], pred)
    ref_pred = [1 - p if i < 31 else p for i, p in enumerate(pred)]
    ref = vec([int(p == t) for p, t in zip(ref_pred, y)], ref_pred)
    acc, flipped, disagree = reversal_stats(cand, ref)
    assert (acc, flipped, disagree) == (pytest.approx(0.40), pytest.approx(0.60), pytest.approx(0.62))
    assert detect_label_reversal(cand, ref, threshold=0.15)
    assert not detect_label_reversal(cand, ref, threshold=0.25)


def test_bad_but_agreeing_prompt_not_flagged():
    y = truth(20)
    pred = [1 - t if i < 14 else t for i, t in enumerate(y)]
    bad = vec([int(p == t) for p, t in zip(pred, y)], pred)
    assert not detect_label_reversal(bad, bad)


def test_length_mismatch():
    with pytest.raises(ContractError):
        reversal_stats(vec([1], [1]), vec([1, 0], [1, 0]))


def test_reversal_detector_complete_on_oracle():
    ex = synthetic_examples(75, seed=5)
    kws = {"a": 0.5, "b": 0.5}
    oracle = SimulatedOracle(kws, 0.5, 1.0, ("swap",))
    s = Scorer(SimulatedBackend(oracle))
    ref = s.predict_vector(Prompt("Use a."), ex)
    assert ref.accuracy > 0.5 + 0.15
    rev = s.predict_vector(Prompt("Use a and b, then swap."), ex)
    assert detect_label_reversal(rev, ref)


# --- clarification -----------------------------------------------------------

class CannedChat:
    def __init__(self, replies):
        self.replies = replies

    def complete(self, system, user, role=None, salt=0):
        return self.replies[user]


@pytest.mark.parametrize("n_clarify,expected", [(5, 1.0), (0, 0.0), (3, 0.6)])
def test_clarification_score(n_clarify, expected):
    queries = [f"q{i}" for i in range(5)]
    replies = {q: ("Which one do you mean?" if i < n_clarify else "Here is the answer.")
               for i, q in enumerate(queries)}
    assert clarification_score(P, queries, Scorer(CannedChat(replies))) == pytest.approx(expected)


@pytest.mark.parametrize("text,expected", [
    ("Could you clarify which city you mean?", True),
    ("Which year?", True),
    ("Paris is nice?", False),
    ("Which year do you mean.", False),
])
def test_is_clarifying(text, expected):
    assert is_clarifying(text) is expected
