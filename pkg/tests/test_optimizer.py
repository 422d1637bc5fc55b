import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from promptbo.acquisition import AcquisitionConfig
from promptbo.annotator import Prompt, SimulatedBackend
from promptbo.bench import BASE_SEED, bench_config, default_oracle, run_simulated, synthetic_examples
from promptbo.dataset import partition
from promptbo.exceptions import BackendError, ContractError, RunAborted
from promptbo.optimizer import PromptSearch, RunConfig, Trajectory, TrajectoryWriter, run, update_seeds
from promptbo.scorer import Observation, PredictionVector, Scorer

ALL = "Weigh the context, job title, party, credibility, source and factual accuracy."


def obs(text, acc):
    p = Prompt(text)
    return Observation(p, acc, 1, PredictionVector(p.id, (1,), (1,)))


class TestUpdateSeeds:
    def test_undersized_pool(self):
        cache = [obs("a", 0.5), obs("b", 0.6)]
        assert [p.text for p in update_seeds(cache, 3)] == ["b", "a"]

    def test_flagged_excluded(self):
        cache = [obs("a", 0.5), obs("b", 0.9), obs("c", 0.6)]
        out = update_seeds(cache, 2, flagged_ids={Prompt("b").id})
        assert [p.text for p in out] == ["c", "a"]

    def test_five_entries(self):
        cache = [obs("p1", 0.52), obs("p2", 0.60), obs("p3", 0.48), obs("p4", 0.60), obs("p5", 0.57)]
        # 0.60 tie keeps cache order: p2 before p4
        assert [p.text for p in update_seeds(cache, 3)] == ["p2", "p4", "p5"]

    def test_all_flagged_falls_back(self):
        cache = [obs("a", 0.5)]
        fallback = [Prompt("seed")]
        assert update_seeds(cache, 3, {Prompt("a").id}, fallback) == fallback

    def test_empty_cache(self):
        with pytest.raises(ContractError):
            update_seeds([], 3)


def small_part(seed=0, n=160):
    return partition(synthetic_examples(n, seed=seed), 30, 25, seed)


def small_run(rng_seed=0, top=0.95, **overrides):
    overrides.setdefault("rounds", 4)
    cfg = bench_config(rng_seed, **overrides)
    scorer = Scorer(SimulatedBackend(default_oracle(rng_seed, top=top)))
    return run(cfg, small_part(rng_seed), scorer), scorer


def test_saturated_start():
    traj, _ = small_run(top=1.0, rounds=1, seeds=(ALL,))
    assert traj.bootstrap.best_so_far == 1.0
    (rnd,) = traj.rounds
    assert 0 < rnd.n_candidates_generated <= 2
    assert all(s["origin"] == "mc_paraphrase" for s in rnd.selected)


def test_determinism():
    a, _ = small_run(3)
    b, _ = small_run(3)
    assert a.dumps() == b.dumps()


@settings(max_examples=6, deadline=None)
@given(st.integers(0, 10_000))
def test_round_invariants(rng_seed):
    traj, scorer = small_run(rng_seed)
    best = traj.best_so_far
    assert all(x <= y for x, y in zip(best, best[1:]))
    assert traj.summary["n_observations"] == 1 + 4
    cfg = traj.header["config"]
    for rec in traj.rounds:
        assert rec.n_candidates_generated <= cfg["expansion"]["n_seeds"] * 12
        assert len(rec.selected) == 1
        assert 0.5 - 1e-12 <= rec.kappa <= 2.0
    c, e = traj.header["control_size"], traj.header["eval_size"]
    cands = sum(r.n_candidates_generated for r in traj.rounds)
    passes = 1 + sum(r.repeats for r in traj.rounds)
    assert scorer.classify_calls <= (1 + cands) * c + passes * e + traj.header["test_size"]


def test_batch_and_random_modes():
    traj, _ = small_run(acquisition=AcquisitionConfig(batch_m=2))
    assert all(len(r.selected) == 2 for r in traj.rounds)
    assert traj.summary["n_observations"] == 1 + 2 * 4
    rnd, _ = small_run(selection="random")
    assert len(rnd.rounds) == 4


def test_ei_and_fixed_hypers():
    traj, _ = small_run(acquisition=AcquisitionConfig(kind="ei"), optimize_hypers=False)
    assert {r.surrogate["R"] for r in traj.rounds} == {1.0}
    assert traj.rounds[-1].surrogate["n_observations"] == 4


class ConstantRoles:
    """Every edit and paraphrase returns the same text."""

    def __init__(self, inner):
        self.inner = inner

    def classify(self, prompt, example):
        return self.inner.classify(prompt, example)

    def complete(self, system, user, role=None, salt=0):
        return "Same prompt." if role in ("edit", "paraphrase") else self.inner.complete(system, user, role, salt)


def test_early_termination_when_exhausted():
    scorer = Scorer(ConstantRoles(SimulatedBackend(default_oracle(top=1.0))))
    traj = run(bench_config(0, rounds=5, seeds=(ALL,)), small_part(), scorer)
    assert traj.summary["early_termination"].startswith("expansion exhausted")
    assert len(traj.rounds) == 1
    assert traj.rounds[0].selected[0]["text"] == "Same prompt."


class FailingBackend:
    def __init__(self, inner, budget):
        self.inner, self.budget = inner, budget

    def classify(self, prompt, example):
        self.budget -= 1
        if self.budget < 0:
            raise BackendError("quota exhausted")
        return self.inner.classify(prompt, example)

    def complete(self, *a, **kw):
        return self.inner.complete(*a, **kw)


def test_abort_keeps_trajectory(tmp_path):
    scorer = Scorer(FailingBackend(SimulatedBackend(default_oracle()), budget=400))
    writer = TrajectoryWriter(tmp_path / "t.jsonl")
    with pytest.raises(RunAborted) as info:
        run(bench_config(0, rounds=10), small_part(), scorer, writer=writer)
    traj = info.value.trajectory
    assert traj is not None and "aborted" in traj.summary["early_termination"]
    on_disk = Trajectory.loads((tmp_path / "t.jsonl").read_text())
    assert len(on_disk.rounds) == len(traj.rounds) < 10


def test_trajectory_round_trip(tmp_path):
    traj, _ = small_run(rounds=2)
    path = tmp_path / "t.jsonl"
    traj.write(path)
    back = Trajectory.loads(path.read_text())
    assert back.dumps() == traj.dumps()


def test_trajectory_writer_matches_dumps(tmp_path):
    cfg = bench_config(1, rounds=2)
    writer = TrajectoryWriter(tmp_path / "t.jsonl")
    traj = run(cfg, small_part(1), Scorer(SimulatedBackend(default_oracle(1))), writer=writer)
    assert (tmp_path / "t.jsonl").read_text() == traj.dumps()


def test_corrupt_trajectory():
    good = small_run(rounds=1)[0].dumps().splitlines()
    with pytest.raises(ValueError, match="record 2"):
        Trajectory.loads("\n".join(good[:2] + ["{not json"] + good[2:]))
    with pytest.raises(ValueError, match="record 1"):
        Trajectory.loads("\n".join([good[0], json.dumps({"kind": "mystery"})]))


def test_reversal_seed_is_flagged_and_never_best():
    r = run_simulated(2, bench_config(2, rounds=3, seeds=(BASE_SEED + " Consider the party.",
                                                         "Reverse the labels. " + ALL)))
    flagged = set(r.trajectory.summary["flagged"])
    assert r.trajectory.bootstrap.reversal_events
    assert r.trajectory.summary["best_prompt"]["id"] not in flagged
    assert all(r.trajectory.bootstrap.reversal_events[0]["id"] not in rec.seed_pool_after
               for rec in [r.trajectory.bootstrap] + r.trajectory.rounds)


def test_run_config_validation():
    with pytest.raises(ContractError):
        RunConfig(seeds=())
    with pytest.raises(ContractError):
        RunConfig(seeds=("x",), selection="greedy")


class TestPromptSearch:
    def data(self):
        ex = synthetic_examples(200, seed=5)
        return [e.text for e in ex], [e.label for e in ex]

    def test_fit_score(self):
        X, y = self.data()
        est = PromptSearch(SimulatedBackend(default_oracle()), seeds=(BASE_SEED,), rounds=3,
                           control_size=40, eval_size=30)
        est.fit(X, y)
        assert est.best_accuracy_ == est.trajectory_.summary["best_eval_accuracy"]
        assert 0.5 <= est.score(X, y) <= 1.0
        assert est.predict(X[:5]).shape == (5,)

    def test_params(self):
        est = PromptSearch(seeds=("a",), rounds=2)
        assert clone(est).get_params()["rounds"] == 2
        with pytest.raises(ContractError):
            est.fit(["x"] * 10, [0, 1] * 5)
