"""Offline benchmark against the keyword oracle.

The oracle's optimum is known (every feature keyword, no reversal cue), so
the checks here measure what the live-LLM setting cannot: convergence to
the optimum, selection quality against a random baseline, posterior
dynamics, reversal containment, cache economy and determinism.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .acquisition import AcquisitionConfig
from .annotator import BackendConfig, SimulatedBackend, SimulatedOracle
from .dataset import Example, partition
from .expansion import ExpansionConfig
from .optimizer import RunConfig, Trajectory, run
from .scorer import EvalCache, Scorer

FEATURE_KEYWORDS = ("context", "job title", "party", "credibility", "source", "factual accuracy")
REVERSAL_KEYWORDS = ("opposite label", "reverse the labels")
BASE_SEED = "Determine whether the Statement is a lie (Yes) or not (No) based on the context."
REVERSAL_SEED = ("Reverse the labels: answer with the opposite label. Weigh the context, job title, "
                 "party, credibility, source and factual accuracy.")
BENCH_SEEDS = (0, 1, 2, 3, 4)


def default_oracle(rng_seed=0, base=0.5, top=0.95, keywords=FEATURE_KEYWORDS):
    w = 1.0 / len(keywords)
    return SimulatedOracle({k: w for k in keywords}, base, top, REVERSAL_KEYWORDS, rng_seed)


def synthetic_examples(n=400, positive_rate=0.5, seed=0):
    """Placeholder statements with a fixed label mix; the oracle never reads the text."""
    rng = np.random.default_rng(seed)
    n_pos = int(round(n * positive_rate))
    labels = np.array([1] * n_pos + [0] * (n - n_pos))
    rng.shuffle(labels)
    return [Example(f"syn-{i}", f"Statement {i}: synthetic claim number {i}.", int(y))
            for i, y in enumerate(labels)]


def bench_config(rng_seed=0, rounds=10, seeds=(BASE_SEED,), **overrides):
    overrides.setdefault("acquisition", AcquisitionConfig())
    overrides.setdefault("expansion", ExpansionConfig())
    return RunConfig(rounds=rounds, seeds=tuple(seeds), rng_seed=rng_seed, **overrides)


@dataclass
class BenchRun:
    trajectory: Trajectory
    oracle: SimulatedOracle
    scorer: Scorer

    @property
    def final_expected_accuracy(self):
        return self.oracle.expected_accuracy(self.trajectory.summary["best_prompt"]["text"])

    def selected_sigmas(self):
        return [np.mean([s["sigma"] for s in r.selected]) for r in self.trajectory.rounds]


def run_simulated(rng_seed=0, config: RunConfig | None = None, control_size=75, eval_size=50,
                  n_examples=400, cache: EvalCache | None = None, kappa_fn=None, oracle=None):
    oracle = oracle or default_oracle(rng_seed)
    backend = SimulatedBackend(oracle, BackendConfig(rng_seed=rng_seed))
    part = partition(synthetic_examples(n_examples, seed=rng_seed), control_size, eval_size, rng_seed)
    scorer = Scorer(backend, cache)
    config = config or bench_config(rng_seed)
    traj = run(config, part, scorer, kappa_fn=kappa_fn)
    return BenchRun(traj, oracle, scorer)


# --- property checks ---------------------------------------------------------
# each returns (passed, detail)

def check_convergence(seeds=BENCH_SEEDS, target=0.9, min_hits=None):
    min_hits = len(seeds) - 1 if min_hits is None else min_hits
    finals = [run_simulated(s).final_expected_accuracy for s in seeds]
    hits = sum(f >= target for f in finals)
    return hits >= min_hits, {"final_expected": [round(f, 4) for f in finals], "hits": hits,
                              "required": min_hits}


def check_bo_vs_random(seeds=tuple(range(10)), kappa_fn=None):
    bo, rnd = [], []
    for s in seeds:
        bo.append(run_simulated(s, kappa_fn=kappa_fn).final_expected_accuracy)
        rnd.append(run_simulated(s, bench_config(s, selection="random")).final_expected_accuracy)
    return float(np.mean(bo)) >= float(np.mean(rnd)), {"bo_mean": round(float(np.mean(bo)), 4),
                                                       "random_mean": round(float(np.mean(rnd)), 4)}


def check_posterior_dynamics(seeds=BENCH_SEEDS):
    early, late = [], []
    for s in seeds:
        sig = run_simulated(s).selected_sigmas()
        early.append(np.mean(sig[:3]))
        late.append(np.mean(sig[-3:]))
    e, l = float(np.mean(early)), float(np.mean(late))
    return e > l, {"early_sigma": round(e, 4), "late_sigma": round(l, 4)}


def check_determinism(seeds=(0,)):
    details = {}
    for s in seeds:
        a = run_simulated(s).trajectory.dumps()
        b = run_simulated(s).trajectory.dumps()
        details[s] = a == b
    return all(details.values()), details


def check_reversal_containment(seeds=BENCH_SEEDS):
    ok, details = True, {}
    for s in seeds:
        cfg = bench_config(s, seeds=(BASE_SEED + " Consider the party.", REVERSAL_SEED))
        r = run_simulated(s, cfg)
        events = [e for rec in [r.trajectory.bootstrap] + r.trajectory.rounds
                  for e in rec.reversal_events]
        best = r.trajectory.summary["best_prompt"]
        flagged_ids = set(r.trajectory.summary["flagged"])
        good = bool(events) and best["id"] not in flagged_ids and not r.oracle.is_reversal(best["text"])
        details[s] = {"events": len(events), "best_flagged": best["id"] in flagged_ids}
        ok &= good
    return ok, details


def check_cache_economy(rng_seed=0):
    """Replay against a warm cache and verify the single-candidate call bound."""
    cache = EvalCache()
    first = run_simulated(rng_seed, cache=cache)
    replay = run_simulated(rng_seed, cache=cache)
    replay_calls = replay.scorer.backend_calls
    cfg = first.trajectory.header["config"]
    n_seeds = len(cfg["seeds"])
    n_ctrl, n_eval = first.trajectory.header["control_size"], first.trajectory.header["eval_size"]
    cand = sum(r.n_candidates_generated for r in first.trajectory.rounds)
    repeats = sum(r.repeats * len(r.selected) for r in first.trajectory.rounds)
    test_calls = first.trajectory.header["test_size"]
    bound = (n_seeds + cand) * n_ctrl + (n_seeds + repeats) * n_eval + test_calls
    used = first.scorer.backend_calls["classify"]
    eval_passes = n_seeds + repeats
    ok = (sum(replay_calls.values()) == 0 and used <= bound
          and eval_passes <= n_seeds + cfg["rounds"] * cfg["max_repeats"])
    return ok, {"replay_calls": replay_calls, "classify_calls": used, "bound": bound,
                "eval_passes": eval_passes}


def bench_matrix(n_seeds=10, kappa_fn=None):
    """Rows of (name, passed, detail) for the command-line benchmark."""
    seeds = tuple(range(n_seeds))
    rows = [("determinism", *check_determinism(seeds[:1]))]
    if n_seeds > 1:
        rows.append(("bo_vs_random", *check_bo_vs_random(seeds, kappa_fn=kappa_fn)))
        rows.append(("posterior_dynamics", *check_posterior_dynamics(seeds[:5])))
        rows.append(("convergence", *check_convergence(seeds[:5])))
        rows.append(("reversal_containment", *check_reversal_containment(seeds[:5])))
        rows.append(("cache_economy", *check_cache_economy(seeds[0])))
    return rows
