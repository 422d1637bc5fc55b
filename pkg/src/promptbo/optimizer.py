"""The Bayesian-optimization loop over prompts.

Each round fits the GP on every cached observation, expands the current
seed pool into candidates, embeds the candidates by their prediction
vectors on the control batch, and evaluates the acquisition winner(s) on
the evaluation batch. The trajectory of the run is kept as plain records
that serialize to JSON lines.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .acquisition import AcquisitionConfig, kappa_schedule, rank
from .annotator import Prompt
from .dataset import Example, Partition, partition as make_partition
from .exceptions import (BackendError, ContractError, EvaluationError, ExpansionError,
                         ExpansionExhausted, RunAborted)
from .expansion import DEFAULT_TEMPLATES, ExpansionConfig, expand, mc_paraphrase
from .scorer import DEFAULT_REVERSAL_THRESHOLD, Observation, Scorer, reversal_stats
from .surrogate import (DEFAULT_SIGMA_MIN, METHODS, KernelParams, Posterior, PredictionVectorGP,
                        posterior_arrays)

logger = logging.getLogger(__name__)

TRAJECTORY_VERSION = 1
SELECTIONS = ("acquisition", "random")


@dataclass(frozen=True)
class RunConfig:
    rounds: int = 10
    seeds: tuple[str, ...] = ()
    acquisition: AcquisitionConfig = field(default_factory=AcquisitionConfig)
    expansion: ExpansionConfig = field(default_factory=ExpansionConfig)
    kernel_init: KernelParams = field(default_factory=KernelParams)
    sigma_min: float = DEFAULT_SIGMA_MIN
    repeat_margin: float = 0.02
    max_repeats: int = 3
    optimize_hypers: bool = True
    hyper_steps: int = 100
    hyper_learning_rate: float = 0.1
    hyper_method: str = "lbfgs"
    reversal_threshold: float = DEFAULT_REVERSAL_THRESHOLD
    selection: str = "acquisition"
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(self.seeds))
        if self.rounds < 1:
            raise ContractError("run.rounds must be >= 1")
        if not self.seeds:
            raise ContractError("run.seeds needs at least one prompt")
        if self.max_repeats < 1:
            raise ContractError("run.max_repeats must be >= 1")
        if self.hyper_method not in METHODS:
            raise ContractError(f"run.hyper_method must be one of {METHODS}")
        if self.selection not in SELECTIONS:
            raise ContractError(f"run.selection must be one of {SELECTIONS}")

    def to_dict(self):
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d


@dataclass
class RoundRecord:
    round_index: int
    kappa: float | None
    candidates: list = field(default_factory=list)  # [{id, mu, sigma, score}]
    selected: list = field(default_factory=list)  # [{id, text, origin, parent_id, mu, sigma, ...}]
    best_so_far: float = 0.0
    best_prompt_id: str | None = None
    seed_pool_after: list = field(default_factory=list)
    backend_calls: dict = field(default_factory=dict)
    surrogate: dict = field(default_factory=dict)
    reversal_events: list = field(default_factory=list)
    n_candidates_generated: int = 0
    repeats: int = 1
    warnings: list = field(default_factory=list)

    @property
    def selected_ids(self):
        return [s["id"] for s in self.selected]

    def to_dict(self):
        return {"kind": "round", **asdict(self)}

    @classmethod
    def from_dict(cls, d):
        d = {k: v for k, v in d.items() if k != "kind"}
        return cls(**d)


@dataclass
class Trajectory:
    header: dict
    bootstrap: RoundRecord
    rounds: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def records(self):
        yield {"kind": "header", **self.header}
        yield self.bootstrap.to_dict()
        for r in self.rounds:
            yield r.to_dict()
        if self.summary:
            yield {"kind": "summary", **self.summary}

    def dumps(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n"
                       for r in self.records())

    def write(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @property
    def best_so_far(self):
        return [self.bootstrap.best_so_far] + [r.best_so_far for r in self.rounds]

    @classmethod
    def loads(cls, text: str) -> "Trajectory":
        header, boot, rounds, summary = None, None, [], {}
        for i, line in enumerate(text.splitlines()):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                kind = rec.pop("kind")
                if kind == "header":
                    header = rec
                elif kind == "round" and boot is None:
                    boot = RoundRecord.from_dict(rec)
                elif kind == "round":
                    rounds.append(RoundRecord.from_dict(rec))
                elif kind == "summary":
                    summary = rec
                else:
                    raise ValueError(f"unknown record kind {kind!r}")
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"corrupt trajectory record {i}: {exc}") from None
        if header is None or boot is None:
            raise ValueError("trajectory lacks a header or bootstrap record")
        return cls(header, boot, rounds, summary)


class TrajectoryWriter:
    """Append records to a JSON-lines file as the run progresses."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.write_text("", encoding="utf-8")

    def write(self, record: dict):
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")


def update_seeds(observations: Sequence[Observation], n_seeds: int, flagged_ids=(),
                 fallback: Sequence[Prompt] = ()) -> list[Prompt]:
    """Top ``n_seeds`` cached prompts by observed accuracy, skipping flagged ones.

    Ties prefer the earlier observation, then the smaller prompt id. When
    every prompt is flagged the ``fallback`` seeds are returned.
    """
    if not observations:
        raise ContractError("cache is empty")
    flagged = set(flagged_ids)
    order = sorted(range(len(observations)),
                   key=lambda i: (-observations[i].accuracy, i, observations[i].prompt.id))
    pool = [observations[i].prompt for i in order if observations[i].prompt.id not in flagged]
    if not pool:
        logger.warning("every cached prompt is flagged; falling back to the initial seeds")
        return list(fallback)
    return pool[:n_seeds]


def _best(observations, flagged):
    best = None
    for i, o in enumerate(observations):
        if o.prompt.id in flagged:
            continue
        if best is None or o.accuracy > best[1].accuracy:
            best = (i, o)
    return best[1] if best else None


def _r(x):
    return float(round(float(x), 12))


def run(config: RunConfig, partition: Partition, scorer: Scorer, templates=DEFAULT_TEMPLATES,
        writer: TrajectoryWriter | None = None, kappa_fn: Callable[[int, int], float] | None = None,
        on_round: Callable[[RoundRecord], None] | None = None) -> Trajectory:
    """Run the optimization loop and return its trajectory.

    ``kappa_fn(t, T)`` replaces the annealing schedule (used by negative
    controls). ``on_round`` is called after each completed round.
    """
    control, evalb, test = partition.control, partition.eval, partition.test
    T = config.rounds
    rng = np.random.default_rng(config.rng_seed)
    header = {"version": TRAJECTORY_VERSION, "config": config.to_dict(),
              "partition": partition.manifest_hash(),
              "control_size": len(control), "eval_size": len(evalb), "test_size": len(test)}
    if writer:
        writer.write({"kind": "header", **header})

    observations: list[Observation] = []
    observed_ids: set[str] = set()
    flagged: dict[str, dict] = {}
    trajectory = None

    def observe(prompt, repeats, vector, round_index):
        acc, n = scorer.evaluate(prompt, evalb, repeats)
        obs = Observation(prompt, acc, n, vector)
        observations.append(obs)
        observed_ids.add(prompt.id)
        events = []
        if reference is not None and prompt.id != reference.prompt_id:
            a, fa, dis = reversal_stats(vector, reference)
            if fa - a > config.reversal_threshold and dis > 0.5:
                ev = {"round": round_index, "id": prompt.id, "text": prompt.text,
                      "control_accuracy": _r(a), "flipped_accuracy": _r(fa),
                      "disagreement": _r(dis), "eval_accuracy": _r(acc)}
                flagged[prompt.id] = ev
                events.append(ev)
        return obs, events

    def finish(reason=None):
        best = _best(observations, flagged)
        summary = {"early_termination": reason, "rounds_completed": len(trajectory.rounds),
                   "best_prompt": best.prompt.to_dict() if best else None,
                   "best_eval_accuracy": _r(best.accuracy) if best else None,
                   "n_observations": len(observations), "flagged": sorted(flagged)}
        if best is not None and test:
            summary["test_accuracy"] = _r(scorer.accuracy(best.prompt, test))
        summary["backend_calls"] = dict(scorer.backend_calls)
        trajectory.summary = summary
        if writer:
            writer.write({"kind": "summary", **summary})
        return trajectory

    initial = []
    for text in config.seeds:
        p = Prompt(text)
        if p.id not in {q.id for q in initial}:
            initial.append(p)

    try:
        # round 0: every initial seed is scored so the GP has data to fit
        reference = None
        boot = RoundRecord(round_index=0, kappa=None)
        for p in initial:
            vector = scorer.predict_vector(p, control)
            obs, events = observe(p, 1, vector, 0)
            if reference is None:
                reference = vector
            boot.selected.append({**p.to_dict(), "accuracy": _r(obs.accuracy),
                                  "n_repeats": obs.n_repeats, "control_accuracy": _r(vector.accuracy)})
            boot.reversal_events.extend(events)
        seeds = update_seeds(observations, config.expansion.n_seeds, flagged, initial)
        seen_seed_ids = {s.id for s in seeds}
        best = _best(observations, flagged)
        boot.best_so_far = _r(best.accuracy)
        boot.best_prompt_id = best.prompt.id
        boot.seed_pool_after = [s.id for s in seeds]
        boot.backend_calls = dict(scorer.backend_calls)
        trajectory = Trajectory(header, boot)
        if writer:
            writer.write(boot.to_dict())

        gp = PredictionVectorGP(R=config.kernel_init.R, noise_variance=config.kernel_init.noise_variance,
                                optimize_hypers=config.optimize_hypers, n_steps=config.hyper_steps,
                                learning_rate=config.hyper_learning_rate, sigma_min=config.sigma_min,
                                optimizer=config.hyper_method)
        n_in_gp = 0
        for t in range(1, T + 1):
            kappa = kappa_fn(t - 1, T) if kappa_fn else kappa_schedule(t - 1, T, config.acquisition)
            record = RoundRecord(round_index=t, kappa=_r(kappa))

            X = np.array([o.prediction_vector.bits for o in observations], dtype=float)
            a = np.array([o.accuracy for o in observations])
            if config.optimize_hypers:
                gp.fit(X, a)
                gp.set_params(R=gp.params_.R, noise_variance=gp.params_.noise_variance)
            else:
                gp.partial_fit(X[n_in_gp:], a[n_in_gp:])
            n_in_gp = len(observations)
            record.surrogate = {k: _r(v) if isinstance(v, float) else v
                                for k, v in gp.diagnostics().items()}

            exclude = seen_seed_ids | observed_ids
            try:
                candidates = expand(seeds, evalb, config.expansion, scorer, templates, exclude)
            except ExpansionExhausted:
                record.warnings.append("expansion exhausted; paraphrasing best seed")
                candidates = [p for p in mc_paraphrase(seeds[0], config.expansion.mc_per_edit, scorer,
                                                       templates, salt_offset=1000 * t)
                              if p.id not in exclude]
                if not candidates:
                    return finish(f"expansion exhausted in round {t}")
            record.n_candidates_generated = len(candidates)

            vectors = [scorer.predict_vector(c, control) for c in candidates]
            Xc = np.array([v.bits for v in vectors], dtype=float)
            mean, std, var = posterior_arrays(gp.fitted_, Xc, config.sigma_min)
            posts = [Posterior(float(mu), float(s), float(v)) for mu, s, v in zip(mean, std, var)]
            f_star = max(o.accuracy for o in observations)
            ranked = rank(list(zip(candidates, posts)), config.acquisition, kappa, f_star)
            score_of = {p.id: s for s, p, _ in ranked}
            record.candidates = [{"id": c.id, "mu": _r(p.mean), "sigma": _r(p.std),
                                  "score": _r(score_of[c.id])} for c, p in zip(candidates, posts)]

            m = min(config.acquisition.batch_m, len(candidates))
            if config.selection == "random":
                picks = sorted(rng.choice(len(candidates), size=m, replace=False).tolist())
                chosen = [candidates[i] for i in picks]
            else:
                chosen = [p for _, p, _ in ranked[:m]]
            repeats = 1
            if len(ranked) >= 2 and ranked[0][0] - ranked[1][0] < config.repeat_margin:
                repeats = config.max_repeats
            record.repeats = repeats

            index = {c.id: i for i, c in enumerate(candidates)}
            for p in chosen:
                i = index[p.id]
                obs, events = observe(p, repeats, vectors[i], t)
                record.selected.append({**p.to_dict(), "mu": _r(posts[i].mean), "sigma": _r(posts[i].std),
                                        "variance": _r(posts[i].variance), "score": _r(score_of[p.id]),
                                        "accuracy": _r(obs.accuracy), "n_repeats": obs.n_repeats,
                                        "control_accuracy": _r(vectors[i].accuracy)})
                record.reversal_events.extend(events)

            seeds = update_seeds(observations, config.expansion.n_seeds, flagged, initial)
            if all(o.prompt.id in flagged for o in observations):
                record.warnings.append("all cached prompts flagged; seed pool reset to initial seeds")
            seen_seed_ids |= {s.id for s in seeds}
            best = _best(observations, flagged)
            record.best_so_far = _r(best.accuracy)
            record.best_prompt_id = best.prompt.id
            record.seed_pool_after = [s.id for s in seeds]
            record.backend_calls = dict(scorer.backend_calls)
            trajectory.rounds.append(record)
            if writer:
                writer.write(record.to_dict())
            if on_round:
                on_round(record)
        return finish()
    except (BackendError, EvaluationError, ExpansionError) as exc:
        if trajectory is not None:
            trajectory.summary = {"early_termination": f"aborted: {exc}",
                                  "rounds_completed": len(trajectory.rounds),
                                  "backend_calls": dict(scorer.backend_calls)}
            if writer:
                writer.write({"kind": "summary", **trajectory.summary})
        raise RunAborted(str(exc), trajectory) from exc


class PromptSearch(ClassifierMixin, BaseEstimator):
    """Estimator facade: ``fit`` searches for a prompt, ``predict`` classifies with it.

    ``backend`` is any object with ``classify``/``complete`` methods, for
    example :class:`~promptbo.annotator.SimulatedBackend`.
    """

    def __init__(self, backend=None, seeds=(), rounds=10, control_size=75, eval_size=50,
                 acquisition=None, expansion=None, kernel_init=None, sigma_min=DEFAULT_SIGMA_MIN,
                 optimize_hypers=True, random_state=0):
        self.backend = backend
        self.seeds = seeds
        self.rounds = rounds
        self.control_size = control_size
        self.eval_size = eval_size
        self.acquisition = acquisition
        self.expansion = expansion
        self.kernel_init = kernel_init
        self.sigma_min = sigma_min
        self.optimize_hypers = optimize_hypers
        self.random_state = random_state

    def _config(self):
        return RunConfig(rounds=self.rounds, seeds=tuple(self.seeds),
                         acquisition=self.acquisition or AcquisitionConfig(),
                         expansion=self.expansion or ExpansionConfig(),
                         kernel_init=self.kernel_init or KernelParams(),
                         sigma_min=self.sigma_min, optimize_hypers=self.optimize_hypers,
                         rng_seed=self.random_state)

    def fit(self, X, y):
        if self.backend is None:
            raise ContractError("PromptSearch needs a backend")
        X, y = list(X), [int(v) for v in y]
        if len(X) != len(y):
            raise ContractError("X and y differ in length")
        examples = [Example(f"x{i}", str(text), label) for i, (text, label) in enumerate(zip(X, y))]
        self.classes_ = np.array([0, 1])
        self.partition_ = make_partition(examples, self.control_size, self.eval_size, self.random_state)
        self.scorer_ = Scorer(self.backend)
        self.trajectory_ = run(self._config(), self.partition_, self.scorer_)
        self.best_prompt_ = Prompt(**{k: v for k, v in self.trajectory_.summary["best_prompt"].items()
                                      if k != "id"})
        self.best_accuracy_ = self.trajectory_.summary["best_eval_accuracy"]
        return self

    def predict(self, X):
        """Label ``X`` with the best prompt.

        The simulated backend derives its answers from the example label, so
        with it only :meth:`score` is meaningful.
        """
        check_is_fitted(self, "best_prompt_")
        return np.array([int(self.backend.classify(self.best_prompt_, Example(f"q{i}", str(t), 0)))
                         for i, t in enumerate(X)])

    def score(self, X, y, sample_weight=None):
        check_is_fitted(self, "best_prompt_")
        examples = [Example(f"q{i}", str(t), int(v)) for i, (t, v) in enumerate(zip(X, y))]
        hits = [self.backend.classify(self.best_prompt_, e) == e.label for e in examples]
        return float(np.average(hits, weights=sample_weight))
