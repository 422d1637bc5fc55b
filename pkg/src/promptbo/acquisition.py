"""Acquisition scores (UCB with an annealed kappa, or EI) and candidate selection."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import norm

from .exceptions import ContractError, SelectionError

KINDS = ("ucb", "ei")


@dataclass(frozen=True)
class AcquisitionConfig:
    kind: str = "ucb"
    kappa_start: float = 2.0
    kappa_end: float = 0.5
    xi: float = 0.01
    batch_m: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"acquisition.kind must be one of {KINDS}")
        if not self.kappa_start >= self.kappa_end >= 0:
            raise ContractError("need kappa_start >= kappa_end >= 0")
        if self.xi < 0 or self.batch_m < 1:
            raise ContractError("need xi >= 0 and batch_m >= 1")


def kappa_schedule(round_index: int, total_rounds: int, cfg: AcquisitionConfig = AcquisitionConfig()) -> float:
    """Linear interpolation hitting kappa_start at t=0 and kappa_end at t=T-1."""
    if total_rounds < 1 or not 0 <= round_index < total_rounds:
        raise ContractError(f"round_index {round_index} outside [0, {total_rounds})")
    if total_rounds == 1:
        return cfg.kappa_start
    if round_index == total_rounds - 1:
        return cfg.kappa_end
    frac = round_index / (total_rounds - 1)
    return cfg.kappa_start + (cfg.kappa_end - cfg.kappa_start) * frac


def ucb(mean: float, std: float, kappa: float) -> float:
    return mean + kappa * std


def ei(mean: float, std: float, f_star: float, xi: float = 0.0) -> float:
    improvement = mean - f_star - xi
    if std <= 0:
        return max(improvement, 0.0)
    with np.errstate(over="ignore"):  # huge |z| only underflows the pdf to 0
        z = improvement / std
        value = improvement * norm.cdf(z) + std * norm.pdf(z)
    return max(float(value), 0.0)


def score(posterior, cfg: AcquisitionConfig, kappa: float, f_star: float) -> float:
    if cfg.kind == "ucb":
        return ucb(posterior.mean, posterior.std, kappa)
    return ei(posterior.mean, posterior.std, f_star, cfg.xi)


def rank(candidates: Sequence, cfg: AcquisitionConfig, kappa: float, f_star: float = -math.inf):
    """Return ``[(score, prompt, posterior)]`` best first.

    Ties on score go to the higher posterior mean, then the smaller prompt id.
    """
    scored = [(score(post, cfg, kappa, f_star), prompt, post) for prompt, post in candidates]
    scored.sort(key=lambda t: (-t[0], -t[2].mean, t[1].id))
    return scored


def select(candidates: Sequence, cfg: AcquisitionConfig, kappa: float, f_star: float = -math.inf):
    """Pick the top ``cfg.batch_m`` prompts from ``[(prompt, posterior)]``."""
    if not candidates:
        raise SelectionError("no candidates to select from")
    if cfg.batch_m > len(candidates):
        raise SelectionError(f"batch_m={cfg.batch_m} exceeds {len(candidates)} candidates")
    return [prompt for _, prompt, _ in rank(candidates, cfg, kappa, f_star)[: cfg.batch_m]]
