"""Gaussian-process surrogate over prompt prediction vectors.

Prompts are represented by their 0/1 correctness vectors on the control
batch. The covariance is an RBF on those vectors,
``k(x, x') = exp(-||x - x'||^2 / (2 R))``, and the prior mean of a prompt is
its control-batch accuracy. Observations are accuracies measured on the
evaluation batch, modelled as ``f(p) + noise``.

The functional core works on arrays; :class:`PredictionVectorGP` wraps it
in the scikit-learn regressor interface.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ContractError, NumericalError, OptimizationError
from .validation import check_prediction_matrix, check_targets

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
JITTER_LADDER = (1e-8, 1e-7, 1e-6, 1e-5, 1e-4)
DEFAULT_SIGMA_MIN = 0.02
# log-space box for hyperparameter search
R_BOUNDS = (1e-2, 1e4)
NOISE_BOUNDS = (1e-6, 10.0)
# extra L-BFGS-B starting points (R, noise); the LML is often multimodal in R
RESTARTS = ((0.1, 1e-3), (0.1, 0.1), (10.0, 1e-3), (10.0, 0.1), (1000.0, 1e-3), (1000.0, 0.1))
METHODS = ("lbfgs", "ascent")


@dataclass(frozen=True)
class KernelParams:
    R: float = 1.0
    noise_variance: float = 0.01

    def __post_init__(self):
        if not self.R > 0:
            raise ContractError(f"R must be > 0, got {self.R}")
        if not self.noise_variance >= 0:
            raise ContractError(f"noise_variance must be >= 0, got {self.noise_variance}")


@dataclass(frozen=True)
class FittedSurrogate:
    X: np.ndarray
    a: np.ndarray
    m: np.ndarray
    kernel_matrix: np.ndarray
    cholesky_factor: np.ndarray
    alpha_vector: np.ndarray
    params: KernelParams
    jitter: float = 0.0

    @property
    def n(self):
        return len(self.a)


@dataclass(frozen=True)
class Posterior:
    mean: float
    std: float
    variance: float  # before flooring


def squared_distances(X1, X2):
    return cdist(np.atleast_2d(X1), np.atleast_2d(X2), "sqeuclidean")


def kernel_matrix(X1, X2, R):
    return np.exp(-squared_distances(X1, X2) / (2.0 * R))


def kernel(v1, v2, params: KernelParams) -> float:
    """RBF similarity of two prediction vectors (squared distance = Hamming distance)."""
    x1 = np.asarray(getattr(v1, "bits", v1), dtype=float)
    x2 = np.asarray(getattr(v2, "bits", v2), dtype=float)
    if x1.shape != x2.shape:
        raise ContractError("prediction vectors differ in length")
    return float(np.exp(-np.sum((x1 - x2) ** 2) / (2.0 * params.R)))


def prior_mean(v) -> float:
    bits = np.asarray(getattr(v, "bits", v), dtype=float)
    if bits.size == 0:
        raise ContractError("empty prediction vector")
    return float(bits.mean())


def _factor(K, noise_variance):
    """Cholesky of K + noise*I with escalating diagonal jitter on failure."""
    n = K.shape[0]
    A = K + noise_variance * np.eye(n)
    for jitter in (0.0,) + JITTER_LADDER:
        try:
            L = cholesky(A + jitter * np.eye(n), lower=True, check_finite=True)
        except (LinAlgError, ValueError):
            continue
        if jitter:
            logger.debug("cholesky needed jitter %g", jitter)
        return L, jitter
    raise NumericalError("K + noise*I is not positive definite even with jitter 1e-4 "
                         "(near-duplicate prompts with zero noise?)")


def fit_arrays(X, a, m=None, params: KernelParams = KernelParams()) -> FittedSurrogate:
    X = check_prediction_matrix(X)
    a = check_targets(a, len(X))
    m = X.mean(axis=1) if m is None else check_targets(m, len(X))
    K = kernel_matrix(X, X, params.R)
    L, jitter = _factor(K, params.noise_variance)
    alpha = cho_solve((L, True), a - m)
    return FittedSurrogate(X, a, m, K, L, alpha, params, jitter)


def _observation_arrays(observations):
    if not observations:
        raise ContractError("need at least one observation")
    X = np.array([o.prediction_vector.bits for o in observations], dtype=float)
    a = np.array([o.accuracy for o in observations], dtype=float)
    return X, a, X.mean(axis=1)


def fit(observations, params: KernelParams = KernelParams()) -> FittedSurrogate:
    """Condition the GP on cached observations."""
    return fit_arrays(*_observation_arrays(observations), params=params)


def posterior_arrays(fitted: FittedSurrogate, Xc, sigma_min=DEFAULT_SIGMA_MIN):
    """Vectorised posterior: returns (mean, floored std, raw variance)."""
    Xc = check_prediction_matrix(Xc)
    if Xc.shape[1] != fitted.X.shape[1]:
        raise ContractError("candidate vectors cover a different control batch")
    Ks = kernel_matrix(Xc, fitted.X, fitted.params.R)
    mean = Xc.mean(axis=1) + Ks @ fitted.alpha_vector
    v = solve_triangular(fitted.cholesky_factor, Ks.T, lower=True)
    var = 1.0 - np.sum(v * v, axis=0)
    std = np.maximum(np.sqrt(np.maximum(var, 0.0)), sigma_min)
    return mean, std, var


def posterior(fitted: FittedSurrogate, candidate, sigma_min=DEFAULT_SIGMA_MIN) -> Posterior:
    bits = np.asarray(getattr(candidate, "bits", candidate), dtype=float)
    mean, std, var = posterior_arrays(fitted, bits[None, :], sigma_min)
    return Posterior(float(mean[0]), float(std[0]), float(var[0]))


# --- marginal likelihood ---------------------------------------------------

def _lml_parts(X, r, params):
    D = squared_distances(X, X)
    K = np.exp(-D / (2.0 * params.R))
    L, jitter = _factor(K, params.noise_variance)
    alpha = cho_solve((L, True), r)
    lml = -0.5 * r @ alpha - np.log(np.diag(L)).sum() - 0.5 * len(r) * LOG_2PI
    return lml, K, D, L, alpha


def lml_arrays(X, a, m, params: KernelParams) -> float:
    X = check_prediction_matrix(X)
    return float(_lml_parts(X, np.asarray(a, float) - np.asarray(m, float), params)[0])


def lml_gradient_arrays(X, a, m, params: KernelParams):
    """Analytic gradient of the LML w.r.t. (R, noise_variance)."""
    X = check_prediction_matrix(X)
    _, K, D, L, alpha = _lml_parts(X, np.asarray(a, float) - np.asarray(m, float), params)
    inner = np.outer(alpha, alpha) - cho_solve((L, True), np.eye(len(alpha)))
    dK_dR = K * D / (2.0 * params.R ** 2)
    return np.array([0.5 * np.sum(inner * dK_dR), 0.5 * np.trace(inner)])


def log_marginal_likelihood(observations, params: KernelParams) -> float:
    """Gaussian log evidence of the residuals ``a - m`` under K + noise*I."""
    return lml_arrays(*_observation_arrays(observations), params)


def lml_gradient(observations, params: KernelParams):
    return lml_gradient_arrays(*_observation_arrays(observations), params)


def optimize_hyperparams_arrays(X, a, m, init: KernelParams, steps=100, learning_rate=0.1,
                                bounds=(R_BOUNDS, NOISE_BOUNDS), tol=1e-6, method="lbfgs",
                                restarts=RESTARTS):
    """Maximise the LML over ``(R, noise_variance)`` in log-parameter space.

    ``method="lbfgs"`` runs box-constrained L-BFGS-B from ``init`` and from
    each point in ``restarts``; ``method="ascent"`` is projected gradient
    ascent with step halving, starting at ``learning_rate``. Either way the
    result is the best point evaluated, so its LML is never below that of
    ``init``, and ``init`` itself is returned when nothing beats it.
    """
    if method not in METHODS:
        raise ContractError(f"method must be one of {METHODS}")
    lo = np.log([bounds[0][0], bounds[1][0]])
    hi = np.log([bounds[0][1], bounds[1][1]])

    def unpack(u):
        return KernelParams(float(np.exp(u[0])), float(np.exp(u[1])))

    def evaluate(u):
        p = unpack(u)
        value = lml_arrays(X, a, m, p)
        grad = lml_gradient_arrays(X, a, m, p) * np.array([p.R, p.noise_variance])
        return value, grad

    if init.noise_variance <= 0:
        init = replace(init, noise_variance=bounds[1][0])
    u0 = np.clip(np.log([init.R, init.noise_variance]), lo, hi)
    best_init, grad = evaluate(u0)
    if not np.isfinite(best_init):
        raise OptimizationError("LML is not finite at the initial parameters", last_good=init)
    state = {"value": best_init, "u": u0}

    def track(u):
        try:
            value, g = evaluate(u)
        except NumericalError:
            return -np.inf, np.zeros(2)
        if np.isnan(value) or np.any(np.isnan(g)):
            raise OptimizationError("LML became NaN during the search", last_good=unpack(state["u"]))
        if value > state["value"]:
            state["value"], state["u"] = value, np.array(u, dtype=float)
        return value, g

    if method == "lbfgs":
        starts = [u0] + [np.clip(np.log(r), lo, hi) for r in restarts]

        def negated(u):
            value, g = track(u)
            return (-value, -g) if np.isfinite(value) else (np.inf, np.zeros(2))

        for u in starts:
            minimize(negated, u, jac=True, method="L-BFGS-B", bounds=list(zip(lo, hi)),
                     options={"maxiter": steps, "gtol": tol})
    else:
        u, best, lr = u0, best_init, learning_rate
        for _ in range(steps):
            # zero components that push against an active bound
            g = np.where(((u <= lo) & (grad < 0)) | ((u >= hi) & (grad > 0)), 0.0, grad)
            if np.linalg.norm(g) < tol:
                break
            for _ in range(60):
                trial = np.clip(u + lr * g, lo, hi)
                value, trial_grad = track(trial)
                if value >= best:
                    break
                lr *= 0.5
            else:
                break
            if np.allclose(trial, u, rtol=0, atol=1e-14):
                break
            u, best, grad = trial, value, trial_grad
            lr *= 2.0
    return unpack(state["u"]) if state["value"] > best_init else init


def optimize_hyperparams(observations, init: KernelParams, steps=100, learning_rate=0.1,
                         method="lbfgs"):
    X, a, m = _observation_arrays(observations)
    return optimize_hyperparams_arrays(X, a, m, init, steps, learning_rate, method=method)


# --- incremental refit -------------------------------------------------------

def rank_one_update_arrays(fitted: FittedSurrogate | None, x_new, a_new, m_new=None,
                           params: KernelParams | None = None) -> FittedSurrogate:
    """Append one observation by bordering the Cholesky factor (O(n^2))."""
    x_new = np.asarray(x_new, dtype=float).ravel()
    m_new = float(x_new.mean()) if m_new is None else float(m_new)
    if fitted is None:
        return fit_arrays(x_new[None, :], [a_new], [m_new], params or KernelParams())
    if params is not None and params != fitted.params:
        raise ContractError("kernel parameters changed since fit; refit instead of updating")
    if x_new.shape[0] != fitted.X.shape[1]:
        raise ContractError("new observation covers a different control batch")
    p = fitted.params
    k = kernel_matrix(x_new[None, :], fitted.X, p.R)[0]
    l = solve_triangular(fitted.cholesky_factor, k, lower=True)
    pivot = 1.0 + p.noise_variance + fitted.jitter - l @ l
    if not pivot > 0:
        raise NumericalError("non-positive pivot in rank-one update (duplicate prompt?)")
    n = fitted.n
    L = np.zeros((n + 1, n + 1))
    L[:n, :n] = fitted.cholesky_factor
    L[n, :n] = l
    L[n, n] = math.sqrt(pivot)
    K = np.empty((n + 1, n + 1))
    K[:n, :n] = fitted.kernel_matrix
    K[n, :n] = K[:n, n] = k
    K[n, n] = 1.0
    X = np.vstack([fitted.X, x_new])
    a = np.append(fitted.a, a_new)
    m = np.append(fitted.m, m_new)
    alpha = cho_solve((L, True), a - m)
    return FittedSurrogate(X, a, m, K, L, alpha, p, fitted.jitter)


def rank_one_update(fitted, new_obs, params: KernelParams | None = None) -> FittedSurrogate:
    return rank_one_update_arrays(fitted, new_obs.prediction_vector.bits, new_obs.accuracy,
                                  params=params)


class PredictionVectorGP(RegressorMixin, BaseEstimator):
    """GP regressor mapping prediction vectors to measured accuracy.

    Parameters
    ----------
    R : float
        RBF length-scale on squared Hamming distance.
    noise_variance : float
        Observation noise added to the kernel diagonal.
    optimize_hypers : bool
        Maximise the log marginal likelihood over ``(R, noise_variance)``
        during :meth:`fit` (needs at least two observations).
    n_steps, learning_rate : int, float
        Iteration budget per start, and the initial step of ``"ascent"``.
    optimizer : {"lbfgs", "ascent"}
        L-BFGS-B with restarts, or plain projected gradient ascent.
    sigma_min : float
        Floor on the predictive standard deviation returned by :meth:`predict`.
    """

    def __init__(self, R=1.0, noise_variance=0.01, optimize_hypers=True, n_steps=100,
                 learning_rate=0.1, sigma_min=DEFAULT_SIGMA_MIN, optimizer="lbfgs"):
        self.R = R
        self.noise_variance = noise_variance
        self.optimize_hypers = optimize_hypers
        self.n_steps = n_steps
        self.learning_rate = learning_rate
        self.sigma_min = sigma_min
        self.optimizer = optimizer

    def fit(self, X, y, prior_mean=None):
        X = check_prediction_matrix(X)
        y = check_targets(y, len(X))
        m = X.mean(axis=1) if prior_mean is None else check_targets(prior_mean, len(X))
        params = KernelParams(self.R, self.noise_variance)
        if self.optimize_hypers and len(X) >= 2:
            params = optimize_hyperparams_arrays(X, y, m, params, self.n_steps, self.learning_rate,
                                                 method=self.optimizer)
        self.fitted_ = fit_arrays(X, y, m, params)
        self.params_ = params
        self.log_marginal_likelihood_value_ = lml_arrays(X, y, m, params)
        return self

    def partial_fit(self, X, y, prior_mean=None):
        """Add observations one at a time without re-learning hyperparameters."""
        X = check_prediction_matrix(X)
        y = check_targets(y, len(X))
        m = X.mean(axis=1) if prior_mean is None else check_targets(prior_mean, len(X))
        fitted = getattr(self, "fitted_", None)
        params = getattr(self, "params_", KernelParams(self.R, self.noise_variance))
        for row, target, mean in zip(X, y, m):
            fitted = rank_one_update_arrays(fitted, row, target, mean, params)
        self.fitted_, self.params_ = fitted, params
        self.log_marginal_likelihood_value_ = lml_arrays(fitted.X, fitted.a, fitted.m, params)
        return self

    def predict(self, X, return_std=False):
        check_is_fitted(self, "fitted_")
        mean, std, _ = posterior_arrays(self.fitted_, X, self.sigma_min)
        return (mean, std) if return_std else mean

    def log_marginal_likelihood(self, params: KernelParams | None = None):
        check_is_fitted(self, "fitted_")
        f = self.fitted_
        return lml_arrays(f.X, f.a, f.m, params or self.params_)

    def diagnostics(self):
        """Summary of the fitted model for per-round dumps."""
        check_is_fitted(self, "fitted_")
        eig = np.linalg.eigvalsh(self.fitted_.kernel_matrix)
        return {"R": self.params_.R, "noise_variance": self.params_.noise_variance,
                "lml": self.log_marginal_likelihood_value_,
                "K_eig_min": float(eig[0]), "K_eig_max": float(eig[-1]),
                "n_observations": self.fitted_.n, "jitter": self.fitted_.jitter}
