"""Penalized IRLS for Poisson, binomial, Gaussian and their quasi variants.

The engine minimizes ``deviance(y, mu) + coef' P coef`` for a symmetric
positive-semidefinite prior precision ``P`` (the caller folds any smoothing
penalty into ``P``).  Only canonical links are supported, so each step solves
the working normal equations ``(D'WD + P) coef = D'Wz``.  Quasi families
accept non-integer responses with the same mean-variance relationship and
yield the same coefficients as their plain counterparts on integer data.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

log = logging.getLogger(__name__)

MU_FLOOR = 1e-10
WEIGHT_FLOOR = 1e-10
ETA_CLIP = 700.0  # keeps exp() finite; step-halving recovers from the clip

_CANONICAL = {
    "poisson": "poisson",
    "quasipoisson": "poisson",
    "binomial": "binomial",
    "quasibinomial": "binomial",
    "gaussian": "gaussian",
}


def _normalize_family(family):
    key = family.lower().replace("-", "").replace("_", "")
    if key not in _CANONICAL:
        raise ValueError(f"unknown family {family!r}; expected one of {sorted(_CANONICAL)}")
    return key, _CANONICAL[key]


def _inv_link(eta, base):
    if base == "poisson":
        return np.exp(np.clip(eta, -ETA_CLIP, ETA_CLIP))
    if base == "binomial":
        out = np.empty_like(eta)
        pos = eta >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
        ex = np.exp(eta[~pos])
        out[~pos] = ex / (1.0 + ex)
        return np.clip(out, MU_FLOOR, 1.0 - MU_FLOOR)
    return eta


def _link(mu, base):
    if base == "poisson":
        return np.log(np.maximum(mu, MU_FLOOR))
    if base == "binomial":
        m = np.clip(mu, MU_FLOOR, 1.0 - MU_FLOOR)
        return np.log(m) - np.log1p(-m)
    return mu


def _variance(mu, base):
    if base == "poisson":
        return np.maximum(mu, WEIGHT_FLOOR)
    if base == "binomial":
        return np.maximum(mu * (1.0 - mu), WEIGHT_FLOOR)
    return np.ones_like(mu)


def _check_support(y, base, family):
    if base == "poisson" and np.any(y < 0):
        raise ValueError(f"{family} responses must be >= 0")
    if base == "binomial" and (np.any(y < 0) or np.any(y > 1)):
        raise ValueError(f"{family} responses must lie in [0, 1]")
    if base == "poisson" and family == "poisson" and np.any(y != np.round(y)):
        raise ValueError("poisson responses must be integers; use quasi-poisson for weighted counts")


def deviance(y, mu, family, floor=MU_FLOOR):
    """Standard GLM deviance; zero at the saturated fit.

    Fitted values at the support boundary are clamped to ``floor`` (and
    ``1 - floor`` for binomial) before the logs, with a debug log entry.
    """
    _, base = _normalize_family(family)
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if base == "gaussian":
        return float(np.sum((y - mu) ** 2))
    if base == "poisson":
        if np.any(mu < floor):
            log.debug("clamping %d fitted values at the Poisson floor", int(np.sum(mu < floor)))
        m = np.maximum(mu, floor)  # guards the log only; the linear term keeps mu
        term = np.where(y > 0, y * np.log(np.maximum(y, floor) / m), 0.0) - (y - mu)
        return float(2.0 * term.sum())
    if np.any((mu < floor) | (mu > 1 - floor)):
        log.debug("clamping fitted values at the binomial boundary")
    m = np.clip(mu, floor, 1.0 - floor)
    t1 = np.where(y > 0, y * np.log(np.maximum(y, floor) / m), 0.0)
    t0 = np.where(y < 1, (1 - y) * np.log(np.maximum(1 - y, floor) / (1 - m)), 0.0)
    return float(2.0 * (t1 + t0).sum())


@dataclass
class GlmFit:
    """Result of a penalized IRLS fit."""

    coef: np.ndarray
    linear_predictor: np.ndarray   # D @ coef + offset
    fitted: np.ndarray
    deviance: float
    leverages: np.ndarray
    pearson_residuals: np.ndarray
    loop: float
    loop_infinite: bool
    converged: bool
    iterations: int
    family: str
    deviance_trace: np.ndarray
    objective_trace: np.ndarray
    working_weights: np.ndarray
    prior_precision: np.ndarray | None = field(repr=False, default=None)

    @property
    def objective(self):
        return float(self.objective_trace[-1])


def _solve_spd(A, rhs):
    """Cholesky solve with a diagonal-jitter fallback for singular systems."""
    try:
        c, low = scipy.linalg.cho_factor(A, check_finite=False)
        return scipy.linalg.cho_solve((c, low), rhs, check_finite=False), (c, low), 0.0
    except scipy.linalg.LinAlgError:
        scale = max(np.abs(np.diag(A)).mean(), 1.0)
        jitter = 1e-10 * scale
        log.debug("normal equations not positive definite; retrying with %.2e jitter", jitter)
        Aj = A + jitter * np.eye(A.shape[0])
        try:
            c, low = scipy.linalg.cho_factor(Aj, check_finite=False)
            return scipy.linalg.cho_solve((c, low), rhs, check_finite=False), (c, low), jitter
        except scipy.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(
                "penalized normal equations are numerically singular even after jitter; "
                "consider a ridge term or a larger smoothing penalty"
            ) from exc


def fit_glm(design, y, family="poisson", offset=None, prior_precision=None,
            max_iter=100, tol=1e-8, max_halvings=20):
    """Fit a GLM penalized by a quadratic prior precision.

    Parameters
    ----------
    design : ndarray or DesignMatrix
        Model matrix, one row per vertex/observation.
    y : ndarray
        Response; non-integer values require a quasi family.
    family : str
        One of poisson, quasi-poisson, binomial, quasi-binomial, gaussian
        (canonical links: log, logit, identity).
    offset : ndarray, optional
        Added to the linear predictor, not estimated.
    prior_precision : ndarray, optional
        Symmetric PSD matrix P; the objective is deviance + coef' P coef.
    tol : float
        Relative deviance change declaring convergence.

    Returns
    -------
    GlmFit
        Includes leverages and the leave-one-out proxy computed from the
        final reweighted least-squares step.
    """
    family, base = _normalize_family(family)
    D = design.matrix if hasattr(design, "matrix") else np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = D.shape
    if len(y) != n:
        raise ValueError("response length must match the design row count")
    _check_support(y, base, family)
    offset = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    if prior_precision is None:
        P = np.zeros((k, k))
    else:
        P = np.asarray(prior_precision, dtype=float)
        if P.shape != (k, k):
            raise ValueError(f"prior precision must be {k}x{k}")
        asym = np.abs(P - P.T).max() if P.size else 0.0
        if asym > 1e-10 * max(1.0, np.abs(P).max()):
            raise ValueError("prior precision must be symmetric")
        P = (P + P.T) / 2.0

    # IRLS starts at the null model (coef = 0), so the linearization point,
    # the step-halving reference and the returned state are always one
    # consistent iterate and the objective can never rise above the null fit
    coef = np.zeros(k)
    eta = offset.copy()
    mu = _inv_link(eta, base)
    dev = deviance(y, mu, family)
    obj = dev
    dev_trace = []
    obj_trace = []
    converged = False
    iterations = 0
    jittered = 0

    for it in range(1, max_iter + 1):
        iterations = it
        W = _variance(mu, base)
        z = (eta - offset) + (y - mu) / W
        A = D.T @ (W[:, None] * D) + P
        rhs = D.T @ (W * z)
        new_coef, _, jit = _solve_spd(A, rhs)
        jittered += jit > 0

        # step-halving keeps the penalized objective non-increasing
        cand = new_coef
        for _ in range(max_halvings):
            eta_c = D @ cand + offset
            mu_c = _inv_link(eta_c, base)
            obj_c = deviance(y, mu_c, family) + float(cand @ P @ cand)
            if obj_c <= obj + 1e-12 * (1.0 + abs(obj)):
                break
            cand = (cand + coef) / 2.0
        else:
            eta_c = D @ cand + offset
            mu_c = _inv_link(eta_c, base)
            obj_c = deviance(y, mu_c, family) + float(cand @ P @ cand)
            if obj_c > obj + 1e-8 * (1.0 + abs(obj)):
                # no descent direction left; stop at the previous iterate
                break
        coef, eta, mu, obj_new = cand, eta_c, mu_c, obj_c
        new_dev = deviance(y, mu, family)
        dev_trace.append(new_dev)
        obj_trace.append(obj_new)
        if abs(new_dev - dev) / (abs(new_dev) + 0.1) < tol:
            converged = True
            dev, obj = new_dev, obj_new
            break
        dev, obj = new_dev, obj_new
    if not converged:
        log.warning("IRLS did not converge in %d iterations (family=%s)", iterations, family)
    if jittered:
        log.warning("normal equations needed a 1e-10 diagonal jitter in %d of %d "
                    "IRLS iterations (near-singular design)", jittered, iterations)

    # leverages of the final weighted hat matrix; refactorize at the final
    # weights so the inner and outer scalings agree exactly
    W = _variance(mu, base)
    A = D.T @ (W[:, None] * D) + P
    _, factor, _ = _solve_spd(A, np.zeros(k))
    half = np.sqrt(W)[:, None] * D
    c, low = factor
    tri = scipy.linalg.solve_triangular(c, half.T, lower=low, trans=0 if low else 1,
                                        check_finite=False)
    leverages = np.clip(np.einsum("ij,ij->j", tri, tri), 0.0, 1.0)
    pearson = (y - mu) / np.sqrt(_variance(mu, base))
    loop, loop_inf = _loop_from_parts(pearson, leverages)

    return GlmFit(
        coef=coef,
        linear_predictor=eta,
        fitted=mu,
        deviance=dev,
        leverages=leverages,
        pearson_residuals=pearson,
        loop=loop,
        loop_infinite=loop_inf,
        converged=converged,
        iterations=iterations,
        family=family,
        deviance_trace=np.asarray(dev_trace),
        objective_trace=np.asarray(obj_trace),
        working_weights=W,
        prior_precision=P,
    )


def _loop_from_parts(pearson, leverages, eps=1e-12):
    at_one = leverages >= 1.0 - eps
    if np.any(at_one):
        log.warning("%d leverages are numerically 1; leave-one-out proxy is infinite",
                    int(at_one.sum()))
        return float("inf"), True
    return float(np.sum(pearson ** 2 / (1.0 - leverages))), False


def loop_statistic(fit):
    """Leave-one-out proxy: sum of squared Pearson residuals over ``1 - leverage``.

    Vertices with leverage 1 would each contribute infinitely; the statistic
    is then reported as ``inf`` and flagged on the fit.
    """
    value, _ = _loop_from_parts(fit.pearson_residuals, fit.leverages)
    return value
