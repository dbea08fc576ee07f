"""Spike-and-slab determination of per-predictor basis ranks.

Each predictor's coefficient surface is expanded on the leading Laplacian
eigenvectors; the number of eigenvectors actually supported by the data (the
rank) is treated as a latent variable with the truncated-geometric prior of
:func:`tau_prior`.  An EM pass per predictor alternates a posterior over the
rank with a penalized Poisson refit under the expected prior precision, and
the rank is read off the posterior with the sequential centroid rule.  The
outer loop cycles through predictors, feeding each the others' contributions
through the offset, until the rank vector stops changing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from .glm import fit_glm
from .spectral import roughness_matrix

log = logging.getLogger(__name__)

RIDGE_EPS = 1e-8


@dataclass
class TauPrior:
    """Prior over a basis rank in ``{0, ..., max_rank}``.

    ``include_prob`` is the chance the predictor enters at all (rank >= 1);
    ``extend_prob`` the chance it extends beyond a single eigenvector; ranks
    from 2 up share the remaining mass with truncated-geometric weights
    ``growth**(rank-1)``.
    """

    include_prob: float
    extend_prob: float
    growth: float
    max_rank: int
    probs: np.ndarray

    @property
    def expectation(self):
        return float(np.arange(self.max_rank + 1) @ self.probs)


def tau_prior(include_prob, extend_prob, growth, max_rank):
    """Build the rank prior; probabilities sum to one by construction."""
    if not (0 <= include_prob <= 1 and 0 <= extend_prob <= 1):
        raise ValueError("include_prob and extend_prob must lie in [0, 1]")
    if growth <= 0:
        raise ValueError("growth must be positive")
    if max_rank < 2:
        raise ValueError("max_rank must be at least 2")
    probs = np.zeros(max_rank + 1)
    probs[0] = 1.0 - include_prob
    probs[1] = include_prob * (1.0 - extend_prob)
    # geometric weights on ranks 2..max_rank, computed in log space for
    # stability at extreme growth values
    logw = (np.arange(2, max_rank + 1) - 1.0) * np.log(growth)
    w = np.exp(logw - logsumexp(logw))
    probs[2:] = include_prob * extend_prob * w
    return TauPrior(include_prob=include_prob, extend_prob=extend_prob,
                    growth=growth, max_rank=max_rank, probs=probs)


def elicit_tau_hyperparams(eigenvalues, pct=0.05, include_prob=0.9, extend_prob=0.8,
                           max_rank=None, bracket=(1e-3, 1e3), target_tol=0.05):
    """Choose the geometric growth so the prior mean rank hits a spectral target.

    The target rank is the smallest index ``t`` (1-based, zero eigenvalues
    skipped) whose eigenvalue satisfies ``ev[2] / ev[t] <= pct``, i.e. the
    first inverse eigenvalue that is at most ``pct`` of the second largest
    inverse eigenvalue; if none qualifies the target falls back to
    ``max_rank`` with a warning.  ``growth`` is then solved by bisection so
    the prior expectation matches the target within ``target_tol``.

    Returns ``(growth, target)``.
    """
    ev = np.asarray(eigenvalues, dtype=float)
    scale = ev.max() if ev.size else 0.0
    nonzero = np.sort(ev[ev > 1e-10 * max(scale, 1e-30)])
    if len(nonzero) < 3:
        raise ValueError("need at least 3 nonzero eigenvalues to elicit the rank prior")
    if max_rank is None:
        max_rank = len(ev)
    ratios = nonzero[1] / nonzero
    hits = np.flatnonzero(ratios <= pct)
    if hits.size:
        target = int(hits[0]) + 1
    else:
        target = max_rank
        log.warning("no eigenvalue ratio reaches pct=%.3g; target rank set to max_rank=%d",
                    pct, max_rank)
    target = min(target, max_rank)

    def expect(growth):
        return tau_prior(include_prob, extend_prob, growth, max_rank).expectation

    lo, hi = bracket
    if expect(hi) < target - target_tol:
        log.warning("target rank %d unattainable within growth bracket; returning upper end", target)
        return hi, target
    if expect(lo) > target + target_tol:
        log.warning("target rank %d below reach of growth bracket; returning lower end", target)
        return lo, target
    for _ in range(200):
        mid = np.sqrt(lo * hi)
        e = expect(mid)
        if abs(e - target) < target_tol:
            return mid, target
        if e < target:
            lo = mid
        else:
            hi = mid
    return np.sqrt(lo * hi), target


def _ridge(roughness):
    """Regularize the penalty core once, globally, so Gaussian densities are
    comparable across every conditional rank."""
    K = roughness.shape[0]
    tr = float(np.trace(roughness))
    scale = tr / K if tr > 0 else 1.0
    return roughness + RIDGE_EPS * scale * np.eye(K)


def expected_prior_precision(spike_probs, spike_ratio, penalty, roughness):
    """Expected coefficient precision given per-index spike probabilities.

    ``spike_probs[i]`` is the posterior chance index ``i + 1`` lies beyond the
    rank (in the spike).  The scaling ``s = spike_probs / spike_ratio +
    (1 - spike_probs)`` is applied as a symmetric congruence around the
    ridge-regularized penalty core, which reproduces the exact conditional
    precision whenever the probabilities are binary and interpolates smoothly
    in between.
    """
    nu = np.asarray(spike_probs, dtype=float)
    if np.any(nu < 0) or np.any(nu > 1):
        raise ValueError("spike probabilities must lie in [0, 1]")
    A = _ridge(roughness)
    root = np.sqrt(nu / spike_ratio + (1.0 - nu))
    return penalty * (root[:, None] * A * root[None, :])


@dataclass
class TauPosterior:
    probs: np.ndarray          # (max_rank + 1,)
    spike_probs: np.ndarray    # (max_rank,) cumulative, non-decreasing
    log_densities: np.ndarray  # log N(theta | 0, cov_rank) per rank


def estep_tau_posterior(theta, prior, penalty, spike_ratio, roughness):
    """Posterior over the rank given current expansion coefficients.

    Coefficient densities are zero-mean Gaussians whose covariance scales the
    (ridge-regularized, hence full-rank) inverse penalty core by the
    spike/slab pattern of each candidate rank; the normalizing constants are
    then comparable across ranks.  Everything is evaluated in log space.
    """
    theta = np.asarray(theta, dtype=float)
    K = prior.max_rank
    if len(theta) != K:
        raise ValueError(f"theta must have length {K}")
    A = _ridge(roughness)
    sign, logdet_a = np.linalg.slogdet(A)
    if sign <= 0:
        raise np.linalg.LinAlgError("regularized penalty core is not positive definite")
    log_v0 = np.log(spike_ratio)
    base = -0.5 * (K * np.log(2 * np.pi) - K * np.log(penalty) - logdet_a)
    log_dens = np.empty(K + 1)
    for rank in range(K + 1):
        u = theta.copy()
        u[rank:] /= np.sqrt(spike_ratio)   # indices beyond the rank sit in the spike
        quad = penalty * float(u @ A @ u)
        logdet_scale = (K - rank) * log_v0  # log|cov| change from the spike block
        log_dens[rank] = base - 0.5 * (logdet_scale + quad)
    with np.errstate(divide="ignore"):
        log_post = log_dens + np.log(prior.probs)
    if np.all(np.isinf(log_post)):
        raise ValueError("all rank posteriors vanish; coefficients are pathological")
    log_post -= logsumexp(log_post)
    probs = np.exp(log_post)
    probs /= probs.sum()
    spike_probs = np.cumsum(probs)[:K]
    return TauPosterior(probs=probs, spike_probs=np.clip(spike_probs, 0.0, 1.0),
                        log_densities=log_dens)


def centroid_gain(a, b, max_rank, gain_ratio):
    """Gain between two ranks: matched trailing zeros count 1 each, matched
    leading ones count ``gain_ratio`` each, mismatches nothing."""
    return max_rank - max(a, b) + gain_ratio * min(a, b)


def sequential_centroid(posterior, gain_ratio):
    """Rank maximizing the expected centroid gain.

    Equals the number of cumulative posterior values strictly below
    ``gain_ratio / (1 + gain_ratio)``: the expected gain rises exactly while
    the cumulative posterior stays under that threshold, so the estimator
    expands the basis until the threshold is crossed.  A point mass at rank 0
    yields 0.
    """
    posterior = np.asarray(posterior, dtype=float)
    if abs(posterior.sum() - 1.0) > 1e-8:
        raise ValueError("posterior must sum to 1")
    if gain_ratio <= 0:
        raise ValueError("gain_ratio must be positive")
    threshold = gain_ratio / (1.0 + gain_ratio)
    cum = np.cumsum(posterior)
    return int(np.sum(cum < threshold))


@dataclass
class PredictorEM:
    theta: np.ndarray
    posterior: TauPosterior
    deviances: np.ndarray
    objective_trace: np.ndarray
    iterations: int
    converged: bool


def marginal_log_posterior(theta, y, design_block, offset, prior, penalty,
                           spike_ratio, roughness):
    """Observed-data log posterior with the rank marginalized out.

    Poisson log likelihood of the response at ``offset + design_block @ theta``
    plus the log of the rank-mixture Gaussian prior density at ``theta``.
    This is the quantity the per-predictor EM ascends.
    """
    eta = design_block @ theta + offset
    llik = float(np.sum(y * eta - np.exp(np.clip(eta, -700, 700)) - gammaln(y + 1.0)))
    post = estep_tau_posterior(theta, prior, penalty, spike_ratio, roughness)
    with np.errstate(divide="ignore"):
        mix = logsumexp(post.log_densities + np.log(prior.probs))
    return llik + float(mix)


def predictor_em(y, design_block, offset, roughness, prior, penalty, spike_ratio,
                 theta0=None, family="poisson", tol=1e-6, max_iter=200,
                 glm_kwargs=None, track_objective=False):
    """EM for one predictor: rank posterior E-step, penalized refit M-step.

    Without a warm start the first refit runs under the prior-expected spike
    pattern (the E-step expectation before any coefficient information), so
    genuine signal can surface before the first E-step; a cold all-zero
    start would otherwise be an absorbing spike state.  Converges when the
    M-step deviance changes by less than ``tol`` between successive refits.
    """
    K = prior.max_rank
    glm_kwargs = glm_kwargs or {}
    if theta0 is None:
        nu0 = np.cumsum(prior.probs)[:K]
        P0 = expected_prior_precision(nu0, spike_ratio, penalty, roughness)
        warm = fit_glm(design_block, y, family=family, offset=offset,
                       prior_precision=P0, **glm_kwargs)
        theta = warm.coef
    else:
        theta = np.asarray(theta0, dtype=float).copy()

    def current_objective(th, post):
        eta = design_block @ th + offset
        llik = float(np.sum(y * eta - np.exp(np.clip(eta, -700, 700)) - gammaln(y + 1.0)))
        with np.errstate(divide="ignore"):
            mix = logsumexp(post.log_densities + np.log(prior.probs))
        return llik + float(mix)

    deviances = []
    objective = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        posterior = estep_tau_posterior(theta, prior, penalty, spike_ratio, roughness)
        if track_objective:
            objective.append(current_objective(theta, posterior))
        P = expected_prior_precision(posterior.spike_probs, spike_ratio, penalty, roughness)
        fit = fit_glm(design_block, y, family=family, offset=offset,
                      prior_precision=P, **glm_kwargs)
        theta = fit.coef
        deviances.append(fit.deviance)
        if len(deviances) > 1 and abs(deviances[-1] - deviances[-2]) < tol:
            converged = True
            break
    posterior = estep_tau_posterior(theta, prior, penalty, spike_ratio, roughness)
    if track_objective:
        objective.append(current_objective(theta, posterior))
    return PredictorEM(theta=theta, posterior=posterior,
                       deviances=np.asarray(deviances),
                       objective_trace=np.asarray(objective),
                       iterations=it, converged=converged)


@dataclass
class RankSelection:
    ranks: np.ndarray        # (p + 1,)
    posteriors: np.ndarray   # (p + 1, max_rank + 1) final rank posteriors
    theta: np.ndarray        # (p + 1, max_rank) coefficients at full width
    cycles: int
    converged: bool


def select_ranks(y, covariates, basis, lap, prior, penalty, spike_ratio,
                 gain_ratio=4.0, family="poisson", inner_tol=1e-6,
                 inner_max_iter=200, max_cycles=50, glm_kwargs=None):
    """Cycle the per-predictor EM until the rank vector stabilizes.

    Predictors are visited intercept first, then covariates in input order;
    each sees the others' current contributions through the offset.  Returns
    the selected ranks together with the final posteriors (the content of a
    rank-selection report) and the full-width coefficients.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(covariates, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    K = prior.max_rank
    if K > basis.k:
        raise ValueError(f"prior max_rank {K} exceeds basis size {basis.k}")
    phi = basis.vectors[:, :K]
    blocks = [phi] + [X[:, j][:, None] * phi for j in range(p)]
    cores = [roughness_matrix(B, lap) for B in blocks]

    theta = np.zeros((p + 1, K))
    contribs = np.zeros((p + 1, n))
    posteriors = np.zeros((p + 1, K + 1))
    ranks = np.full(p + 1, -1, dtype=int)
    converged = False
    cycle = 0
    for cycle in range(1, max_cycles + 1):
        previous = ranks.copy()
        for j in range(p + 1):
            offset = contribs.sum(axis=0) - contribs[j]
            # cold start on the first visit, warm start afterwards
            warm = None if cycle == 1 else theta[j]
            res = predictor_em(y, blocks[j], offset, cores[j], prior, penalty,
                               spike_ratio, theta0=warm, family=family,
                               tol=inner_tol, max_iter=inner_max_iter,
                               glm_kwargs=glm_kwargs)
            theta[j] = res.theta
            contribs[j] = blocks[j] @ res.theta
            posteriors[j] = res.posterior.probs
            ranks[j] = sequential_centroid(res.posterior.probs, gain_ratio)
        if np.array_equal(ranks, previous):
            converged = True
            break
    if not converged:
        log.warning("rank selection did not stabilize within %d cycles; returning last ranks %s",
                    max_cycles, ranks.tolist())
    return RankSelection(ranks=ranks, posteriors=posteriors, theta=theta,
                         cycles=cycle, converged=converged)
