"""Latent two-state mixture separating background from covariate-driven rates.

Each vertex is either in the background state (flat log rate shared across
the graph) or in a hot zone where the rate follows the smoothed
covariate model.  A smoothed logistic model on a second design governs the
state odds.  Fitting alternates the exact posterior state probabilities with
three conditional maximizations: a closed-form background-rate update, a
quasi-Poisson refit of the rate surface, and a quasi-binomial refit of the
state odds.  Convention throughout: state 1 = background, so ``bg_prob[v]``
is the posterior probability that vertex ``v`` sits in the background.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .glm import deviance, fit_glm
from .spectral import roughness_matrix

log = logging.getLogger(__name__)

PROB_CLIP = 1e-12  # keeps the log offsets finite at hard 0/1 posteriors


def _log_poisson(y, log_mu):
    return y * log_mu - np.exp(np.clip(log_mu, -700, 700)) - gammaln(y + 1.0)


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


@dataclass
class HotzoneInit:
    background: np.ndarray   # 0/1 indicator, 1 = background vertex
    theta: np.ndarray
    omega: np.ndarray
    bg_log_rate: float
    degenerate: bool


@dataclass
class HotzoneModel:
    theta: np.ndarray            # rate-surface expansion coefficients
    omega: np.ndarray            # state-odds expansion coefficients
    bg_log_rate: float
    bg_prob: np.ndarray          # posterior background probability per vertex
    penalty_main: float
    penalty_latent: float
    deviance_trace: np.ndarray   # combined deviance of the three M-steps
    log_posterior_trace: np.ndarray
    converged: bool
    iterations: int
    design_x: np.ndarray
    design_u: np.ndarray


def initialize_hotzone(y, design_x, design_u, base_fitted, lap, penalty_main,
                       penalty_latent, quartile=0.75, glm_kwargs=None):
    """Starting state from the predictions of the smoothed count model.

    Vertices whose predicted counts fall in the top ``1 - quartile`` fraction
    start as hot (ties broken by ascending vertex id); the rate surface is
    refit on the hot vertices via offset masking, the state odds on the 0/1
    indicator, and the background log rate is the log mean count over the
    remaining vertices, floored at ``log(0.5 / n)`` when that mean is zero.
    """
    y = np.asarray(y, dtype=float)
    Dx = design_x.matrix if hasattr(design_x, "matrix") else np.asarray(design_x, float)
    Du = design_u.matrix if hasattr(design_u, "matrix") else np.asarray(design_u, float)
    fitted = np.asarray(base_fitted, dtype=float)
    n = len(y)
    n_hot = int(round(n * (1.0 - quartile)))
    if n_hot < 1 or n_hot >= n:
        raise ValueError(
            f"quartile {quartile} leaves an empty stratum for n={n}; choose a different quartile"
        )
    degenerate = bool(np.ptp(fitted) == 0)
    if degenerate:
        log.warning("all predicted counts equal; hot/background split is decided by vertex id")
    order = np.lexsort((np.arange(n), -fitted))  # fitted desc, then id asc
    background = np.ones(n)
    background[order[:n_hot]] = 0.0

    glm_kwargs = glm_kwargs or {}
    hot = 1.0 - background
    off_hot = np.log(np.clip(hot, PROB_CLIP, None))
    theta_fit = fit_glm(Dx, hot * y, family="quasipoisson", offset=off_hot,
                        prior_precision=penalty_main * roughness_matrix(Dx, lap),
                        **glm_kwargs)
    omega_fit = fit_glm(Du, background, family="quasibinomial",
                        prior_precision=penalty_latent * roughness_matrix(Du, lap),
                        **glm_kwargs)
    bg_counts = y[background == 1.0]
    mean_bg = bg_counts.mean() if bg_counts.size else 0.0
    if mean_bg <= 0:
        bg_log_rate = np.log(0.5 / n)
        log.warning("background vertices have zero mean count; flooring log rate at %.4f",
                    bg_log_rate)
    else:
        bg_log_rate = float(np.log(mean_bg))
    return HotzoneInit(background=background, theta=theta_fit.coef, omega=omega_fit.coef,
                       bg_log_rate=bg_log_rate, degenerate=degenerate)


def estep_bg_prob(y, design_x, design_u, theta, omega, bg_log_rate):
    """Exact posterior probability of the background state per vertex.

    Two-state Bayes rule on Poisson likelihoods with logistic prior odds,
    evaluated in log space with log-sum-exp.
    """
    y = np.asarray(y, dtype=float)
    Dx = design_x.matrix if hasattr(design_x, "matrix") else np.asarray(design_x, float)
    Du = design_u.matrix if hasattr(design_u, "matrix") else np.asarray(design_u, float)
    eta_u = Du @ omega
    log_bg = _log_poisson(y, np.full_like(y, bg_log_rate)) + _log_sigmoid(eta_u)
    log_hot = _log_poisson(y, Dx @ theta) + _log_sigmoid(-eta_u)
    return np.exp(log_bg - np.logaddexp(log_bg, log_hot))


def bg_rate_closed_form(bg_prob, y, floor_rate):
    """Weighted mean count of the background state, on the log scale."""
    w = np.clip(bg_prob, PROB_CLIP, None)
    mean = float(w @ y) / float(w.sum())
    return float(np.log(max(mean, floor_rate)))


def bg_rate_regression(bg_prob, y, glm_kwargs=None):
    """Background log rate via intercept-only quasi-Poisson regression.

    Regresses the probability-weighted counts on a constant with the log
    probabilities as offset; kept as a cross-check of the closed form
    (the two agree to near machine precision).
    """
    pi = np.clip(bg_prob, PROB_CLIP, 1.0 - PROB_CLIP)
    ones = np.ones((len(y), 1))
    fit = fit_glm(ones, pi * y, family="quasipoisson", offset=np.log(pi),
                  **(glm_kwargs or {}))
    return float(fit.coef[0])


def observed_log_posterior(y, design_x, design_u, theta, omega, bg_log_rate,
                           precision_main, precision_latent):
    """Penalized observed-data log posterior of the mixture (states summed out)."""
    y = np.asarray(y, dtype=float)
    Dx = design_x.matrix if hasattr(design_x, "matrix") else np.asarray(design_x, float)
    Du = design_u.matrix if hasattr(design_u, "matrix") else np.asarray(design_u, float)
    eta_u = Du @ omega
    log_bg = _log_poisson(y, np.full_like(y, bg_log_rate)) + _log_sigmoid(eta_u)
    log_hot = _log_poisson(y, Dx @ theta) + _log_sigmoid(-eta_u)
    llik = float(np.logaddexp(log_bg, log_hot).sum())
    pen = 0.5 * float(theta @ precision_main @ theta) + \
        0.5 * float(omega @ precision_latent @ omega)
    return llik - pen


def fit_hotzone(y, design_x, design_u, lap, penalty_main, penalty_latent, init,
                tol=1e-6, max_iter=500, glm_kwargs=None):
    """Run the mixture EM from an initial state until the combined deviance
    of the three M-steps stabilizes.

    Any failure inside an M-step aborts with the iteration and step named.
    """
    y = np.asarray(y, dtype=float)
    Dx = design_x.matrix if hasattr(design_x, "matrix") else np.asarray(design_x, float)
    Du = design_u.matrix if hasattr(design_u, "matrix") else np.asarray(design_u, float)
    n = len(y)
    P_theta = penalty_main * roughness_matrix(Dx, lap)
    P_omega = penalty_latent * roughness_matrix(Du, lap)
    glm_kwargs = glm_kwargs or {}

    theta = np.asarray(init.theta, dtype=float).copy()
    omega = np.asarray(init.omega, dtype=float).copy()
    bg_log_rate = float(init.bg_log_rate)
    floor_rate = 0.5 / n

    dev_trace = []
    lp_trace = []
    pi = estep_bg_prob(y, Dx, Du, theta, omega, bg_log_rate)
    converged = False
    it = 0
    prev_dev = np.inf
    for it in range(1, max_iter + 1):
        pi_c = np.clip(pi, PROB_CLIP, 1.0 - PROB_CLIP)
        try:
            bg_log_rate = bg_rate_closed_form(pi, y, floor_rate)
            dev_bg = deviance(pi_c * y, pi_c * np.exp(bg_log_rate), "quasipoisson")

            theta_fit = fit_glm(Dx, (1.0 - pi_c) * y, family="quasipoisson",
                                offset=np.log(1.0 - pi_c), prior_precision=P_theta,
                                **glm_kwargs)
            theta = theta_fit.coef

            omega_fit = fit_glm(Du, pi_c, family="quasibinomial",
                                prior_precision=P_omega, **glm_kwargs)
            omega = omega_fit.coef
        except Exception as exc:
            raise RuntimeError(f"hot-zone EM aborted at iteration {it}: {exc}") from exc

        combined = dev_bg + theta_fit.deviance + omega_fit.deviance
        if not np.isfinite(combined):
            raise RuntimeError(f"hot-zone EM produced a non-finite deviance at iteration {it}")
        dev_trace.append(combined)
        lp_trace.append(observed_log_posterior(y, Dx, Du, theta, omega, bg_log_rate,
                                               P_theta, P_omega))
        pi = estep_bg_prob(y, Dx, Du, theta, omega, bg_log_rate)
        if abs(combined - prev_dev) / (abs(combined) + 0.1) < tol:
            converged = True
            break
        prev_dev = combined
    if not converged:
        log.warning("hot-zone EM hit max_iter=%d without converging", max_iter)

    return HotzoneModel(
        theta=theta, omega=omega, bg_log_rate=bg_log_rate, bg_prob=pi,
        penalty_main=penalty_main, penalty_latent=penalty_latent,
        deviance_trace=np.asarray(dev_trace), log_posterior_trace=np.asarray(lp_trace),
        converged=converged, iterations=it, design_x=Dx, design_u=Du,
    )


def predict_counts(model):
    """Expected counts: the two state rates weighted by the state posterior."""
    hot_rate = np.exp(np.clip(model.design_x @ model.theta, -700, 700))
    return model.bg_prob * np.exp(model.bg_log_rate) + (1.0 - model.bg_prob) * hot_rate
