"""Synthetic scenarios with planted hot zones and the four-model comparison.

A scenario is a BFS-sampled subgraph carrying smooth synthetic covariates,
three BFS-grown hot zones, a coefficient surface drawn from the smoothness
prior, and negative-binomial counts.  The comparison harness fits four
models of increasing structure and reports stratified relative errors
(per hot zone and background), the metric used to rank the models.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .glm import fit_glm, loop_statistic
from .graph import (WeightedGraph, apply_weights, bfs_subgraph, bfs_vertices,
                    build_laplacian, calibrate_range, component_sizes)
from .hotzone import fit_hotzone, initialize_hotzone, predict_counts
from .rank_selection import elicit_tau_hyperparams, tau_prior
from .serialize import load_arrays, save_arrays
from .spectral import build_design, eigenbasis, roughness_matrix
from .tuning import golden_section_min, tune

log = logging.getLogger(__name__)


@dataclass
class ScenarioConfig:
    """Knobs of the generative protocol (defaults mirror the full-size study;
    desk-scale runs shrink ``subgraph_size``)."""

    subgraph_size: int = 818
    n_zones: int = 3
    zone_size: int = 40
    bg_log_rate: float = -2.5
    universal_rank: int = 10
    n_covariates: int = 2
    covariate_smoothness: int = 8   # eigenvectors mixed into each covariate; 0 = iid noise
    prior_penalty: float = 1.0      # smoothness penalty of the generating prior
    eta_sd: float | None = 0.6      # rescale the hot linear predictor to this sd (None = raw draw)
    hot_shift: float = 1.0          # mean hot-zone log rate after recentering
    dispersion: float = 1.0         # NB size; variance mu + mu^2/dispersion
    calib_quantile: float = 0.5
    calib_similarity: float = 0.8


@dataclass
class Scenario:
    graph: WeightedGraph
    covariates: np.ndarray
    zones: list                    # vertex index arrays, one per hot zone
    background: np.ndarray         # 1 = background vertex
    theta_true: np.ndarray
    rates: np.ndarray
    counts: np.ndarray
    bg_log_rate: float
    decay_range: float
    universal_rank: int
    seed: int

    @property
    def n_vertices(self):
        return self.graph.n_vertices


def sample_prior_theta(design, lap, penalty, rng):
    """Draw expansion coefficients from the smoothness prior.

    The prior covariance is the scaled pseudo-inverse of the penalty core, so
    the draw scales each eigendirection by ``1/sqrt(penalty * eigenvalue)``
    and puts exactly zero in null directions.
    """
    D = design.matrix if hasattr(design, "matrix") else np.asarray(design, dtype=float)
    A = roughness_matrix(D, lap)
    vals, vecs = np.linalg.eigh(A)
    keep = vals > 1e-10 * max(vals.max(), 1e-30)
    z = rng.standard_normal(int(keep.sum()))
    return vecs[:, keep] @ (z / np.sqrt(penalty * vals[keep]))


def negative_binomial_counts(rng, mu, dispersion=1.0):
    """NB draws with mean ``mu`` and variance ``mu + mu**2 / dispersion``."""
    mu = np.asarray(mu, dtype=float)
    p = dispersion / (dispersion + mu)
    return rng.negative_binomial(dispersion, p)


def generate_scenario(graph, config, seed):
    """Run the generative protocol on a base graph with a fixed seed.

    All randomness flows from ``seed``; repeated calls are byte-identical.
    Zone sources are drawn uniformly among unclaimed vertices and redrawn
    (up to 100 times) when the grown zone would overlap an existing one.
    """
    rng = np.random.default_rng(seed)
    sizes, labels = component_sizes(graph)
    eligible = np.flatnonzero(sizes[labels] >= config.subgraph_size)
    if eligible.size == 0:
        raise ValueError(
            f"no component has {config.subgraph_size} vertices (largest: {sizes.max()})")
    source = int(rng.choice(eligible))
    sub = bfs_subgraph(graph, source, config.subgraph_size)
    psi = calibrate_range(sub.distances, config.calib_quantile, config.calib_similarity)
    sub = apply_weights(sub, psi)
    lap = build_laplacian(sub)
    n = sub.n_vertices

    k_basis = max(config.universal_rank, config.covariate_smoothness + 1)
    basis = eigenbasis(lap, min(k_basis, n - 1))

    X = np.empty((n, config.n_covariates))
    for j in range(config.n_covariates):
        if config.covariate_smoothness > 0:
            mix = rng.standard_normal(config.covariate_smoothness)
            x = basis.vectors[:, 1:config.covariate_smoothness + 1] @ mix
        else:
            x = rng.standard_normal(n)
        sd = x.std()
        X[:, j] = (x - x.mean()) / (sd if sd > 0 else 1.0)

    ranks = np.full(config.n_covariates + 1, config.universal_rank)
    design = build_design(X, basis, ranks)
    theta = sample_prior_theta(design, lap, config.prior_penalty, rng)
    eta = design.matrix @ theta
    if config.eta_sd is not None and eta.std() > 0:
        # the prior leaves the near-constant level of the surface essentially
        # free; recenter it on hot_shift and pin the spread, folding the
        # adjustment back into the constant eigenvector (1/sqrt(n) on a
        # connected subgraph) so design @ theta still reproduces eta
        scale = config.eta_sd / eta.std()
        shift = config.hot_shift - scale * eta.mean()
        theta = theta * scale
        theta[0] += shift * np.sqrt(n)
        eta = eta * scale + shift
    elif config.hot_shift:
        theta = theta.copy()
        theta[0] += config.hot_shift * np.sqrt(n)
        eta = eta + config.hot_shift

    zones = []
    claimed = np.zeros(n, dtype=bool)
    for _ in range(config.n_zones):
        size = min(config.zone_size, n)
        zone = None
        fallback = None
        for attempt in range(100):
            free = np.flatnonzero(~claimed)
            src = int(rng.choice(free))
            try:
                # grow the zone inside unclaimed territory to keep zones disjoint
                zone = bfs_vertices(sub, src, size, allowed=~claimed)
                break
            except ValueError:
                fallback = src
        if zone is None:
            log.warning("hot zones overlap after 100 source draws; accepting the overlap")
            zone = bfs_vertices(sub, fallback, size)
        claimed[zone] = True
        zones.append(zone)

    background = np.ones(n)
    for zone in zones:
        background[zone] = 0.0
    log_rate = np.where(background == 1.0, config.bg_log_rate, eta)
    rates = np.exp(np.clip(log_rate, -30.0, 30.0))
    counts = negative_binomial_counts(rng, rates, config.dispersion)

    return Scenario(graph=sub, covariates=X, zones=zones, background=background,
                    theta_true=theta, rates=rates, counts=counts,
                    bg_log_rate=config.bg_log_rate, decay_range=psi,
                    universal_rank=config.universal_rank, seed=seed)


def save_scenario(path, scenario):
    g = scenario.graph
    arrays = {
        "src": g.src, "dst": g.dst, "distances": g.distances, "weights": g.weights,
        "covariates": scenario.covariates, "background": scenario.background,
        "theta_true": scenario.theta_true, "rates": scenario.rates,
        "counts": scenario.counts,
    }
    if g.vertex_labels is not None:
        arrays["vertex_labels"] = np.asarray(g.vertex_labels, dtype="U32")
    for i, zone in enumerate(scenario.zones):
        arrays[f"zone_{i}"] = zone
    meta = {
        "n_vertices": int(g.n_vertices),
        "n_zones": len(scenario.zones),
        "bg_log_rate": scenario.bg_log_rate,
        "decay_range": scenario.decay_range,
        "universal_rank": int(scenario.universal_rank),
        "seed": int(scenario.seed),
    }
    save_arrays(path, arrays, meta)


def load_scenario(path):
    arrays, meta = load_arrays(path)
    labels = arrays.get("vertex_labels")
    graph = WeightedGraph(
        n_vertices=meta["n_vertices"], src=arrays["src"], dst=arrays["dst"],
        distances=arrays["distances"], weights=arrays["weights"],
        vertex_labels=labels,
    )
    zones = [arrays[f"zone_{i}"] for i in range(meta["n_zones"])]
    return Scenario(graph=graph, covariates=arrays["covariates"], zones=zones,
                    background=arrays["background"], theta_true=arrays["theta_true"],
                    rates=arrays["rates"], counts=arrays["counts"],
                    bg_log_rate=meta["bg_log_rate"], decay_range=meta["decay_range"],
                    universal_rank=meta["universal_rank"], seed=meta["seed"])


def relative_error(y, mu, idx=None):
    """Sum of absolute errors over the total count; scale-free."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if idx is not None:
        y, mu = y[idx], mu[idx]
    total = y.sum()
    if total == 0:
        return np.nan
    return float(np.abs(y - mu).sum() / total)


@dataclass
class ComparisonConfig:
    max_rank: int = 25
    spike_grid: tuple = (0.05, 0.2, 0.4)
    gain_ratio: float = 4.0
    include_prob: float = 0.9
    extend_prob: float = 0.8
    elicit_pct: float = 0.05
    bracket: tuple = (1e-3, 1e3)
    golden_tol: float = 1e-2
    max_alternations: int = 2
    quartile: float = 0.75
    em_tol: float = 1e-6
    em_max_iter: int = 300
    cond_limit: float = 1e10
    inner_tol: float = 1e-6
    inner_max_iter: int = 60
    max_cycles: int = 10
    glm_tol: float = 1e-8
    glm_max_iter: int = 100


MODEL_NAMES = ("Mod1", "Mod2", "Mod3", "Mod4")


@dataclass
class ComparisonReport:
    """Per-model predictions and stratified relative errors for one scenario."""

    strata: dict                    # name -> vertex index array
    predictions: dict               # model -> mu array (or None on failure)
    errors: dict                    # (model, stratum) -> relative error
    pooled_hot: dict                # model -> relative error over all hot vertices
    failures: dict                  # model -> error message
    timings: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def rows(self, replicate=0):
        out = []
        for model in MODEL_NAMES:
            for stratum in self.strata:
                if model in self.failures:
                    continue
                out.append({"replicate": replicate, "model": model, "stratum": stratum,
                            "relative_error": self.errors[(model, stratum)]})
        return out


def _fit_mod1(scenario, basis, lap, cfg, glm_kwargs):
    """Intercept-only smoothed Poisson; rank capped by the conditioning of the
    penalized normal equations."""
    y = scenario.counts
    rank = basis.k
    while rank >= 1:
        design = basis.vectors[:, :rank]
        P_core = np.diag(basis.eigenvalues[:rank])

        def objective(log_lam):
            lam = float(np.exp(log_lam))
            fit = fit_glm(design, y, family="poisson", prior_precision=lam * P_core,
                          **glm_kwargs)
            return loop_statistic(fit)

        log_best, _ = golden_section_min(objective, np.log(cfg.bracket[0]),
                                         np.log(cfg.bracket[1]), np.log1p(cfg.golden_tol))
        lam = float(np.exp(log_best))
        fit = fit_glm(design, y, family="poisson", prior_precision=lam * P_core,
                      **glm_kwargs)
        A = design.T @ (fit.working_weights[:, None] * design) + lam * P_core
        cond = np.linalg.cond(A)
        if cond < cfg.cond_limit:
            return fit.fitted, {"rank": rank, "penalty": lam, "cond": cond}
        rank -= 1
    raise RuntimeError("no basis rank keeps the normal equations invertible")


def _fit_mod2(scenario, glm_kwargs):
    """Plain covariate Poisson regression, network ignored."""
    X = scenario.covariates
    design = np.column_stack([np.ones(scenario.n_vertices), X]) if X.shape[1] else \
        np.ones((scenario.n_vertices, 1))
    fit = fit_glm(design, scenario.counts, family="poisson", **glm_kwargs)
    return fit.fitted, {}


def _fit_mod3(scenario, basis, lap, cfg, glm_kwargs):
    """Smoothed covariate model with rank selection and tuned penalty."""
    growth, _ = elicit_tau_hyperparams(basis.eigenvalues, pct=cfg.elicit_pct,
                                       include_prob=cfg.include_prob,
                                       extend_prob=cfg.extend_prob,
                                       max_rank=basis.k)
    prior = tau_prior(cfg.include_prob, cfg.extend_prob, growth, basis.k)
    result = tune(scenario.counts, scenario.covariates, basis, lap, prior,
                  spike_grid=cfg.spike_grid, gain_ratio=cfg.gain_ratio,
                  bracket=cfg.bracket, golden_tol=cfg.golden_tol,
                  max_alternations=cfg.max_alternations,
                  select_kwargs={"inner_tol": cfg.inner_tol,
                                 "inner_max_iter": cfg.inner_max_iter,
                                 "max_cycles": cfg.max_cycles},
                  glm_kwargs=glm_kwargs)
    if result.fit is None:
        raise RuntimeError("tuning selected an empty design (all ranks zero)")
    return result.fit.fitted, result


def _fit_mod4(scenario, basis, lap, cfg, tune_result, glm_kwargs):
    """Full mixture model initialized from the smoothed fit's top quartile."""
    design = build_design(scenario.covariates, basis, tune_result.ranks)
    init = initialize_hotzone(scenario.counts, design, design,
                              tune_result.fit.fitted, lap,
                              tune_result.penalty, tune_result.penalty,
                              quartile=cfg.quartile, glm_kwargs=glm_kwargs)
    model = fit_hotzone(scenario.counts, design, design, lap,
                        tune_result.penalty, tune_result.penalty, init,
                        tol=cfg.em_tol, max_iter=cfg.em_max_iter,
                        glm_kwargs=glm_kwargs)
    return predict_counts(model), model


def run_comparison(scenario, cfg=None):
    """Fit the four comparison models and compute stratified relative errors.

    A model failure is recorded and the remaining models still run (the full
    mixture depends on the smoothed model, so it inherits that failure).
    """
    cfg = cfg or ComparisonConfig()
    glm_kwargs = {"tol": cfg.glm_tol, "max_iter": cfg.glm_max_iter}
    lap = build_laplacian(scenario.graph)
    k = min(cfg.max_rank, scenario.n_vertices - 1)
    basis = eigenbasis(lap, k)

    strata = {f"HZ{i + 1}": zone for i, zone in enumerate(scenario.zones)}
    strata["BG"] = np.flatnonzero(scenario.background == 1.0)
    hot_all = np.flatnonzero(scenario.background == 0.0)

    predictions = {}
    failures = {}
    timings = {}
    meta = {}
    tune_result = None
    hot_model = None
    for model in MODEL_NAMES:
        start = time.perf_counter()
        try:
            if model == "Mod1":
                mu, info = _fit_mod1(scenario, basis, lap, cfg, glm_kwargs)
                meta["mod1"] = info
            elif model == "Mod2":
                mu, _ = _fit_mod2(scenario, glm_kwargs)
            elif model == "Mod3":
                mu, tune_result = _fit_mod3(scenario, basis, lap, cfg, glm_kwargs)
                meta["mod3"] = {"penalty": tune_result.penalty,
                                "spike_ratio": tune_result.spike_ratio,
                                "ranks": tune_result.ranks.tolist()}
            else:
                if tune_result is None:
                    raise RuntimeError("smoothed model unavailable for initialization")
                mu, hot_model = _fit_mod4(scenario, basis, lap, cfg, tune_result, glm_kwargs)
                meta["mod4"] = {"iterations": hot_model.iterations,
                                "converged": hot_model.converged,
                                "bg_log_rate": hot_model.bg_log_rate,
                                "bg_prob": hot_model.bg_prob}
            predictions[model] = mu
        except Exception as exc:
            log.warning("%s failed: %s", model, exc)
            failures[model] = str(exc)
            predictions[model] = None
        timings[model] = time.perf_counter() - start

    errors = {}
    pooled = {}
    for model in MODEL_NAMES:
        mu = predictions[model]
        for name, idx in strata.items():
            errors[(model, name)] = np.nan if mu is None else relative_error(scenario.counts, mu, idx)
        pooled[model] = np.nan if mu is None else relative_error(scenario.counts, mu, hot_all)

    return ComparisonReport(strata=strata, predictions=predictions, errors=errors,
                            pooled_hot=pooled, failures=failures, timings=timings, meta=meta)


def lattice_graph(rows, cols, seed=0, extra_edges=0.05):
    """Jittered grid graph usable as a synthetic base network.

    Distances are uniform on (0.05, 0.3); a few random chords make the
    topology less regular.  Deterministic given the seed.
    """
    rng = np.random.default_rng(seed)
    n = rows * cols
    edges = []
    for r in range(rows):
        for c in range(cols):
            v = r * cols + c
            if c + 1 < cols:
                edges.append((v, v + 1, rng.uniform(0.05, 0.3)))
            if r + 1 < rows:
                edges.append((v, v + cols, rng.uniform(0.05, 0.3)))
    n_extra = int(extra_edges * n)
    for _ in range(n_extra):
        a, b = rng.integers(0, n, size=2)
        if a != b:
            edges.append((min(a, b), max(a, b), rng.uniform(0.2, 0.6)))
    return WeightedGraph.from_edges(n, edges)
