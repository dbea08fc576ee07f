"""Command-line entry points: fit, simulate, tune, predict, report.

Each subcommand reads a JSON config (all keys optional) which individual
flags override; every run writes a manifest capturing the effective config,
its hash, library versions, per-stage timings and iteration counts.  Stage
failures exit nonzero with the stage named.  Set ``NETGLM_THREADS`` to cap
the BLAS thread count.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import io as nio
from .graph import apply_weights, build_laplacian, calibrate_range, read_edgelist
from .hotzone import estep_bg_prob, fit_hotzone, initialize_hotzone, predict_counts
from .rank_selection import elicit_tau_hyperparams, tau_prior
from .simulation import (ComparisonConfig, ScenarioConfig, generate_scenario,
                         lattice_graph, run_comparison, save_scenario)
from .spectral import (basis_fingerprint, build_design, cached_eigenbasis,
                       default_max_rank, vertex_coefficients)
from .tuning import tune

log = logging.getLogger("netglm")


def _apply_thread_env():
    threads = os.environ.get("NETGLM_THREADS")
    if not threads:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, threads)
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(int(threads))
    except ImportError:
        pass


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


class _Stages:
    """Tracks per-stage wall time and surfaces failures with the stage name."""

    def __init__(self):
        self.timings = {}
        self.info = {}

    def run(self, name, fn):
        start = time.perf_counter()
        try:
            result = fn()
        except Exception as exc:
            raise StageError(name, exc) from exc
        self.timings[name] = time.perf_counter() - start
        return result


def _load_effective_config(args):
    config = nio.load_config(args.config) if args.config else nio.RunConfig()
    for f in dataclasses.fields(nio.RunConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            setattr(config, f.name, val)
    return config


def _prepare(config, stages, require_response=True):
    """Shared pipeline head: graph, weights, basis, covariates, rank prior."""
    if not config.edge_list or not config.covariates:
        raise StageError("load", "edge_list and covariates paths are required")
    outdir = Path(config.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)

    graph = stages.run("load_graph", lambda: read_edgelist(config.edge_list))
    ids, y, X, names = stages.run("load_covariates", lambda: nio.read_covariates(
        config.covariates, id_col=config.id_col, response_col=config.response_col,
        x_cols=config.x_cols))
    y, X = stages.run("align", lambda: nio.align_to_graph(graph, ids, y, X))
    if require_response and y is None:
        raise StageError("align", f"response column {config.response_col!r} not found")

    psi = config.decay_range
    if psi is None:
        psi = stages.run("calibrate", lambda: calibrate_range(
            graph.distances, config.calib_quantile, config.calib_similarity))
    weighted = apply_weights(graph, psi)
    lap = build_laplacian(weighted)

    k = config.max_rank or default_max_rank(graph.n_vertices)
    cache = outdir / "basis_cache.zip"
    basis = stages.run("eigenbasis", lambda: cached_eigenbasis(
        lap, weighted, k, cache, dense_cutoff=config.dense_cutoff))

    growth = config.growth
    target = None
    if growth is None:
        growth, target = stages.run("elicit", lambda: elicit_tau_hyperparams(
            basis.eigenvalues, pct=config.elicit_pct, include_prob=config.include_prob,
            extend_prob=config.extend_prob, max_rank=k))
    prior = tau_prior(config.include_prob, config.extend_prob, growth, k)
    stages.info["decay_range"] = float(psi)
    stages.info["growth"] = float(growth)
    stages.info["target_rank"] = target
    return weighted, lap, basis, y, X, names, prior, outdir


def _latent_design(config, stages, basis, ranks, X, names):
    """Design for the latent-state model: same as the main design unless
    ``u_cols`` asks for different covariates.

    A latent covariate shared with the main model reuses its selected rank;
    latent-only covariates get the intercept's rank (no selection signal of
    their own).  Returns ``(design_u, u_ranks, u_names)``.
    """
    if config.u_cols is None or list(config.u_cols) == list(config.x_cols or []):
        return None  # caller reuses the main design
    ids_u, _, U, u_names = stages.run("load_latent_covariates", lambda: nio.read_covariates(
        config.covariates, id_col=config.id_col, response_col=config.response_col,
        x_cols=config.u_cols))
    rank_of = dict(zip(names, ranks[1:]))
    u_ranks = np.array([ranks[0]] + [rank_of.get(c, ranks[0]) for c in u_names])
    return U, u_ranks, u_names, ids_u


def cmd_fit(config):
    stages = _Stages()
    weighted, lap, basis, y, X, names, prior, outdir = _prepare(config, stages)
    glm_kwargs = {"tol": config.glm_tol, "max_iter": config.glm_max_iter}

    tune_result = stages.run("tune", lambda: tune(
        y, X, basis, lap, prior, spike_grid=tuple(config.spike_grid),
        gain_ratio=config.gain_ratio, bracket=tuple(config.penalty_bracket),
        golden_tol=config.golden_tol, max_alternations=config.max_alternations,
        family=config.family,
        select_kwargs={"inner_tol": config.inner_tol,
                       "inner_max_iter": config.inner_max_iter,
                       "max_cycles": config.max_cycles},
        glm_kwargs=glm_kwargs))
    if tune_result.fit is None:
        raise StageError("tune", "all selected ranks are zero")

    penalty_latent = tune_result.penalty if config.latent_penalty is None \
        else config.latent_penalty
    design = build_design(X, basis, tune_result.ranks)
    latent = _latent_design(config, stages, basis, tune_result.ranks, X, names)
    if latent is None:
        design_u, u_ranks, u_names = design, tune_result.ranks, None
    else:
        U, u_ranks, u_names, ids_u = latent
        (U,) = nio.align_to_graph(weighted, ids_u, U)
        design_u = build_design(U, basis, u_ranks)

    def _hotzone():
        init = initialize_hotzone(y, design, design_u, tune_result.fit.fitted, lap,
                                  tune_result.penalty, penalty_latent,
                                  quartile=config.hot_quartile, glm_kwargs=glm_kwargs)
        return fit_hotzone(y, design, design_u, lap, tune_result.penalty,
                           penalty_latent, init, tol=config.em_tol,
                           max_iter=config.em_max_iter, glm_kwargs=glm_kwargs)

    model = stages.run("hotzone", _hotzone)

    def _emit():
        labels = weighted.vertex_labels
        if labels is None:
            labels = np.arange(weighted.n_vertices).astype(str)
        mu = predict_counts(model)
        surfaces = vertex_coefficients(model.theta, design)
        surface_names = ["intercept"] + list(names)
        nio.write_predictions(outdir / "predictions.csv", labels, y, mu,
                              model.bg_prob, surfaces, surface_names)
        nio.write_rank_report(outdir / "rank_report.csv", surface_names,
                              tune_result.selection.posteriors, tune_result.ranks)
        nio.write_tuning_report(outdir / "tuning_report.csv", tune_result.records)
        nio.write_vertex_map(outdir / "vertex_map.csv", labels)
        latent_names = surface_names if u_names is None else ["intercept"] + list(u_names)
        nio.save_model(
            outdir / "model.zip", theta=model.theta, omega=model.omega,
            bg_log_rate=model.bg_log_rate, bg_prob=model.bg_prob,
            ranks=tune_result.ranks, spike_ratio=tune_result.spike_ratio,
            penalty_main=tune_result.penalty, penalty_latent=penalty_latent,
            decay_range=stages.info["decay_range"], max_rank=basis.k,
            basis_key=basis_fingerprint(weighted, basis.k), vertex_labels=labels,
            covariate_names=surface_names, u_names=latent_names,
            u_ranks=u_ranks, cfg_hash=nio.config_hash(config),
            gain_ratio=config.gain_ratio)

    stages.run("emit", _emit)
    nio.write_manifest(outdir / "manifest.json", config, stages={
        "selected": {"spike_ratio": tune_result.spike_ratio,
                     "penalty": tune_result.penalty,
                     "ranks": tune_result.ranks.tolist(),
                     "loop": tune_result.loop,
                     **{k: v for k, v in stages.info.items() if v is not None}},
        "hotzone": {"iterations": model.iterations, "converged": bool(model.converged)},
    }, volatile={"timings": stages.timings, "finished": time.strftime("%Y-%m-%dT%H:%M:%S")})
    print(f"fit complete: {outdir}")
    return 0


def cmd_tune(config):
    stages = _Stages()
    _, lap, basis, y, X, _, prior, outdir = _prepare(config, stages)
    glm_kwargs = {"tol": config.glm_tol, "max_iter": config.glm_max_iter}
    result = stages.run("tune", lambda: tune(
        y, X, basis, lap, prior, spike_grid=tuple(config.spike_grid),
        gain_ratio=config.gain_ratio, bracket=tuple(config.penalty_bracket),
        golden_tol=config.golden_tol, max_alternations=config.max_alternations,
        family=config.family,
        select_kwargs={"inner_tol": config.inner_tol,
                       "inner_max_iter": config.inner_max_iter,
                       "max_cycles": config.max_cycles},
        glm_kwargs=glm_kwargs))
    nio.write_tuning_report(outdir / "tuning_report.csv", result.records)
    nio.write_manifest(outdir / "manifest.json", config, stages={
        "selected": {"spike_ratio": result.spike_ratio, "penalty": result.penalty,
                     "ranks": result.ranks.tolist(), "loop": result.loop}},
        volatile={"timings": stages.timings,
                  "finished": time.strftime("%Y-%m-%dT%H:%M:%S")})
    print(f"tuned: spike_ratio={result.spike_ratio} penalty={result.penalty:.6g} "
          f"ranks={result.ranks.tolist()} loop={result.loop:.6g}")
    return 0


def cmd_predict(config, model_path):
    stages = _Stages()
    arrays, meta = stages.run("load_model", lambda: nio.load_model(model_path))
    if not config.edge_list or not config.covariates:
        raise StageError("load", "edge_list and covariates paths are required")
    outdir = Path(config.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)

    graph = stages.run("load_graph", lambda: read_edgelist(config.edge_list))
    ids, y, X, names = stages.run("load_covariates", lambda: nio.read_covariates(
        config.covariates, id_col=config.id_col, response_col=config.response_col,
        x_cols=config.x_cols))
    y, X = stages.run("align", lambda: nio.align_to_graph(graph, ids, y, X))

    weighted = apply_weights(graph, meta["decay_range"])
    key = basis_fingerprint(weighted, meta["max_rank"])
    if key != meta["basis_key"]:
        raise StageError("basis_check",
                         f"graph/basis mismatch: artifact {meta['basis_key'][:12]}..., "
                         f"supplied {key[:12]}...")
    lap = build_laplacian(weighted)
    basis = stages.run("eigenbasis", lambda: cached_eigenbasis(
        lap, weighted, meta["max_rank"], outdir / "basis_cache.zip",
        dense_cutoff=config.dense_cutoff))
    design = build_design(X, basis, arrays["ranks"])
    if meta["u_names"] == meta["covariate_names"]:
        design_u = design
    else:
        u_cols = [c for c in meta["u_names"] if c != "intercept"]
        _, _, U, _ = nio.read_covariates(config.covariates, id_col=config.id_col,
                                         response_col=config.response_col,
                                         x_cols=u_cols)
        (U,) = nio.align_to_graph(weighted, ids, U)
        design_u = build_design(U, basis, arrays["u_ranks"])

    theta, omega = arrays["theta"], arrays["omega"]
    zeta = meta["bg_log_rate"]
    if y is not None:
        pi = estep_bg_prob(y, design, design_u, theta, omega, zeta)
    else:
        eta_u = design_u.matrix @ omega
        pi = 1.0 / (1.0 + np.exp(-eta_u))
        log.info("no response column supplied; reporting prior state probabilities")
    hot_rate = np.exp(np.clip(design.matrix @ theta, -700, 700))
    mu = pi * np.exp(zeta) + (1.0 - pi) * hot_rate
    surfaces = vertex_coefficients(theta, design)
    labels = weighted.vertex_labels
    if labels is None:
        labels = np.arange(weighted.n_vertices).astype(str)
    nio.write_predictions(outdir / "predictions.csv", labels, y, mu, pi, surfaces,
                          meta["covariate_names"])
    print(f"predictions written: {outdir / 'predictions.csv'}")
    return 0


def _simulate_one(task):
    """Module-level replicate worker so multiprocessing can pickle it."""
    idx, seed, base, scen_cfg, comp_cfg, outdir, save_scenarios = task
    scenario = generate_scenario(base, scen_cfg, seed)
    if save_scenarios:
        save_scenario(Path(outdir) / f"scenario_{idx:03d}.zip", scenario)
    report = run_comparison(scenario, comp_cfg)
    return idx, report


def cmd_simulate(config, check_ordering=True, save_scenarios=True):
    stages = _Stages()
    outdir = Path(config.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    if config.edge_list:
        base = stages.run("load_graph", lambda: read_edgelist(config.edge_list))
    else:
        base = lattice_graph(config.sim_base_rows, config.sim_base_cols,
                             seed=config.seed)
    scen_cfg = ScenarioConfig(
        subgraph_size=config.sim_size, n_zones=config.sim_zones,
        zone_size=config.sim_zone_size, bg_log_rate=config.sim_bg_log_rate,
        universal_rank=config.sim_universal_rank, n_covariates=config.sim_covariates,
        hot_shift=config.sim_hot_shift, eta_sd=config.sim_eta_sd)
    comp_cfg = ComparisonConfig(max_rank=config.sim_max_rank,
                                gain_ratio=config.gain_ratio)

    tasks = [(i, config.seed + 1 + i, base, scen_cfg, comp_cfg, str(outdir),
              save_scenarios) for i in range(config.replicates)]

    def _run_all():
        if config.jobs > 1:
            import multiprocessing as mp

            with mp.Pool(config.jobs) as pool:
                return pool.map(_simulate_one, tasks)
        return [_simulate_one(task) for task in tasks]

    results = stages.run("replicates", _run_all)

    rows = []
    pooled = {m: [] for m in ("Mod1", "Mod2", "Mod3", "Mod4")}
    bg = {m: [] for m in pooled}
    for idx, report in results:
        rows.extend(report.rows(replicate=idx))
        for m in pooled:
            pooled[m].append(report.pooled_hot.get(m, np.nan))
            bg[m].append(report.errors.get((m, "BG"), np.nan))
    nio.write_comparison_report(outdir / "comparison_report.csv", rows)
    nio.write_manifest(outdir / "manifest.json", config,
                       stages={"replicates": config.replicates},
                       volatile={"timings": stages.timings,
                                 "finished": time.strftime("%Y-%m-%dT%H:%M:%S")})

    def _win_fraction(target, others, values):
        wins = 0
        total = 0
        for i in range(len(values[target])):
            vals = [values[m][i] for m in (target, *others)]
            if not all(np.isfinite(vals)):
                continue
            total += 1
            wins += all(values[target][i] < values[m][i] for m in others)
        return wins / total if total else np.nan

    others = ("Mod1", "Mod2", "Mod3")
    frac_hz = _win_fraction("Mod4", others, pooled)
    frac_bg = _win_fraction("Mod4", others, bg)
    print(f"replicates: {config.replicates}")
    print(f"Mod4 wins pooled hot-zone stratum in {frac_hz:.0%} of replicates")
    print(f"Mod4 wins background stratum in {frac_bg:.0%} of replicates")
    if check_ordering and config.replicates >= 10:
        if not (frac_hz >= 0.8 and frac_bg >= 0.8):
            print("ordering check FAILED (expected the full model to win >= 80%)",
                  file=sys.stderr)
            return 2
        print("ordering check passed")
    return 0


def cmd_report(run_dir):
    run_dir = Path(run_dir)
    manifest = run_dir / "manifest.json"
    if not manifest.exists():
        raise StageError("report", f"no manifest.json under {run_dir}")
    with open(manifest) as fh:
        payload = json.load(fh)
    print(f"run directory: {run_dir}")
    print(f"config hash:   {payload.get('config_hash', '?')}")
    for name, info in (payload.get("stages") or {}).items():
        print(f"{name}: {json.dumps(info, sort_keys=True)}")
    vol = payload.get("volatile") or {}
    for stage, secs in (vol.get("timings") or {}).items():
        print(f"timing {stage}: {secs:.3f}s")
    artifacts = sorted(p.name for p in run_dir.iterdir() if p.is_file())
    print("artifacts:", ", ".join(artifacts))
    return 0


def _add_config_flags(parser):
    parser.add_argument("--config", help="JSON config file")
    for f in dataclasses.fields(nio.RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name in ("x_cols", "u_cols", "spike_grid", "penalty_bracket"):
            parser.add_argument(flag, type=json.loads, default=None,
                                help="JSON list overriding the config key")
        elif f.type in ("int", "int | None"):
            parser.add_argument(flag, type=int, default=None)
        elif f.type in ("float", "float | None"):
            parser.add_argument(flag, type=float, default=None)
        else:
            parser.add_argument(flag, default=None)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="netglm",
        description="Network-regularized GLMs with hot-zone mixtures on vertex-attributed graphs")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("fit", "tune", "simulate"):
        p = sub.add_parser(name)
        _add_config_flags(p)
        if name == "simulate":
            p.add_argument("--no-check", action="store_true",
                           help="skip the model-ordering check")
            p.add_argument("--no-scenarios", action="store_true",
                           help="do not write per-replicate scenario files")
    p = sub.add_parser("predict")
    p.add_argument("model", help="model artifact written by fit")
    _add_config_flags(p)
    p = sub.add_parser("report")
    p.add_argument("run_dir", help="output directory of a previous run")
    return parser


def main(argv=None):
    _apply_thread_env()
    logging.basicConfig(level=os.environ.get("NETGLM_LOGLEVEL", "WARNING"))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.run_dir)
        config = _load_effective_config(args)
        if args.command == "fit":
            return cmd_fit(config)
        if args.command == "tune":
            return cmd_tune(config)
        if args.command == "predict":
            return cmd_predict(config, args.model)
        if args.command == "simulate":
            return cmd_simulate(config, check_ordering=not args.no_check,
                                save_scenarios=not args.no_scenarios)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # non-stage failures still exit nonzero
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
