"""Configuration, data loading, and artifact/report emission.

File formats:

* config: flat JSON key-value file; CLI flags override keys.
* covariates: delimited text with a vertex-id column, optional response
  column, numeric covariate columns, and categorical columns that are
  one-hot expanded with the alphabetically first level as reference.
* model artifact: deterministic zip of arrays plus JSON metadata.
* reports: CSV with pinned headers and full-precision floats.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .serialize import load_arrays, save_arrays

log = logging.getLogger(__name__)

PREDICTIONS_HEADER = ("vertex", "y", "mu_hat", "pi")
RANK_REPORT_HEADER = ("predictor", "rank", "posterior", "cumulative", "selected")
TUNING_REPORT_HEADER = ("v0", "penalty", "loop", "ranks")
COMPARISON_HEADER = ("replicate", "model", "stratum", "relative_error")


@dataclass
class RunConfig:
    """Flat run configuration; every field can come from JSON or a CLI flag."""

    edge_list: str | None = None
    covariates: str | None = None
    output_dir: str = "netglm_run"
    id_col: str = "vertex"
    response_col: str = "y"
    x_cols: list | None = None        # None: every non-id, non-response column
    u_cols: list | None = None        # None: same columns as x_cols
    decay_range: float | None = None  # None: calibrate from the distances
    calib_quantile: float = 0.5
    calib_similarity: float = 0.8
    max_rank: int | None = None       # None: min(n - 1, 250)
    dense_cutoff: int = 2000
    include_prob: float = 0.9
    extend_prob: float = 0.8
    growth: float | None = None       # None: elicit from the spectrum
    elicit_pct: float = 0.05
    spike_grid: list = field(default_factory=lambda: [0.1, 0.2, 0.4, 0.6, 0.8])
    gain_ratio: float = 4.0
    penalty_bracket: list = field(default_factory=lambda: [1e-4, 1e4])
    golden_tol: float = 1e-2
    max_alternations: int = 10
    family: str = "poisson"
    hot_quartile: float = 0.75
    latent_penalty: float | None = None  # None: reuse the tuned penalty
    em_tol: float = 1e-6
    em_max_iter: int = 500
    inner_tol: float = 1e-6
    inner_max_iter: int = 200
    max_cycles: int = 50
    glm_tol: float = 1e-8
    glm_max_iter: int = 100
    seed: int = 0
    # simulate-only knobs
    replicates: int = 20
    sim_size: int = 200
    sim_zones: int = 3
    sim_zone_size: int = 40
    sim_bg_log_rate: float = -2.5
    sim_universal_rank: int = 10
    sim_covariates: int = 2
    sim_hot_shift: float = 1.0
    sim_eta_sd: float = 0.6
    sim_max_rank: int = 25
    sim_base_rows: int = 40
    sim_base_cols: int = 40
    jobs: int = 1


def load_config(path):
    with open(path) as fh:
        raw = json.load(fh)
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {unknown}")
    config = RunConfig(**raw)
    validate_config(config)
    return config


def validate_config(config):
    for name in ("glm_tol", "em_tol", "inner_tol", "golden_tol"):
        if getattr(config, name) <= 0:
            raise ValueError(f"config {name} must be positive")
    if config.penalty_bracket[0] <= 0 or config.penalty_bracket[1] <= config.penalty_bracket[0]:
        raise ValueError("penalty_bracket must be an increasing positive pair")
    return config


def config_dict(config):
    return dataclasses.asdict(config)


def config_hash(config):
    # output location does not affect results, so it stays out of the hash
    payload = {k: v for k, v in config_dict(config).items() if k != "output_dir"}
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def read_covariates(path, id_col="vertex", response_col="y", x_cols=None):
    """Load the vertex table: ids, response (if present), numeric design columns.

    Categorical columns among the requested covariates are one-hot expanded,
    dropping the alphabetically first level as the reference.

    Returns ``(ids, y_or_None, X, column_names)``.
    """
    df = pd.read_csv(path, dtype={id_col: str})
    if id_col not in df.columns:
        raise ValueError(f"{path}: missing vertex id column {id_col!r}")
    if df[id_col].duplicated().any():
        raise ValueError(f"{path}: duplicate vertex ids")
    ids = df[id_col].to_numpy()
    y = None
    if response_col in df.columns:
        y = df[response_col].to_numpy(dtype=float)
    if x_cols is None:
        x_cols = [c for c in df.columns if c not in (id_col, response_col)]
    missing = [c for c in x_cols if c not in df.columns]
    if missing:
        raise ValueError(f"{path}: missing covariate columns {missing}")
    sub = df[list(x_cols)]
    cat_cols = [c for c in x_cols if not pd.api.types.is_numeric_dtype(sub[c])]
    if cat_cols:
        # get_dummies sorts levels, so drop_first drops the alphabetically
        # first level as the reference
        sub = pd.get_dummies(sub, columns=cat_cols, drop_first=True, dtype=float)
    X = sub.to_numpy(dtype=float)
    return ids, y, X, list(sub.columns)


def align_to_graph(graph, ids, *arrays):
    """Reorder covariate rows to the graph's dense vertex order.

    Every graph vertex must appear in ``ids``; extra rows are ignored with a
    warning.
    """
    labels = graph.vertex_labels
    if labels is None:
        labels = np.arange(graph.n_vertices).astype(str)
    labels = np.asarray(labels).astype(str)
    index = {v: i for i, v in enumerate(np.asarray(ids).astype(str))}
    missing = [v for v in labels if v not in index]
    if missing:
        raise ValueError(
            f"covariates missing {len(missing)} graph vertices (first few: {missing[:5]})")
    if len(index) > len(labels):
        log.warning("covariate file has %d rows not in the graph; ignoring them",
                    len(index) - len(labels))
    order = np.asarray([index[v] for v in labels])
    return tuple(None if a is None else np.asarray(a)[order] for a in arrays)


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_predictions(path, labels, y, mu, pi, surfaces, surface_names):
    """Long-format prediction table: one row per vertex, one coefficient
    surface column per predictor."""
    header = list(PREDICTIONS_HEADER) + [f"beta_{name}" for name in surface_names]
    rows = []
    for v in range(len(mu)):
        row = [labels[v], _fmt(float(y[v])) if y is not None else "",
               _fmt(float(mu[v])), _fmt(float(pi[v]))]
        row += [_fmt(float(surfaces[j, v])) for j in range(surfaces.shape[0])]
        rows.append(row)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_rank_report(path, predictor_names, posteriors, ranks):
    rows = []
    for j, name in enumerate(predictor_names):
        cum = 0.0
        for r, prob in enumerate(posteriors[j]):
            cum += float(prob)
            rows.append([name, r, float(prob), cum, int(ranks[j])])
    write_csv(path, RANK_REPORT_HEADER, rows)


def write_tuning_report(path, records):
    rows = [[r.spike_ratio, r.penalty, r.loop, ";".join(str(t) for t in r.ranks)]
            for r in records]
    write_csv(path, TUNING_REPORT_HEADER, rows)


def write_comparison_report(path, rows):
    write_csv(path, COMPARISON_HEADER,
              [[r["replicate"], r["model"], r["stratum"], r["relative_error"]] for r in rows])


def write_vertex_map(path, labels):
    write_csv(path, ("vertex", "internal_id"), [[lab, i] for i, lab in enumerate(labels)])


def save_model(path, *, theta, omega, bg_log_rate, bg_prob, ranks, spike_ratio,
               penalty_main, penalty_latent, decay_range, max_rank, basis_key,
               vertex_labels, covariate_names, u_names, u_ranks, cfg_hash,
               gain_ratio):
    arrays = {
        "theta": np.asarray(theta, dtype=float),
        "omega": np.asarray(omega, dtype=float),
        "bg_prob": np.asarray(bg_prob, dtype=float),
        "ranks": np.asarray(ranks, dtype=np.int64),
        "u_ranks": np.asarray(u_ranks, dtype=np.int64),
        "vertex_labels": np.asarray(vertex_labels).astype("U64"),
    }
    meta = {
        "bg_log_rate": float(bg_log_rate),
        "spike_ratio": float(spike_ratio),
        "penalty_main": float(penalty_main),
        "penalty_latent": float(penalty_latent),
        "decay_range": float(decay_range),
        "max_rank": int(max_rank),
        "basis_key": basis_key,
        "covariate_names": list(covariate_names),
        "u_names": list(u_names),
        "config_hash": cfg_hash,
        "gain_ratio": float(gain_ratio),
    }
    save_arrays(path, arrays, meta)


def load_model(path):
    arrays, meta = load_arrays(path)
    return arrays, meta


def write_manifest(path, config, stages, volatile):
    """Run manifest: config, hashes and versions, plus a volatile section
    (timings, timestamps) excluded from reproducibility comparisons."""
    import scipy

    payload = {
        "config": config_dict(config),
        "config_hash": config_hash(config),
        "versions": {
            "netglm": "0.1.0",
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "stages": stages,
        "volatile": volatile,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
    return payload
