"""End-to-end runs: model, trajectories, datasets, selection, curves and reports.

Trajectories and datasets are cached in a directory named by a hash of the
model, the excitation settings and the seeds, so different heuristic settings
reuse the same data.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParampruneError, StageError
from .excitation import (Dataset, ExcitationConfig, load_trajectories, optimize_trajectory,
                         sample_dataset, save_trajectories)
from .heuristics import HEURISTICS, SelectionTrace, run_heuristic
from .mbmodel import MultibodyModel, build_system, load_model, model_to_dict, phi_vector, save_model
from .reduction import (RegressionProblem, assemble, ddm_error_detail, ddm_tensors, fit_subset,
                        idm_error, nominal_acceleration, numeric_rank, save_problem)
from .symdag import OpCounter

log = logging.getLogger(__name__)

SYSTEMS = ("puma560", "hexaglide")
VALIDATION_SEED_OFFSET = 100_000
PLOT_COLUMNS = ("heuristic", "k", "eps_tau_est", "eps_tau_val", "eps_ddz_est", "eps_ddz_val",
                "n_op_idm", "n_op_ddm")
SUMMARY_COLUMNS = ("heuristic", "n_phi", "r", "k", "eps_tau_est", "eps_tau_val", "eps_ddz_est",
                   "eps_ddz_val", "n_op_idm_full", "n_op_idm", "ratio_idm", "n_op_ddm_full",
                   "n_op_ddm", "ratio_ddm")


@dataclass
class PipelineConfig:
    model: str
    excitation: dict = field(default_factory=dict)
    heuristics: tuple = ("qr", "fs", "be", "fs2")
    tol: float = 1e-2
    rank_tol: float = 1e-8
    seed: int = 1000
    selected_k: object = None  # int, {heuristic: int} or None for the first k within tol
    output_dir: str = "paramprune_out"
    cache_dir: str = None
    base_dir: str = "."  # relative paths are resolved against this

    def __post_init__(self):
        self.heuristics = tuple(self.heuristics)
        if not 0.0 < float(self.tol) < 1.0:
            raise ConfigError("tol must lie in (0, 1)")
        if not 0.0 < float(self.rank_tol) < 1.0:
            raise ConfigError("rank_tol must lie in (0, 1)")
        unknown = [h for h in self.heuristics if h not in HEURISTICS]
        if unknown or not self.heuristics:
            raise ConfigError(f"unknown heuristics {unknown}; choose from {sorted(HEURISTICS)}")
        if self.model not in SYSTEMS and not self._resolve(self.model).is_file():
            raise ConfigError(f"model {self.model!r} is neither a known system nor an existing file")
        if self.selected_k is not None and not isinstance(self.selected_k, (int, dict)):
            raise ConfigError("selected_k must be an integer or a mapping heuristic -> integer")
        try:
            ExcitationConfig.for_model(self.load_model(), **self.excitation)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid excitation settings: {exc}") from None

    def _resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def load_model(self) -> MultibodyModel:
        if self.model in SYSTEMS:
            return build_system(self.model)
        return load_model(self._resolve(self.model))

    def excitation_config(self, model) -> ExcitationConfig:
        return ExcitationConfig.for_model(model, **self.excitation)

    @property
    def out_path(self) -> Path:
        return self._resolve(self.output_dir)

    @property
    def cache_path(self) -> Path:
        return self._resolve(self.cache_dir) if self.cache_dir else self.out_path / "cache"

    def k_for(self, heuristic, trace: SelectionTrace) -> int:
        k = self.selected_k
        if isinstance(k, dict):
            k = k.get(heuristic)
        if k is None:
            k = trace.reached_k if trace.reached_k > 0 else trace.n
        return int(k)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["heuristics"] = list(self.heuristics)
        return d

    @classmethod
    def from_dict(cls, d, base_dir=None) -> "PipelineConfig":
        d = dict(d)
        if base_dir is not None and "base_dir" not in d:
            d["base_dir"] = str(base_dir)
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config fields {sorted(extra)}")
        if "model" not in d:
            raise ConfigError("config needs a 'model' field")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(data, base_dir=path.parent)


# --- data generation with caching ---------------------------------------------------------

def data_key(model: MultibodyModel, exc: ExcitationConfig, seed: int) -> str:
    blob = json.dumps({"model": model_to_dict(model), "excitation": exc.to_dict(), "seed": seed},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def trajectory_seeds(exc: ExcitationConfig, seed: int):
    est = [seed + i for i in range(exc.n_trajectories)]
    val = [seed + VALIDATION_SEED_OFFSET + j for j in range(exc.n_validation)]
    return est, val


@dataclass
class DataBundle:
    key: str
    est_trajectories: list
    val_trajectories: list
    estimation: Dataset
    validation: Dataset
    generation_seconds: float | None = None  # wall time of the run that produced the data


def generate_data(model: MultibodyModel, exc: ExcitationConfig, seed: int, cache_dir=None) -> DataBundle:
    key = data_key(model, exc, seed)
    d = Path(cache_dir) / key if cache_dir else None
    files = None if d is None else {n: d / f"{n}" for n in
                                   ("traj_est.json", "traj_val.json", "data_est.csv", "data_val.csv")}
    if files and all(p.is_file() for p in files.values()):
        log.info("using cached data %s", d)
        gen = d / "generation.json"
        secs = json.loads(gen.read_text())["seconds"] if gen.is_file() else None
        return DataBundle(key, load_trajectories(files["traj_est.json"]), load_trajectories(files["traj_val.json"]),
                          _read_dataset(files["data_est.csv"], exc), _read_dataset(files["data_val.csv"], exc), secs)
    t0 = time.perf_counter()
    est_seeds, val_seeds = trajectory_seeds(exc, seed)
    est_tr, val_tr = [], []
    for s in est_seeds:
        est_tr.append(optimize_trajectory(model, exc, s))
        log.info("trajectory seed %d: kappa %.4g", s, est_tr[-1].kappa)
    for s in val_seeds:
        val_tr.append(optimize_trajectory(model, exc, s))
    est, val = sample_dataset(model, est_tr, exc), sample_dataset(model, val_tr, exc)
    secs = time.perf_counter() - t0
    if d is not None:
        d.mkdir(parents=True, exist_ok=True)
        save_trajectories(est_tr, files["traj_est.json"])
        save_trajectories(val_tr, files["traj_val.json"])
        est.write_csv(files["data_est.csv"])
        val.write_csv(files["data_val.csv"])
        (d / "generation.json").write_text(json.dumps({"seconds": secs}))
        # reload so that cached and fresh runs see bit-identical data
        est, val = _read_dataset(files["data_est.csv"], exc), _read_dataset(files["data_val.csv"], exc)
    return DataBundle(key, est_tr, val_tr, est, val, secs)


def _read_dataset(path, exc: ExcitationConfig) -> Dataset:
    ds = Dataset.read_csv(path)
    ds.traj_id = np.arange(len(ds)) // exc.samples_per_traj
    return ds


# --- per-k curves ---------------------------------------------------------------------------

@dataclass
class Curves:
    heuristic: str
    k: np.ndarray
    eps_tau_est: np.ndarray
    eps_tau_val: np.ndarray
    eps_ddz_est: np.ndarray
    eps_ddz_val: np.ndarray
    mass_singular: np.ndarray
    n_op_idm: np.ndarray
    n_op_ddm: np.ndarray
    identity_error: np.ndarray  # |W_R^+ chi - (phi_R + beta phi_E)| / |phi_R'|

    def row(self, k):
        i = int(k) - 1
        return {c: getattr(self, c)[i] for c in PLOT_COLUMNS[2:]}


@dataclass
class Context:
    """Everything the curves and reports are computed from."""

    model: MultibodyModel
    estimation: RegressionProblem
    validation: RegressionProblem
    phi: np.ndarray
    tensors_est: object = None
    tensors_val: object = None
    nom_ddz: np.ndarray = None
    counter: OpCounter = None

    @classmethod
    def build(cls, model, est: Dataset, val: Dataset, ddm=True, op_counts=True) -> "Context":
        ctx = cls(model, assemble(model, est), assemble(model, val), phi_vector(model).values)
        if ddm:
            ctx.tensors_est = ddm_tensors(model, est)
            ctx.tensors_val = ddm_tensors(model, val)
            ctx.nom_ddz = nominal_acceleration(est)
        if op_counts:
            ctx.counter = OpCounter(model)
        return ctx


def compute_curves(trace: SelectionTrace, ctx: Context) -> Curves:
    n = trace.n
    ks = np.arange(1, n + 1)
    out = {name: np.full(n, np.nan) for name in
           ("eps_tau_est", "eps_tau_val", "eps_ddz_est", "eps_ddz_val", "identity_error")}
    sing = np.zeros(n, dtype=bool)
    nop_i = np.zeros(n, dtype=int)
    nop_d = np.zeros(n, dtype=int)
    labels = ctx.estimation.labels
    for j, k in enumerate(ks):
        sel = list(trace.subset(k))
        fit = fit_subset(ctx.estimation, sel, ctx.phi)
        out["eps_tau_est"][j] = idm_error(ctx.estimation, sel, fit.phi_R_prime)
        out["eps_tau_val"][j] = idm_error(ctx.validation, sel, fit.phi_R_prime)
        out["identity_error"][j] = fit.identity_error
        if ctx.tensors_est is not None:
            de = ddm_error_detail(ctx.tensors_est, sel, fit.phi_R_prime, ctx.nom_ddz)
            dv = ddm_error_detail(ctx.tensors_val, sel, fit.phi_R_prime, ctx.nom_ddz)
            out["eps_ddz_est"][j], out["eps_ddz_val"][j] = de.eps, dv.eps
            sing[j] = de.mass_singular or dv.mass_singular
        if ctx.counter is not None:
            keep = [labels[i] for i in sel]
            nop_i[j] = ctx.counter.count("idm", keep).total
            nop_d[j] = ctx.counter.count("ddm", keep).total
    return Curves(trace.heuristic, ks, out["eps_tau_est"], out["eps_tau_val"], out["eps_ddz_est"],
                  out["eps_ddz_val"], sing, nop_i, nop_d, out["identity_error"])


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def plot_data(curves_list) -> str:
    """Long-format CSV text with one row per heuristic and k."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PLOT_COLUMNS)
    for c in curves_list:
        for k in c.k:
            r = c.row(k)
            w.writerow([c.heuristic, int(k)] + [_fmt(r[name]) for name in PLOT_COLUMNS[2:]])
    return buf.getvalue()


def ordering_table(trace: SelectionTrace, curves: Curves) -> str:
    """Parameters in entrance order with the errors of the models they complete."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("position", "label", "eps_tau_est", "eps_tau_val"))
    for pos, lab in enumerate(trace.ordered_labels(), start=1):
        w.writerow((pos, lab, _fmt(curves.eps_tau_est[pos - 1]), _fmt(curves.eps_tau_val[pos - 1])))
    return buf.getvalue()


def reduction_report(trace: SelectionTrace, curves: Curves, ctx: Context, k: int) -> dict:
    labels = ctx.estimation.labels
    per_k = {}
    for kk in curves.k:
        r = curves.row(kk)
        per_k[str(int(kk))] = {
            "selected_labels": [labels[i] for i in trace.subset(kk)],
            "eps_tau_est": float(r["eps_tau_est"]), "eps_tau_val": float(r["eps_tau_val"]),
            "eps_ddz_est": float(r["eps_ddz_est"]), "eps_ddz_val": float(r["eps_ddz_val"]),
            "n_ops_idm": int(r["n_op_idm"]), "n_ops_ddm": int(r["n_op_ddm"]),
        }
    sel = list(trace.subset(k))
    fit = fit_subset(ctx.estimation, sel, ctx.phi)
    return {
        "heuristic": trace.heuristic,
        "ordering": trace.ordered_labels(),
        "selected_k": int(k),
        "selected_labels": [labels[i] for i in sel],
        "excluded_labels": [labels[i] for i in range(len(labels)) if i not in set(sel)],
        "phi_R_prime": [float(v) for v in fit.phi_R_prime],
        "beta": np.asarray(fit.beta).tolist(),
        "per_k": per_k,
        "trace": trace.to_dict(),
    }


def summary_row(trace: SelectionTrace, curves: Curves, ctx: Context, rank: int, k: int) -> dict:
    r = curves.row(k)
    row = {"heuristic": trace.heuristic.upper(), "n_phi": trace.n, "r": rank, "k": int(k)}
    row.update({name: float(r[name]) for name in ("eps_tau_est", "eps_tau_val", "eps_ddz_est", "eps_ddz_val")})
    for kind in ("idm", "ddm"):
        full = ctx.counter.full_count(kind).total if ctx.counter else 0
        red = int(r[f"n_op_{kind}"])
        row[f"n_op_{kind}_full"] = full
        row[f"n_op_{kind}"] = red
        row[f"ratio_{kind}"] = 1.0 - red / full if full else float("nan")
    return row


def torque_overlay(ctx: Context, selected, phi_R_prime) -> str:
    """Validation forces and reduced-model predictions, both divided by the nominal force."""
    prob = ctx.validation
    n = prob.n_dof
    pred = prob.W[:, list(selected)] @ phi_R_prime
    meas = prob.chi
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("sample", "coordinate", "tau_norm", "tau_norm_reduced"))
    for row in range(prob.W.shape[0]):
        w.writerow((row // n, row % n + 1, _fmt(meas[row] / prob.sigma_half[row]),
                    _fmt(pred[row] / prob.sigma_half[row])))
    return buf.getvalue()


def _csv_table(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) if not isinstance(r[c], str) else r[c] for c in columns])
    return buf.getvalue()


# --- full runs --------------------------------------------------------------------------------

@dataclass
class PipelineResult:
    config: PipelineConfig
    model: MultibodyModel
    data: DataBundle
    context: Context
    rank: int
    rank_val: int
    traces: dict
    curves: dict
    summary: list
    timings: dict
    out_dir: Path


class _Stage:
    def __init__(self, name, timings):
        self.name, self.timings = name, timings

    def __enter__(self):
        self.t0 = time.perf_counter()
        log.info("stage %s", self.name)
        return self

    def __exit__(self, et, ev, tb):
        self.timings[self.name] = time.perf_counter() - self.t0
        if ev is not None and not isinstance(ev, StageError) and isinstance(ev, (ParampruneError, ValueError,
                                                                                 np.linalg.LinAlgError)):
            raise StageError(self.name, ev) from ev
        return False


def report_outputs(out: Path, model, ctx, rank, traces, curves, config_k) -> list:
    """Writes plot data, ordering tables, reduction reports, overlay and summary; returns summary rows."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "plot_data.csv").write_text(plot_data(list(curves.values())))
    summary = []
    for h, tr in traces.items():
        k = config_k(h, tr)
        if not 1 <= k <= tr.n:
            raise ConfigError(f"selected k={k} out of range for {h}")
        (out / f"ordering_{h}.csv").write_text(ordering_table(tr, curves[h]))
        rep = reduction_report(tr, curves[h], ctx, k)
        (out / f"reduction_{h}.json").write_text(json.dumps(rep, indent=1))
        (out / f"trace_{h}.json").write_text(json.dumps(tr.to_dict(), indent=1))
        sel = list(tr.subset(k))
        (out / f"torque_overlay_{h}.csv").write_text(torque_overlay(ctx, sel, np.array(rep["phi_R_prime"])))
        summary.append(summary_row(tr, curves[h], ctx, rank, k))
    (out / "summary.csv").write_text(_csv_table(summary, SUMMARY_COLUMNS))
    return summary


def run_pipeline(config: PipelineConfig) -> PipelineResult:
    timings = {}
    out = config.out_path
    out.mkdir(parents=True, exist_ok=True)
    with _Stage("model", timings):
        model = config.load_model()
        exc = config.excitation_config(model)
        save_model(model, out / "model.json")
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True))
    with _Stage("data", timings):
        data = generate_data(model, exc, config.seed, config.cache_path)
        save_trajectories(data.est_trajectories, out / "traj_est.json")
        save_trajectories(data.val_trajectories, out / "traj_val.json")
        data.estimation.write_csv(out / "data_est.csv")
        data.validation.write_csv(out / "data_val.csv")
    with _Stage("assemble", timings):
        ctx = Context.build(model, data.estimation, data.validation)
        save_problem(ctx.estimation, out / "problem_est.bin")
        save_problem(ctx.validation, out / "problem_val.bin")
        rank = numeric_rank(ctx.estimation, config.rank_tol)
        rank_val = numeric_rank(ctx.validation, config.rank_tol)
    traces, curves = {}, {}
    for h in config.heuristics:
        with _Stage(f"heuristic:{h}", timings):
            traces[h] = run_heuristic(h, ctx.estimation, config.tol, ctx.validation)
        with _Stage(f"curves:{h}", timings):
            curves[h] = compute_curves(traces[h], ctx)
    with _Stage("report", timings):
        summary = report_outputs(out, model, ctx, rank, traces, curves, config.k_for)
        meta = {"data_key": data.key, "n_phi": ctx.estimation.n_params, "rank_est": rank, "rank_val": rank_val,
                "kappa": [t.kappa for t in data.est_trajectories], "summary": summary}
        (out / "report.json").write_text(json.dumps(meta, indent=1))
    (out / "timings.json").write_text(json.dumps(timings, indent=1))
    return PipelineResult(config, model, data, ctx, rank, rank_val, traces, curves, summary, timings, out)
