"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
``PARAMPRUNE_THREADS`` caps the BLAS/OpenMP worker count.
"""

import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")
if os.environ.get("PARAMPRUNE_THREADS"):
    # must happen before numpy loads its BLAS
    for _v in _THREAD_VARS:
        os.environ[_v] = os.environ["PARAMPRUNE_THREADS"]

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from .errors import ConfigError, ParampruneError, StageError  # noqa: E402

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("paramprune")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None


def _load_model(path):
    from .mbmodel import model_from_dict

    try:
        return model_from_dict(_read_json(path))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model file {path}: {exc}") from None


def _excitation(model, path):
    from .excitation import ExcitationConfig

    overrides = _read_json(path) if path else {}
    try:
        return ExcitationConfig.for_model(model, **overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid excitation config: {exc}") from None


def _load_trace(path):
    from .heuristics import SelectionTrace

    d = _read_json(path)
    if "trace" in d:  # reduction report
        d = d["trace"]
    try:
        return SelectionTrace.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid trace file {path}: {exc}") from None


def _write(path, text):
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# --- commands ----------------------------------------------------------------------------

def cmd_model_build(args):
    from .mbmodel import build_system, save_model

    try:
        model = build_system(args.system)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    save_model(model, args.out)
    print(f"{model.name}: {len(model.bodies)} bodies, n_dof={model.n_dof}, n_q={model.n_q} -> {args.out}")


def cmd_traj_optimize(args):
    from .excitation import optimize_trajectory, save_trajectories

    model = _load_model(args.model)
    cfg = _excitation(model, args.config)
    trajs = [optimize_trajectory(model, cfg, args.seed + i) for i in range(args.count)]
    save_trajectories(trajs, args.out)
    for i, tr in enumerate(trajs):
        print(f"seed {args.seed + i}: kappa = {tr.kappa:.6g}")


def cmd_dataset_sample(args):
    from .excitation import load_trajectories, sample_dataset

    model = _load_model(args.model)
    cfg = _excitation(model, args.config)
    trajs = load_trajectories(args.traj)
    ds = sample_dataset(model, trajs, cfg)
    ds.write_csv(args.out)
    print(f"{len(ds)} samples -> {args.out}")


def _problem_from_args(args, which):
    from .excitation import Dataset
    from .reduction import assemble, load_problem

    prob = getattr(args, f"{which}problem")
    data = getattr(args, f"{which}dataset")
    if prob:
        return load_problem(prob)
    if data:
        if not args.model:
            raise ConfigError("--model is required with a dataset file")
        return assemble(_load_model(args.model), Dataset.read_csv(data))
    return None


def cmd_reduce(args):
    from .heuristics import run_heuristic

    if not 0 < args.tol < 1:
        raise ConfigError("--tol must lie in (0, 1)")
    est = _problem_from_args(args, "")
    if est is None:
        raise ConfigError("give --problem or --model with --dataset")
    val = _problem_from_args(args, "val_")
    try:
        trace = run_heuristic(args.heuristic, est, args.tol, val)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    _write(args.out, json.dumps(trace.to_dict(), indent=1))
    print(f"{args.heuristic}: first k within tol = {trace.reached_k}")


def cmd_opcount(args):
    from .symdag import eliminate_params, emit_source, op_count, simplify, trace as trace_fn

    model = _load_model(args.model)
    keep = None
    if args.selected:
        tr = _load_trace(args.selected)
        k = args.k if args.k is not None else tr.n
        if not 0 <= k <= tr.n:
            raise ConfigError(f"--k must lie in [0, {tr.n}]")
        keep = [tr.labels[i] for i in tr.subset(k)]
    result = {"model": model.name, "selected_labels": keep}
    for kind in ("idm", "ddm"):
        full = simplify(trace_fn(model, kind))
        red = full if keep is None else eliminate_params(full, keep)
        result[kind] = {"full": op_count(full).to_dict(), "reduced": op_count(red).to_dict()}
        if args.emit_source:
            _write(f"{args.out}.{kind}.txt", emit_source(red))
    _write(args.out, json.dumps(result, indent=1))
    for kind in ("idm", "ddm"):
        f, r = result[kind]["full"]["total"], result[kind]["reduced"]["total"]
        print(f"{kind}: {f} -> {r} ops ({100 * (1 - r / f):.1f}% fewer)")


def cmd_report(args):
    from .excitation import Dataset
    from .pipeline import Context, compute_curves, report_outputs
    from .reduction import numeric_rank

    model = _load_model(args.model)
    ctx = Context.build(model, Dataset.read_csv(args.dataset), Dataset.read_csv(args.validation))
    traces = {}
    for p in args.traces:
        tr = _load_trace(p)
        if tuple(tr.labels) != tuple(ctx.estimation.labels):
            raise ConfigError(f"trace {p} does not match the model parameters")
        traces[tr.heuristic] = tr
    curves = {h: compute_curves(tr, ctx) for h, tr in traces.items()}
    rank = numeric_rank(ctx.estimation)

    def k_for(h, tr):
        if args.k is not None:
            return args.k
        return tr.reached_k if tr.reached_k > 0 else tr.n

    rows = report_outputs(Path(args.out_dir), model, ctx, rank, traces, curves, k_for)
    for r in rows:
        print(f"{r['heuristic']}: k={r['k']} eps_tau_val={r['eps_tau_val']:.4g} "
              f"eps_ddz_val={r['eps_ddz_val']:.4g} ratio_idm={r['ratio_idm']:.3f} ratio_ddm={r['ratio_ddm']:.3f}")


def cmd_pipeline_run(args):
    from .pipeline import PipelineConfig, run_pipeline

    cfg = PipelineConfig.load(args.config)
    if args.out_dir:
        cfg.output_dir = str(Path(args.out_dir).resolve())
    res = run_pipeline(cfg)
    print(f"rank {res.rank} (validation {res.rank_val}); outputs in {res.out_dir}")
    for r in res.summary:
        print(f"{r['heuristic']}: k={r['k']} eps_tau_val={r['eps_tau_val']:.4g} eps_ddz_val={r['eps_ddz_val']:.4g}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="paramprune", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    model = sub.add_parser("model").add_subparsers(dest="action", required=True)
    b = model.add_parser("build", help="write a model JSON file")
    b.add_argument("--system", required=True, choices=("puma560", "hexaglide"))
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_model_build)

    traj = sub.add_parser("traj").add_subparsers(dest="action", required=True)
    t = traj.add_parser("optimize", help="optimize Fourier excitation trajectories")
    t.add_argument("--model", required=True)
    t.add_argument("--config", help="JSON overrides of the excitation settings")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--count", type=int, default=1)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_traj_optimize)

    ds = sub.add_parser("dataset").add_subparsers(dest="action", required=True)
    s = ds.add_parser("sample", help="sample trajectories into a dataset CSV")
    s.add_argument("--model", required=True)
    s.add_argument("--traj", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dataset_sample)

    r = sub.add_parser("reduce", help="run a selection heuristic")
    r.add_argument("--problem", help="problem file written by the pipeline")
    r.add_argument("--model")
    r.add_argument("--dataset")
    r.add_argument("--val-problem", dest="val_problem")
    r.add_argument("--val-dataset", dest="val_dataset")
    r.add_argument("--heuristic", required=True, choices=("qr", "fs", "be", "fs2"))
    r.add_argument("--tol", type=float, default=1e-2)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reduce)

    o = sub.add_parser("opcount", help="operation counts of full and reduced models")
    o.add_argument("--model", required=True)
    o.add_argument("--selected", help="trace or reduction JSON")
    o.add_argument("--k", type=int)
    o.add_argument("--out", required=True)
    o.add_argument("--emit-source", action="store_true", help="also write straight-line listings")
    o.set_defaults(func=cmd_opcount)

    rp = sub.add_parser("report", help="curves and tables from saved datasets and traces")
    rp.add_argument("--model", required=True)
    rp.add_argument("--dataset", required=True)
    rp.add_argument("--validation", required=True)
    rp.add_argument("--traces", nargs="+", required=True)
    rp.add_argument("--k", type=int)
    rp.add_argument("--out-dir", required=True)
    rp.set_defaults(func=cmd_report)

    pl = sub.add_parser("pipeline").add_subparsers(dest="action", required=True)
    pr = pl.add_parser("run", help="full run from a config file")
    pr.add_argument("--config", required=True)
    pr.add_argument("--out-dir")
    pr.set_defaults(func=cmd_pipeline_run)
    return p


def _exit_code(exc) -> int:
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, (ConfigError, FileNotFoundError)):
        return EXIT_CONFIG
    return EXIT_NUMERIC


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParampruneError, np.linalg.LinAlgError, FloatingPointError) as exc:
        code = _exit_code(exc)
        print(f"{'config' if code == EXIT_CONFIG else 'numerical'} error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
