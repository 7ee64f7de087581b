"""``flowsr`` command line: data generation, training, sampling, sweeps and self-checks.

Exit codes: 0 success, 1 usage / configuration / input error, 2 numeric failure.
Log verbosity comes from ``FLOWSR_LOG`` (DEBUG, INFO, WARNING, ERROR; default INFO).
Every run writes a JSON manifest with the resolved configuration, seeds and the
sha256 of every input and output file.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checks import SUITES, run_suite
from .config import RunConfig, load_config, render_config
from .container import load_checkpoint, load_checkpoint_meta, save_tensors
from .data import DatasetSpec, load_dataset, write_dataset
from .degradation import DegradationSpec
from .distill import VARIANTS, DistillConfig, distill_train, student_one_step
from .errors import CheckpointError, ConfigError, DimensionError, FlowSRError, NumericError, UsageError
from .evaluation import emit_report, image_strip, sweep_estimates, summarize, write_pnm
from .flow import FlowConfig, SRTask, train_teacher
from .metrics import psnr
from .model import init_velocity_model
from .plotting import plot_loss_trace, plot_points, plot_sweep
from .solvers import FIXED_KINDS, SolverSpec, solve_each, straightness

log = logging.getLogger("flowsr")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
LOG_ENV = "FLOWSR_LOG"
TASK_KEYS = ("sigma_p", "sigma_n", "scale")


class _UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise _UsageExit(message)

    def exit(self, status=0, message=None):
        if message:
            sys.stderr.write(message)
        if status:
            raise _UsageExit(message or "")
        raise SystemExit(0)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    def __init__(self, command: str, argv: list):
        self.doc = {"command": command, "argv": list(argv), "version": __version__,
                    "python": platform.python_version(), "torch": torch.__version__,
                    "numpy": np.__version__, "config": {}, "seeds": {}, "inputs": {}, "outputs": {}}

    def input(self, path):
        self.doc["inputs"][str(path)] = sha256_file(path)

    def output(self, path):
        self.doc["outputs"][str(path)] = sha256_file(path)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.doc, indent=2, sort_keys=True, default=str) + "\n")


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flowsr", description="Conditional rectified flow super-resolution with one-step distillation.")
    p.add_argument("--version", action="version", version=f"flowsr {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_help):
        sp.add_argument("--config", help="run config file ([section] key = value)")
        sp.add_argument("--out", help=out_help)
        sp.add_argument("--manifest", help="manifest path (default: <out>.manifest.json)")
        sp.add_argument("--seed", type=int)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    common(g, "dataset file to write")
    g.add_argument("--kind", choices=("toy2d-gmm", "tiny-textures"))
    g.add_argument("--count", type=int)
    g.add_argument("--side", type=int)
    g.add_argument("--scale", type=int)

    t = sub.add_parser("train-teacher", help="train the multi-step conditional flow model")
    common(t, "checkpoint to write")
    t.add_argument("--data")
    t.add_argument("--iterations", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--warmup", type=int)
    t.add_argument("--ema", type=float)
    t.add_argument("--sigma-p", type=float)
    t.add_argument("--sigma-n", type=float)
    t.add_argument("--discrepancy", choices=("l1", "l2"))
    t.add_argument("--widths", type=_ints)

    d = sub.add_parser("distill", help="distil a teacher checkpoint into a one-step student")
    common(d, "student checkpoint to write")
    d.add_argument("--teacher")
    d.add_argument("--data")
    d.add_argument("--iterations", type=int)
    d.add_argument("--batch", type=int)
    d.add_argument("--lr", type=float)
    d.add_argument("--warmup", type=int)
    d.add_argument("--ema", type=float)
    d.add_argument("--variant", choices=VARIANTS)
    d.add_argument("--slope", choices=FIXED_KINDS)
    d.add_argument("--dt", type=float)
    d.add_argument("--lambda-align", type=float)
    d.add_argument("--lambda-bc", type=float)

    s = sub.add_parser("sample", help="super-resolve a dataset with a checkpoint")
    common(s, "sample file to write")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=("ode", "one-step"), help="default: ode for teachers, one-step for students")
    s.add_argument("--solver", choices=("rk45",) + FIXED_KINDS, default="rk45")
    s.add_argument("--tol", type=float, default=1e-3)
    s.add_argument("--steps", type=int, default=10)
    s.add_argument("--t", type=float, default=1.0, help="one-step dial value")
    s.add_argument("--count", type=int, help="use the first COUNT items")
    s.add_argument("--dump", help="directory for PGM/PPM strips or a point-cloud PNG")

    w = sub.add_parser("sweep", help="fidelity/realism sweep over the dial t")
    common(w, "CSV report to write (a PNG figure is written alongside)")
    w.add_argument("--model", required=True)
    w.add_argument("--data", required=True)
    w.add_argument("--mode", choices=("student", "teacher"))
    w.add_argument("--t-grid", type=_floats, default=[0.0, 0.25, 0.5, 0.75, 1.0])
    w.add_argument("--tol", type=float, default=1e-3)
    w.add_argument("--count", type=int)
    w.add_argument("--dump", help="directory for PGM/PPM strips (LR, estimates per t, GT)")

    st = sub.add_parser("straightness", help="trajectory straightness and RK45 NFE of a model")
    common(st, "CSV to write")
    st.add_argument("--model", required=True)
    st.add_argument("--data", required=True)
    st.add_argument("--K", type=int, default=100, help="time quadrature points")
    st.add_argument("--N", type=int, default=1000, help="couplings per time point")
    st.add_argument("--tol", type=float, default=1e-3)
    st.add_argument("--count", type=int, default=64, help="items for the NFE statistics")

    c = sub.add_parser("check", help="run a self-test battery")
    c.add_argument("--suite", choices=SUITES, required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--manifest", help="manifest path (default: check-<suite>.manifest.json)")
    return p


# ----------------------------------------------------------------- helpers

def _run_config(args, stage: str) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig(stage=stage)
    if cfg.stage != stage:
        cfg = replace(cfg, stage=stage)
    return cfg


def _override(obj, args, mapping: dict):
    kw = {field: getattr(args, arg) for arg, field in mapping.items() if getattr(args, arg, None) is not None}
    if not kw:
        return obj
    try:
        return replace(obj, **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _require(value, what: str):
    if not value:
        raise UsageError(f"{what} is required (flag or config file)")
    return value


def _task_from(data: torch.Tensor, meta: dict) -> SRTask:
    spatial = 1 if data.ndim == 2 else 2
    deg = DegradationSpec(int(meta["scale"]), float(meta.get("sigma_n", 0.0)), spatial_dims=spatial)
    return SRTask(data, deg, float(meta["sigma_p"]))


def _model_task(model_path, data: torch.Tensor):
    meta = load_checkpoint_meta(model_path)
    missing = [k for k in TASK_KEYS if f"task.{k}" not in meta]
    if missing:
        raise CheckpointError(f"{model_path} lacks task settings {missing}")
    task_meta = {k: meta[f"task.{k}"] for k in TASK_KEYS}
    return meta, _task_from(data, task_meta)


def _default_manifest(args, fallback: str) -> Path:
    if getattr(args, "manifest", None):
        return Path(args.manifest)
    out = getattr(args, "out", None)
    if not out and getattr(args, "config", None):
        try:
            out = load_config(args.config).paths.out
        except ConfigError:
            out = None
    return Path(f"{out}.manifest.json") if out else Path(fallback)


def _mkparent(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _subset(data: torch.Tensor, count):
    if count is None:
        return data
    if count < 1:
        raise UsageError("--count must be >= 1")
    return data[:count]


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, man: Manifest) -> int:
    cfg = _run_config(args, "teacher")
    spec = cfg.dataset
    kw = {k: getattr(args, k) for k in ("kind", "count", "side", "scale", "seed") if getattr(args, k) is not None}
    if kw:
        try:
            spec = DatasetSpec(**{**spec.to_dict(), **kw, **({} if "scale" in kw else {"scale": 0})})
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
    out = _mkparent(_require(args.out or cfg.paths.out, "--out"))
    write_dataset(spec, out)
    man.doc["config"] = {"data": spec.to_dict()}
    man.doc["seeds"] = {"data": spec.seed}
    man.output(out)
    log.info("wrote %d %s items to %s", spec.count, spec.kind, out)
    return EXIT_OK


def cmd_train_teacher(args, man: Manifest) -> int:
    cfg = _run_config(args, "teacher")
    data_path = _require(args.data or cfg.paths.data, "--data")
    out = _mkparent(_require(args.out or cfg.paths.out, "--out"))
    dmeta, data = load_dataset(data_path)
    flow = _override(cfg.flow, args, {"iterations": "iterations", "batch": "batch", "lr": "lr", "warmup": "warmup",
                                      "ema": "ema", "sigma_p": "sigma_p", "sigma_n": "sigma_n",
                                      "discrepancy": "discrepancy", "seed": "seed"})
    if "scale" in dmeta:
        flow = replace(flow, scale=int(dmeta["scale"]))
    widths = args.widths or cfg.model.widths
    task = _task_from(data, {"scale": flow.scale, "sigma_n": flow.sigma_n, "sigma_p": flow.sigma_p})
    man.input(data_path)
    man.doc["config"] = {"flow": flow.to_dict(), "model": {"widths": list(widths), "time_dim": cfg.model.time_dim}}
    man.doc["seeds"] = {"init": flow.seed, "data_stream": flow.seed + 1}
    meta = {f"task.{k}": getattr(flow, k) for k in TASK_KEYS}
    model = init_velocity_model(task.arch(widths, cfg.model.time_dim), flow.seed)
    trace_path = out.with_suffix(".loss.csv")
    _, trace = train_teacher(task, flow, model=model, checkpoint_path=out, trace_path=trace_path,
                             log_every=max(1, flow.iterations // 20), meta=meta)
    fig = out.with_suffix(".loss.png")
    plot_loss_trace(trace, fig, title="teacher velocity matching")
    for path in (out, trace_path, fig):
        man.output(path)
    return EXIT_OK


def cmd_distill(args, man: Manifest) -> int:
    cfg = _run_config(args, "distill")
    teacher_path = _require(args.teacher or cfg.paths.teacher, "--teacher")
    data_path = _require(args.data or cfg.paths.data, "--data")
    out = _mkparent(_require(args.out or cfg.paths.out, "--out"))
    _, data = load_dataset(data_path)
    tmeta, task = _model_task(teacher_path, data)
    dcfg = _override(cfg.distill, args, {"iterations": "iterations", "batch": "batch", "lr": "lr",
                                         "warmup": "warmup", "ema": "ema", "variant": "variant",
                                         "slope": "slope_kind", "dt": "dt", "lambda_align": "lambda_align",
                                         "lambda_bc": "lambda_bc", "seed": "seed"})
    teacher = load_checkpoint(teacher_path)
    man.input(teacher_path)
    man.input(data_path)
    man.doc["config"] = {"distill": dcfg.to_dict(), "task": {k: tmeta[f"task.{k}"] for k in TASK_KEYS}}
    man.doc["seeds"] = {"data_stream": dcfg.seed + 2}
    meta = {f"task.{k}": tmeta[f"task.{k}"] for k in TASK_KEYS}
    trace_path = out.with_suffix(".loss.csv")
    _, trace = distill_train(teacher, task, dcfg, checkpoint_path=out, trace_path=trace_path,
                             log_every=max(1, dcfg.iterations // 20), meta=meta)
    fig = out.with_suffix(".loss.png")
    plot_loss_trace(trace, fig, title=f"distillation ({dcfg.variant}, {dcfg.slope_kind} slope)")
    for path in (out, trace_path, fig):
        man.output(path)
    return EXIT_OK


def _dump_images(dump_dir, cond, estimates: list, x1, limit: int = 8) -> list:
    d = Path(dump_dir)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(min(limit, x1.shape[0])):
        strip = image_strip(cond[i], [e[i] for e in estimates], x1[i])
        path = d / f"strip_{i:03d}.{'ppm' if strip.shape[0] == 3 else 'pgm'}"
        write_pnm(path, strip)
        written.append(path)
    return written


def cmd_sample(args, man: Manifest) -> int:
    out = _mkparent(_require(args.out, "--out"))
    _, data = load_dataset(args.data)
    data = _subset(data, args.count)
    meta, task = _model_task(args.model, data)
    model = load_checkpoint(args.model)
    mode = args.mode or ("one-step" if meta.get("stage") == "distill" else "ode")
    seed = 0 if args.seed is None else args.seed
    gen = torch.Generator().manual_seed(seed)
    x0, x1, cond = task.couple(task.data, gen)
    v = model.field(ema=True)
    man.input(args.model)
    man.input(args.data)
    solver = SolverSpec(args.solver, steps=args.steps, tol=args.tol)
    if mode == "ode":
        x_hat, nfes = solve_each(v, x0, cond, solver)
    else:
        if not 0.0 <= args.t <= 1.0:
            raise UsageError("--t must lie in [0, 1]")
        with torch.no_grad():
            x_hat = student_one_step(v, x0, cond, args.t)
        nfes = [1] * x0.shape[0]
    man.doc["config"] = {"mode": mode, "solver": solver.kind, "tol": solver.tol, "steps": solver.steps,
                         "t": args.t, "count": int(x0.shape[0])}
    man.doc["seeds"] = {"coupling": seed}
    ps = [psnr(x_hat[i], x1[i]) for i in range(x1.shape[0])] if x1.ndim >= 3 else []
    stats = {"nfe_mean": float(np.mean(nfes)), "nfe_max": int(max(nfes))}
    if ps:
        stats["psnr_mean"] = float(np.mean(ps))
    man.doc["results"] = stats
    save_tensors(out, {"x_hat": x_hat, "x0": x0, "cond": cond}, {"mode": mode, **stats})
    man.output(out)
    if args.dump:
        if x1.ndim >= 3:
            for path in _dump_images(args.dump, cond, [x_hat], x1):
                man.output(path)
        else:
            path = Path(args.dump) / "points.png"
            path.parent.mkdir(parents=True, exist_ok=True)
            plot_points({"x0": x0.numpy(), "sample": x_hat.numpy(), "data": x1.numpy()}, path)
            man.output(path)
    print(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in stats.items()))
    return EXIT_OK


def cmd_sweep(args, man: Manifest) -> int:
    out = _mkparent(_require(args.out, "--out"))
    _, data = load_dataset(args.data)
    data = _subset(data, args.count)
    meta, task = _model_task(args.model, data)
    model = load_checkpoint(args.model)
    mode = args.mode or ("student" if meta.get("stage") == "distill" else "teacher")
    seed = 0 if args.seed is None else args.seed
    man.input(args.model)
    man.input(args.data)
    grid = sorted(args.t_grid)
    est, x1, x0, cond = sweep_estimates(model.field(ema=True), mode, task, task.data, grid, seed,
                                        SolverSpec("rk45", tol=args.tol))
    result = summarize(est, x1, model_id=sha256_file(args.model)[:16], dataset_id=sha256_file(args.data)[:16])
    emit_report(result, out)
    man.doc["config"] = {"mode": mode, "t_grid": grid, "tol": args.tol, "count": int(x1.shape[0])}
    man.doc["seeds"] = {"coupling": seed}
    man.output(out)
    if x1.ndim >= 3:
        fig = out.with_suffix(".png")
        plot_sweep({mode: result}, fig, title=f"{mode} sweep, n={x1.shape[0]}")
        man.output(fig)
        if args.dump:
            for path in _dump_images(args.dump, cond, [est[t] for t in grid], x1):
                man.output(path)
    for r in result.rows:
        print(f"t={r.t:g} psnr={r.psnr_mean:.4f}+-{r.psnr_std:.3f} proxy={r.proxy_mean:.5g}+-{r.proxy_std:.3g}")
    return EXIT_OK


def cmd_straightness(args, man: Manifest) -> int:
    _, data = load_dataset(args.data)
    meta, task = _model_task(args.model, data)
    model = load_checkpoint(args.model)
    v = model.field(ema=True)
    seed = 0 if args.seed is None else args.seed
    man.input(args.model)
    man.input(args.data)
    s_val = straightness(v, task.sample, args.K, args.N, seed)
    gen = torch.Generator().manual_seed(seed + 1)
    x0, _, cond = task.sample(gen, args.count)
    _, nfes = solve_each(v, x0, cond, SolverSpec("rk45", tol=args.tol))
    row = {"sigma_p": float(meta["task.sigma_p"]), "straightness": s_val,
           "nfe_mean": float(np.mean(nfes)), "nfe_max": int(max(nfes))}
    man.doc["config"] = {"K": args.K, "N": args.N, "tol": args.tol, "count": args.count}
    man.doc["seeds"] = {"straightness": seed, "nfe": seed + 1}
    man.doc["results"] = row
    if args.out:
        out = _mkparent(args.out)
        with open(out, "w") as fh:
            fh.write(",".join(row) + "\n")
            fh.write(",".join(format(v, ".17g") if isinstance(v, float) else str(v) for v in row.values()) + "\n")
        man.output(out)
    print(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    return EXIT_OK


def cmd_check(args, man: Manifest) -> int:
    results, seconds = run_suite(args.suite, args.seed)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print(f"{'PASS' if ok else 'FAIL'} suite {args.suite}: {sum(r.passed for r in results)}/{len(results)} "
          f"in {seconds:.1f}s")
    man.doc["config"] = {"suite": args.suite}
    man.doc["seeds"] = {"suite": args.seed}
    man.doc["results"] = [r.__dict__ for r in results]
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {"gen-data": cmd_gen_data, "train-teacher": cmd_train_teacher, "distill": cmd_distill,
            "sample": cmd_sample, "sweep": cmd_sweep, "straightness": cmd_straightness, "check": cmd_check}


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "INFO").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        level = "INFO"
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr,
                        force=True)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageExit:
        return EXIT_USAGE
    man = Manifest(args.command, argv)
    if getattr(args, "config", None):
        man.input(args.config)
    code = EXIT_USAGE
    try:
        code = COMMANDS[args.command](args, man)
        if getattr(args, "config", None):
            man.doc["run_config"] = render_config(load_config(args.config))
    except (NumericError, FloatingPointError) as exc:
        log.error("numeric failure: %s", exc)
        code = EXIT_NUMERIC
    except (ConfigError, UsageError, DimensionError, CheckpointError, FileNotFoundError, IsADirectoryError,
            PermissionError, FlowSRError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        code = EXIT_USAGE
    man.doc["exit_code"] = code
    try:
        man.write(_mkparent(_default_manifest(args, f"{args.command}-{getattr(args, 'suite', 'run')}.manifest.json")))
    except OSError as exc:
        log.error("could not write manifest: %s", exc)
    return code


if __name__ == "__main__":
    sys.exit(main())
