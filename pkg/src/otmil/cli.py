"""Command-line interface: ``otmil {solve,synth,train,eval,attention,verify}``.

Exit codes: 0 success, 1 usage / parse / missing input, 2 numerical
non-convergence (or a failed verification).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import io
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import ot_core
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, read_config
from .data_io import DataError, format_float, read_bag, read_ground_truth, synth_dataset
from .model import GradientError, ModelError, attention_scores
from .pipeline import (
    Dataset,
    evaluate_fold,
    load_fold_checkpoint,
    solver_from_header,
    summarize,
    train_fold,
    write_eval_outputs,
)
from .train import TrainingError, predict_risks
from .verify import gradient_suite, oracle_suite

log = logging.getLogger("otmil")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


def parse_cost_csv(text: str, source: str = "cost") -> np.ndarray:
    rows = []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or all(not cell.strip() for cell in row):
            continue
        values = []
        for col, cell in enumerate(row, start=1):
            try:
                v = float(cell)
            except ValueError:
                raise UsageError(f"{source}: row {lineno}, column {col}: {cell.strip()!r} is not a number") from None
            if not np.isfinite(v) or v < 0:
                raise UsageError(f"{source}: row {lineno}, column {col}: {cell.strip()!r} must be finite and nonnegative")
            values.append(v)
        if rows and len(values) != len(rows[0]):
            raise UsageError(f"{source}: row {lineno} has {len(values)} columns, expected {len(rows[0])}")
        rows.append(values)
    if not rows:
        raise UsageError(f"{source}: empty cost matrix")
    return np.array(rows, dtype=np.float64)


def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


def load_run_config(args) -> RunConfig:
    values = read_config(args.config) if getattr(args, "config", None) else {}
    overrides = {
        "seed": getattr(args, "seed", None),
        "kl_weight": getattr(args, "kl_weight", None),
        "epsilon": getattr(args, "epsilon", None),
        "solver_tol": getattr(args, "tol", None),
        "out": getattr(args, "out", None),
        "data": getattr(args, "data", None),
        "fold": getattr(args, "fold", None),
        "ramp_shape": getattr(args, "ramp", None),
        "global_constraint": getattr(args, "global_constraint", None),
        "max_patches": getattr(args, "max_patches", None),
        "fixed_rho": getattr(args, "rho", None),
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_values(values)


# ---------------------------------------------------------------------------
# commands


def cmd_solve(args) -> int:
    cost = parse_cost_csv(_read_text(args.cost_csv), args.cost_csv)
    rho = 1.0 if args.rho is None else args.rho
    kl = 0.1 if args.kl_weight is None else args.kl_weight
    eps = ot_core.DEFAULT_EPSILON if args.epsilon is None else args.epsilon
    tol = ot_core.DEFAULT_TOL if args.tol is None else args.tol
    try:
        problem = ot_core.OtProblem(cost, rho=rho, kl_weight=kl, epsilon=eps,
                                    global_constraint=args.global_constraint or "kl")
    except ot_core.OtError as exc:
        raise UsageError(str(exc)) from None
    status = EXIT_OK
    try:
        plan = ot_core.solve_heterogeneity_ot(problem, tol=tol, max_iter=args.max_iter)
    except ot_core.ConvergenceError as exc:
        if exc.plan is None:
            raise
        print(f"error: {exc}", file=sys.stderr)
        plan, status = exc.plan, EXIT_NUMERIC
    aug = ot_core.build_augmented(problem)
    row_res, mass_res = ot_core.marginal_residuals(plan)
    out = sys.stdout
    out.write("row,col,mass\n")
    for (i, j), v in np.ndenumerate(plan.mass):
        out.write(f"{i},{j},{format_float(float(v))}\n")
    out.write(f"# sink_mass,{format_float(float(plan.sink_mass.sum()))}\n")
    out.write(f"# row_residual,{format_float(row_res)}\n")
    out.write(f"# mass_residual,{format_float(mass_res)}\n")
    out.write(f"# iterations,{plan.iterations}\n")
    out.write(f"# objective,{format_float(ot_core.entropic_objective(plan, aug, eps))}\n")
    return status


def cmd_synth(args) -> int:
    run = load_run_config(args)
    out = run.out or run.data
    if not out:
        raise UsageError("synth needs an output directory (--out or 'out' in the config)")
    records, _ = synth_dataset(run.synth, out)
    print(f"wrote {len(records)} bags to {out}")
    return EXIT_OK


def _dataset(run: RunConfig) -> Dataset:
    if not run.data:
        raise UsageError("no dataset directory (--data or 'data' in the config)")
    if not (Path(run.data) / "manifest.tsv").exists():
        raise UsageError(f"{run.data}: manifest.tsv not found")
    return Dataset.load(run.data)


def _folds(run: RunConfig, ds: Dataset) -> list:
    if run.fold is not None:
        if run.fold not in ds.fold_ids():
            raise UsageError(f"fold {run.fold} not present in the manifest")
        return [run.fold]
    return ds.fold_ids() or [None]


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("OTMIL_THREADS", "1")))
    except ValueError:
        raise UsageError("OTMIL_THREADS must be an integer") from None


def cmd_train(args) -> int:
    run = load_run_config(args)
    ds = _dataset(run)
    out = Path(run.out or "runs")
    folds = _folds(run, ds)
    with concurrent.futures.ThreadPoolExecutor(max_workers=min(_workers(), len(folds))) as pool:
        results = list(pool.map(lambda f: train_fold(ds, f, run.train, out), folds))
    for fold, (_, history) in zip(folds, results):
        last = history[-1] if history else None
        msg = f"fold {fold if fold is not None else 'all'}: {len(history)} epochs"
        if last is not None:
            msg += f", loss {last.train_loss:.4f}, val C-index {last.val_cindex:.4f}"
        print(msg)
    return EXIT_OK


def cmd_eval(args) -> int:
    run = load_run_config(args)
    ds = _dataset(run)
    ckpt_dir = Path(args.checkpoints)
    out = Path(run.out or ckpt_dir)
    truth = None
    if (ds.root / "ground_truth.csv").exists():
        truth = read_ground_truth(ds.root)
    metrics = []
    for fold in _folds(run, ds):
        try:
            params, header = load_fold_checkpoint(ckpt_dir, fold)
        except FileNotFoundError:
            raise UsageError(f"no checkpoint for fold {fold} in {ckpt_dir}") from None
        m = evaluate_fold(ds, fold, params, header, truth, run.synth.prognostic_index if truth else None)
        metrics.append(m)
        print(f"fold {m.fold}: C-index {m.c_index:.4f}  log-rank chi2 {m.chi_square:.4g}  p {m.p_value:.4g}")
    write_eval_outputs(metrics, out)
    n, mean_c, mean_ceiling, max_p, pooled = summarize(metrics)
    print(f"mean C-index {mean_c:.4f} (true-hazard ceiling {mean_ceiling:.4f}), "
          f"max p {max_p:.4g}, pooled attention ratio {pooled:.4g}")
    return EXIT_OK


def cmd_attention(args) -> int:
    params, header = load_checkpoint(args.checkpoint)
    bag = read_bag(args.bag)
    solver, rho, _, _, _ = solver_from_header(header)
    if args.rho is not None:
        rho = args.rho
    _, plans = predict_risks([bag], params, rho, solver)
    scores = attention_scores(plans[0], params)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    buf = io.StringIO()
    buf.write("instance_id,attention\n")
    for i in order:
        buf.write(f"{bag.instance_ids[i]},{format_float(float(scores[i]))}\n")
    if args.out:
        Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_verify(args) -> int:
    start = time.time()
    seed = args.seed or 0
    cases = oracle_suite(args.oracle_cases, seed=seed)
    ok_oracle = all(c.passed() for c in cases)
    print(f"oracle agreement: {sum(c.passed() for c in cases)}/{len(cases)} "
          f"(max objective gap {max(c.objective_gap for c in cases):.2e}, "
          f"max plan gap {max(c.plan_gap for c in cases):.2e}) {'PASS' if ok_oracle else 'FAIL'}")
    grads = gradient_suite(args.gradient_cases, seed=seed)
    ok_grad = all(g.passed() for g in grads)
    print(f"gradient check: {sum(g.passed() for g in grads)}/{len(grads)} "
          f"(max rel error {max(g.rel_error for g in grads):.2e}) {'PASS' if ok_grad else 'FAIL'}")
    print(f"elapsed {time.time() - start:.1f}s")
    return EXIT_OK if ok_oracle and ok_grad else EXIT_NUMERIC


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="otmil", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, solver=True):
        p.add_argument("--config", help="key = value run configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        if solver:
            p.add_argument("--rho", type=float, help="mass ratio (solve) / fixed rho (fixed ramp)")
            p.add_argument("--lambda", dest="kl_weight", type=float, help="KL weight")
            p.add_argument("--epsilon", type=float)
            p.add_argument("--tol", type=float)
            p.add_argument("--global-constraint", choices=("kl", "equality"))

    p = sub.add_parser("solve", help="solve one OT problem from a cost CSV")
    p.add_argument("cost_csv")
    common(p)
    p.add_argument("--max-iter", type=int, default=ot_core.DEFAULT_MAX_ITER)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("synth", help="generate a synthetic bag dataset")
    common(p, solver=False)
    p.set_defaults(func=cmd_synth)

    for name, func, help_ in (("train", cmd_train, "train one model per fold"),
                              ("eval", cmd_eval, "evaluate fold checkpoints")):
        p = sub.add_parser(name, help=help_)
        common(p)
        p.add_argument("--data", help="dataset directory containing manifest.tsv")
        p.add_argument("--fold", type=int)
        p.add_argument("--ramp", choices=("sigmoid", "linear", "fixed"))
        p.add_argument("--max-patches", type=int)
        if name == "eval":
            p.add_argument("--checkpoints", required=True, help="directory of fold checkpoints")
        p.set_defaults(func=func)

    p = sub.add_parser("attention", help="per-instance attention for one bag")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bag", required=True)
    p.add_argument("--rho", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_attention)

    p = sub.add_parser("verify", help="oracle agreement and gradient checks")
    p.add_argument("--seed", type=int)
    p.add_argument("--oracle-cases", type=int, default=50)
    p.add_argument("--gradient-cases", type=int, default=10)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ot_core.ConvergenceError, ot_core.KernelUnderflowError, GradientError,
            TrainingError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ModelError, ot_core.OtError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
