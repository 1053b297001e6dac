"""Cross-validated training / evaluation runs and their CSV outputs."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data_io import GroundTruth, format_float, load_bags, read_manifest
from .model import ModelParams, SolverConfig, attention_scores
from .survival import (
    Cohort,
    SurvivalError,
    c_index,
    km_curve,
    log_rank_test,
    stratify_by_median,
)
from .train import EpochRecord, TrainConfig, predict_risks, train

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_loss", "rho", "val_cindex")
METRIC_COLUMNS = ("fold", "n_bags", "n_events", "c_index", "chi_square", "p_value",
                  "ceiling_cindex", "attention_ratio")
SUMMARY_COLUMNS = ("n_folds", "mean_c_index", "mean_ceiling_cindex", "max_p_value",
                   "pooled_attention_ratio")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format_float(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def history_csv(history: list[EpochRecord]) -> str:
    return _csv_text(HISTORY_COLUMNS, [(h.epoch, h.train_loss, h.rho, h.val_cindex) for h in history])


@dataclass
class Dataset:
    root: Path
    bags: list
    folds: np.ndarray  # -1 where unassigned

    @classmethod
    def load(cls, root) -> "Dataset":
        root = Path(root)
        records = read_manifest(root / "manifest.tsv")
        bags = load_bags(root / "manifest.tsv", records)
        folds = np.array([-1 if r.fold is None else r.fold for r in records])
        return cls(root, bags, folds)

    def fold_ids(self) -> list[int]:
        return sorted(int(f) for f in set(self.folds.tolist()) if f >= 0)

    def split(self, fold: int | None):
        if fold is None:
            return self.bags, []
        train_bags = [b for b, f in zip(self.bags, self.folds) if f != fold]
        held = [b for b, f in zip(self.bags, self.folds) if f == fold]
        if not held:
            raise ValueError(f"fold {fold} has no bags")
        return train_bags, held


def fold_tag(fold: int | None) -> str:
    return "all" if fold is None else str(fold)


def train_fold(ds: Dataset, fold: int | None, cfg: TrainConfig, out_dir) -> tuple[ModelParams, list]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_bags, held = ds.split(fold)
    params, history = train(train_bags, cfg, val_bags=held or None)
    tag = fold_tag(fold)
    save_checkpoint(out_dir / f"fold_{tag}.ckpt", params, cfg.as_dict(), cfg.seed, cfg.epochs,
                    {"fold": tag, "feature_dim": int(ds.bags[0].dim), "rho": cfg.final_rho()})
    (out_dir / f"history_fold_{tag}.csv").write_text(history_csv(history), encoding="utf-8")
    return params, history


@dataclass
class FoldMetrics:
    fold: str
    n_bags: int
    n_events: int
    c_index: float
    chi_square: float
    p_value: float
    ceiling: float
    attention_ratio: float
    high: Cohort | None = None
    low: Cohort | None = None
    # (sum, count) of attention over prognostic and background instances
    attention_totals: tuple | None = None

    def row(self):
        return (self.fold, self.n_bags, self.n_events, self.c_index, self.chi_square,
                self.p_value, self.ceiling, self.attention_ratio)


def solver_from_header(header: dict) -> tuple[SolverConfig, float, int | None, int, int]:
    cfg = TrainConfig(**header["config"])
    rho = float(header.get("extra", {}).get("rho", cfg.final_rho()))
    return cfg.solver, rho, cfg.max_patches, cfg.seed, cfg.batch_size


def attention_totals(plans, params, labels, prognostic: int, background: int = 0) -> tuple:
    """``(prog_sum, prog_count, back_sum, back_count)`` of per-instance attention."""
    prog, back = [], []
    for plan, lab in zip(plans, labels):
        scores = attention_scores(plan, params)
        prog.append(scores[lab == prognostic])
        back.append(scores[lab == background])
    prog, back = np.concatenate(prog), np.concatenate(back)
    return float(prog.sum()), int(prog.size), float(back.sum()), int(back.size)


def ratio_from_totals(totals) -> float:
    prog_sum, prog_n, back_sum, back_n = totals
    if prog_n == 0 or back_n == 0 or back_sum == 0:
        return float("nan")
    return (prog_sum / prog_n) / (back_sum / back_n)


def attention_ratio(plans, params, labels, prognostic: int, background: int = 0) -> float:
    """Mean attention on prognostic instances over mean on background instances."""
    return ratio_from_totals(attention_totals(plans, params, labels, prognostic, background))


def evaluate_fold(ds: Dataset, fold: int | None, params: ModelParams, header: dict,
                  truth: GroundTruth | None = None, prognostic: int | None = None) -> FoldMetrics:
    solver, rho, max_patches, seed, batch = solver_from_header(header)
    _, held = ds.split(fold)
    if fold is None:
        held = ds.bags
    risks, plans = predict_risks(held, params, rho, solver, batch, max_patches, seed)
    times = [b.time for b in held]
    events = [b.event for b in held]
    cohort = Cohort(risks, times, events, [b.bag_id for b in held])
    try:
        cidx = c_index(cohort)
    except SurvivalError:
        cidx = float("nan")
    high, low = stratify_by_median(cohort)
    try:
        chi, p = log_rank_test(high, low)
    except SurvivalError as exc:
        log.warning("fold %s: log-rank undefined (%s)", fold_tag(fold), exc)
        chi, p = float("nan"), float("nan")
    ceiling = ratio = float("nan")
    totals = None
    if truth is not None:
        index = {bid: i for i, bid in enumerate(truth.bag_ids)}
        rows = [index[b.bag_id] for b in held]
        try:
            ceiling = c_index(Cohort(truth.log_hazard[rows], times, events))
        except SurvivalError:
            pass
        if prognostic is not None and max_patches is None:
            totals = attention_totals(plans, params, [truth.labels[i] for i in rows], prognostic)
            ratio = ratio_from_totals(totals)
    return FoldMetrics(fold_tag(fold), len(held), int(sum(events)), cidx, float(chi), float(p),
                       ceiling, ratio, high, low, totals)


def summarize(metrics: list[FoldMetrics]) -> tuple:
    """Cross-fold summary row; attention is pooled over every held-out instance."""
    totals = [m.attention_totals for m in metrics]
    pooled = float("nan")
    if totals and all(t is not None for t in totals):
        pooled = ratio_from_totals(tuple(sum(col) for col in zip(*totals)))
    return (len(metrics), float(np.mean([m.c_index for m in metrics])),
            float(np.mean([m.ceiling for m in metrics])),
            float(np.max([m.p_value for m in metrics])), pooled)


def write_eval_outputs(metrics: list[FoldMetrics], out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.csv").write_text(_csv_text(METRIC_COLUMNS, [m.row() for m in metrics]),
                                         encoding="utf-8")
    (out_dir / "summary.csv").write_text(_csv_text(SUMMARY_COLUMNS, [summarize(metrics)]),
                                         encoding="utf-8")
    for m in metrics:
        for name, group in (("high", m.high), ("low", m.low)):
            if group is None or len(group) == 0:
                continue
            curve = km_curve(group.times, group.events)
            rows = zip(curve.time_points.tolist(), curve.survival.tolist(),
                       curve.at_risk.tolist(), curve.observed_events.tolist())
            (out_dir / f"km_fold_{m.fold}_{name}.csv").write_text(
                _csv_text(("time", "survival", "at_risk", "events"), rows), encoding="utf-8")


def load_fold_checkpoint(ckpt_dir, fold: int | None):
    return load_checkpoint(Path(ckpt_dir) / f"fold_{fold_tag(fold)}.ckpt")
