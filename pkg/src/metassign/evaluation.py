"""Meta-test protocol, metrics, and report files.

Held-out tasks get one round of inner-loop adaptation on K support
assignments drawn from the held-out ODs; the remaining held-out ODs form
the query set. R-squared is computed on denormalized flows pooled over all
(edge, query OD) pairs of a task.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .datasets import Dataset
from .errors import ConfigError, UndefinedMetricError
from .meta import MetaConfig, _stream, inner_adapt

# Fixed salt + no date metadata: byte-identical SVG output for fixed input.
_SVG_SETTINGS = {"svg.hashsalt": "metassign"}


def r_squared(true_values, predictions) -> float:
    """Coefficient of determination 1 - SS_res/SS_tot about the true mean."""
    true_values = np.asarray(true_values, dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    if true_values.shape != predictions.shape or true_values.ndim != 1:
        raise ConfigError(
            f"r_squared needs equal 1-d shapes, got {true_values.shape} "
            f"vs {predictions.shape}")
    if true_values.size == 0:
        raise ConfigError("r_squared needs non-empty inputs")
    ss_tot = float(((true_values - true_values.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise UndefinedMetricError("r_squared undefined: true values have zero variance")
    ss_res = float(((true_values - predictions) ** 2).sum())
    return 1.0 - ss_res / ss_tot


@dataclass(frozen=True)
class TaskReport:
    task_id: int
    r_squared: float
    n_points: int
    support_loss_before: float
    support_loss_after: float
    query_loss: float


@dataclass(frozen=True)
class MetaTestReport:
    per_task: list[TaskReport]
    scatter_data: dict[int, np.ndarray]  # task_id -> (n_points, 2) true/pred


def meta_test(model, theta, dataset: Dataset, config: MetaConfig) -> MetaTestReport:
    """Adapt the meta-parameters once per held-out task and score the
    held-out query ODs in raw vehicles/hour."""
    split = dataset.split
    if not split.test_task_ids or not split.test_od_ids:
        raise ConfigError("dataset has no reserved test split")
    if config.k_support >= len(split.test_od_ids):
        raise ConfigError(
            f"k_support {config.k_support} leaves no query ODs out of "
            f"{len(split.test_od_ids)} test ODs")
    flow_scale = dataset.normalization.flow_scale
    per_task = []
    scatter = {}
    for task_id in split.test_task_ids:
        rng = _stream(config.seed, 3, task_id)
        picks = rng.choice(len(split.test_od_ids), size=config.k_support, replace=False)
        support_ods = [split.test_od_ids[int(i)] for i in picks]
        query_ods = [oid for oid in split.test_od_ids if oid not in set(support_ods)]
        support = dataset.samples_for_task(task_id, support_ods)
        query = dataset.samples_for_task(task_id, query_ods)

        before = model.loss(theta, support, train=False).item()
        adapted = inner_adapt(model, theta, support, config.alpha,
                              config.inner_steps, rng=rng, train=True,
                              clip_norm=config.clip_norm)
        after = model.loss(adapted, support, train=False).item()
        query_loss = model.loss(adapted, query, train=False).item()

        truths, preds = [], []
        for sample in query:
            truths.append(sample.target_flows)
            preds.append(model.predict(adapted, sample) * flow_scale)
        truths = np.concatenate(truths)
        preds = np.concatenate(preds)
        scatter[task_id] = np.column_stack([truths, preds])
        per_task.append(TaskReport(
            task_id=task_id,
            r_squared=r_squared(truths, preds),
            n_points=len(truths),
            support_loss_before=before,
            support_loss_after=after,
            query_loss=query_loss,
        ))
    return MetaTestReport(per_task=per_task, scatter_data=scatter)


def _write_csv(path: str, header: str, rows) -> None:
    with open(path, "w", newline="\n") as f:
        f.write(header + "\n")
        for row in rows:
            f.write(",".join(repr(float(v)) if isinstance(v, float) else str(v)
                             for v in row) + "\n")


def _scatter_plot(path: str, points: np.ndarray, task_id: int) -> None:
    with plt.rc_context(_SVG_SETTINGS):
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.scatter(points[:, 0], points[:, 1], s=6, alpha=0.5, edgecolors="none")
        top = max(points.max(), 1.0) * 1.05
        ax.plot([0, top], [0, top], "k--", linewidth=0.8)
        ax.set_xlim(0, top)
        ax.set_ylim(0, top)
        ax.set_xlabel("true flow [veh/h]")
        ax.set_ylabel("predicted flow [veh/h]")
        ax.set_title(f"task {task_id}")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def write_report(report: MetaTestReport, out_dir,
                 history=None) -> list[str]:
    """Write per-task scatter CSVs and SVG plots, a metrics summary CSV,
    and (when given) the meta-loss history CSV. Returns the paths written,
    with deterministic bytes for fixed inputs."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    summary_path = os.path.join(out_dir, "summary.csv")
    _write_csv(summary_path,
               "task_id,r_squared,n_points,support_loss_before,"
               "support_loss_after,query_loss",
               [(t.task_id, t.r_squared, t.n_points, t.support_loss_before,
                 t.support_loss_after, t.query_loss) for t in report.per_task])
    written.append(summary_path)

    if history is not None:
        history_path = os.path.join(out_dir, "history.csv")
        _write_csv(history_path, "iteration,mean_query_loss,wall_time_s",
                   [(h.iteration, h.mean_query_loss, h.wall_time_s)
                    for h in history])
        written.append(history_path)

    for task in report.per_task:
        points = report.scatter_data[task.task_id]
        csv_path = os.path.join(out_dir, f"scatter_task{task.task_id}.csv")
        _write_csv(csv_path, "true_flow,predicted_flow",
                   [(float(a), float(b)) for a, b in points])
        written.append(csv_path)
        svg_path = os.path.join(out_dir, f"scatter_task{task.task_id}.svg")
        _scatter_plot(svg_path, points, task.task_id)
        written.append(svg_path)
    return written


def _loss_curve_plot(path: str, iterations, losses) -> None:
    with plt.rc_context(_SVG_SETTINGS):
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(iterations, losses, linewidth=1.0)
        ax.set_xlabel("meta-iteration")
        ax.set_ylabel("mean query loss")
        ax.set_yscale("log")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def rerender_report(in_dir, out_dir) -> list[str]:
    """Rebuild plots and a recomputed metrics summary from a report
    directory's scatter CSVs and history.csv. An input directory without
    scatter files yields a summary with zero rows."""
    import glob
    import re

    os.makedirs(out_dir, exist_ok=True)
    written = []
    rows = []
    for csv_path in sorted(glob.glob(os.path.join(str(in_dir), "scatter_task*.csv"))):
        match = re.search(r"scatter_task(\d+)\.csv$", csv_path)
        task_id = int(match.group(1))
        points = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
        rows.append((task_id, r_squared(points[:, 0], points[:, 1]), len(points)))
        svg_path = os.path.join(out_dir, f"scatter_task{task_id}.svg")
        _scatter_plot(svg_path, points, task_id)
        written.append(svg_path)
    summary_path = os.path.join(out_dir, "summary_recomputed.csv")
    _write_csv(summary_path, "task_id,r_squared,n_points", rows)
    written.append(summary_path)

    history_path = os.path.join(str(in_dir), "history.csv")
    if os.path.exists(history_path):
        hist = np.loadtxt(history_path, delimiter=",", skiprows=1, ndmin=2)
        if hist.size:
            curve_path = os.path.join(out_dir, "meta_loss.svg")
            _loss_curve_plot(curve_path, hist[:, 0], hist[:, 1])
            written.append(curve_path)
    return written
