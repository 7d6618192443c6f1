import csv
import logging
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from interface.base_evaluator import METRIC_COLUMNS, EvalResult  # noqa: E402
from interface.base_rollout import RolloutTrace  # noqa: E402
from util.errors import DatasetError, MissingArtifactError  # noqa: E402

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ["method", "protocol"] + METRIC_COLUMNS


def write_results(results: Sequence[EvalResult], path: Union[str, Path]) -> Path:
    """Comparison table: method, protocol, then the metric columns in fixed order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as file:
        writer = csv.writer(file)
        writer.writerow(RESULT_COLUMNS)
        for result in results:
            row = result.row()
            writer.writerow([result.method, result.protocol] + [f"{row[name]:.4f}" for name in METRIC_COLUMNS])
    logger.info("Wrote %d result rows to %s", len(results), path)
    return path


def read_results(path: Union[str, Path]) -> List[Dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(str(path), "run eval or compare first")
    with open(path, newline="", encoding="utf-8") as file:
        return list(csv.DictReader(file))


def read_loss_log(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(str(path), "train first")
    with open(path, newline="", encoding="utf-8") as file:
        rows = list(csv.DictReader(file))
    if not rows:
        return {}
    return {name: np.array([float(row[name]) for row in rows]) for name in rows[0]}


def read_trace(path: Union[str, Path]) -> RolloutTrace:
    """An `explain` trace, one iteration record per line."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(str(path), "run explain first")
    try:
        return RolloutTrace.from_jsonl(path.read_text(encoding="utf-8"))
    except (ValueError, KeyError, TypeError) as e:
        raise DatasetError(f"{path}: malformed trace ({e})") from e


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
    logger.info("Saved plot %s", path)
    return path


def plot_pr_curves(curves: Dict[str, Tuple[np.ndarray, np.ndarray]], path: Union[str, Path], title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, (recall, precision) in curves.items():
        if recall.size:
            ax.step(recall, precision, where="post", label=label)
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    if title:
        ax.set_title(title)
    if curves:
        ax.legend(loc="lower left")
    return _save(fig, Path(path))


def plot_loss_curves(
    logs: Dict[str, Dict[str, np.ndarray]], path: Union[str, Path], terms: Sequence[str] = ("total", "dedup"), window: int = 50
) -> Path:
    """Moving averages of the chosen loss terms, one line per (log, term)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, log in logs.items():
        for term in terms:
            values = log.get(term)
            if values is None or values.size == 0:
                continue
            width = max(1, min(window, values.size))
            smooth = np.convolve(values, np.ones(width) / width, mode="valid")
            ax.plot(log["step"][width - 1 :], smooth, label=f"{name}:{term}")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right")
    return _save(fig, Path(path))


def plot_metric_bars(rows: Sequence[Dict[str, str]], path: Union[str, Path], metric: str = "AP50") -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [f"{row['method']}\n{row['protocol']}" for row in rows]
    ax.bar(np.arange(len(rows)), [float(row[metric]) for row in rows])
    ax.set_xticks(np.arange(len(rows)))
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel(metric)
    ax.set_ylim(0.0, 1.0)
    return _save(fig, Path(path))


def plot_score_readoff(rows: Sequence[Dict[str, object]], path: Union[str, Path], title: str = "") -> Path:
    """Base vs fused confidence of the selected class, one pair of bars per iteration."""
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = np.arange(len(rows))
    ax.bar(steps - 0.2, [float(row["base"]) for row in rows], width=0.4, label="base")
    ax.bar(steps + 0.2, [float(row["fused"]) for row in rows], width=0.4, label="fused")
    ax.set_xticks(steps)
    ax.set_xticklabels([f"n={row['iteration']}" for row in rows], fontsize=7)
    ax.set_ylabel("confidence")
    ax.set_ylim(0.0, 1.05)
    if title:
        ax.set_title(title)
    ax.legend(loc="upper right")
    return _save(fig, Path(path))


def plot_memory(snapshots: Sequence[np.ndarray], path: Union[str, Path]) -> Path:
    """L2 norm over channels of each memory grid, one panel per write."""
    count = max(len(snapshots), 1)
    fig, axes = plt.subplots(1, count, figsize=(2.2 * count, 2.4), squeeze=False)
    for i, grid in enumerate(snapshots):
        ax = axes[0, i]
        ax.imshow(np.linalg.norm(np.asarray(grid, dtype=np.float64), axis=-1), cmap="viridis")
        ax.set_title(f"n={i}", fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
    return _save(fig, Path(path))


def write_per_class(results: Sequence[EvalResult], class_names: Sequence[str], path: Union[str, Path]) -> Path:
    """AP@0.5 per class, one row per (method, protocol)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as file:
        writer = csv.writer(file)
        writer.writerow(["method", "protocol"] + list(class_names))
        for result in results:
            values = [result.per_class_ap50.get(k) for k in range(len(class_names))]
            # blank where the class has no ground truth
            writer.writerow([result.method, result.protocol] + ["" if v is None else f"{v:.4f}" for v in values])
    return path
