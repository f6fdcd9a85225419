"""Victim training under defenses, clean-test accuracy and the
variant x defense x architecture x seed accuracy matrix."""

import json
import logging
import os
import tempfile
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import matplotlib
import numpy as np
import pandas as pd
from matplotlib.figure import Figure
from prettytable import PrettyTable
from tqdm import tqdm

from .config import AGGREGATE_NAME, CELLS_NAME, CHART_NAME
from .data_io import LabeledDataset
from .defenses import (DefenseConfig, adaptive_channel_at, adversarial_training, apply_dataset_defense,
                       codec_info, refreshed_adaptive_random)
from .errors import ErrorCode, ToolkitError, require
from .model_zoo import ARCH_MAP, Classifier, TrainSpec, train_surrogate

LOG = logging.getLogger(__name__)

CELL_COLUMNS = ["variant", "defense", "arch", "run", "seed", "accuracy", "runtime_s"]
CELL_KEY = ["variant", "defense", "arch", "run", "seed"]
GROUP_KEY = ["variant", "defense", "arch"]

DefenseSetup = Union[DefenseConfig, Sequence[DefenseConfig]]


# # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # #
#                                   VICTIMS                                    #
# # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # #

def _split_defenses(defense: DefenseSetup):
    stack = [defense] if isinstance(defense, DefenseConfig) else list(defense)
    stack = [d for d in stack if d.kind != "none"]
    dataset_level = [d for d in stack if d.level == "dataset"]
    training_level = [d for d in stack if d.level == "training"]
    if dataset_level and training_level:
        raise ToolkitError(
            f"Dataset-level ({', '.join(d.kind for d in dataset_level)}) and training-level "
            f"({', '.join(d.kind for d in training_level)}) defenses cannot be combined in one run",
            ErrorCode.VALIDATION)
    require(len(training_level) <= 1, "at most one training-level defense per run")
    return dataset_level, training_level


def train_victim(train_set: LabeledDataset, defense: DefenseSetup, spec: TrainSpec) -> Classifier:
    """Train a fresh victim on ``train_set`` under ``defense``.

    Dataset-level defenses run once over the training set before training
    (adaptive_random with ``refresh_per_epoch`` redraws its noise on every
    batch instead). Training-level defenses run inside the training loop.
    """
    dataset_level, training_level = _split_defenses(defense)

    transform = None
    for d in dataset_level:
        if d.kind == "adaptive_random" and d.refresh_per_epoch:
            transform = refreshed_adaptive_random(d)
        else:
            train_set = apply_dataset_defense(train_set, d)

    if training_level:
        d = training_level[0]
        if d.kind == "at":
            return adversarial_training(train_set, spec, d.at_epsilon, d.at_steps)
        return adaptive_channel_at(train_set, spec, d.q_c, d.q_s, d.at_steps)
    return train_surrogate(train_set, spec, batch_transform=transform, desc="victim")


def test_accuracy(model: Classifier, test_set: LabeledDataset, batch_size: int = 512) -> float:
    """Percentage of argmax-correct predictions; ties go to the lowest class index."""
    require(len(test_set) > 0, "test set is empty")
    require(tuple(model.input_shape) == test_set.image_shape,
            f"model expects {tuple(model.input_shape)} images, test set has {test_set.image_shape}")
    correct = 0
    for s in range(0, len(test_set), batch_size):
        pred = model.predict(test_set.images[s:s + batch_size])
        correct += int((pred == test_set.labels[s:s + batch_size]).sum())
    return 100.0 * correct / len(test_set)


# # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # #
#                                    REPORT                                    #
# # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # #

@dataclass
class EvalReport:
    cells: pd.DataFrame
    failures: List[Dict[str, Any]] = field(default_factory=list)
    configs: Dict[str, Any] = field(default_factory=dict)
    codec: Dict[str, Any] = field(default_factory=codec_info)

    @property
    def succeeded(self) -> int:
        return len(self.cells)

    def aggregate(self, by: Sequence[str] = GROUP_KEY) -> pd.DataFrame:
        """Mean and population std of accuracy per group, one entry per run."""
        if self.cells.empty:
            return pd.DataFrame(columns=[*by, "mean", "std", "n"])
        grouped = self.cells.groupby(list(by), sort=False)["accuracy"]
        out = grouped.agg(mean="mean", n="count").reset_index()
        out["std"] = grouped.std(ddof=0).to_numpy()
        return out[[*by, "mean", "std", "n"]]

    def to_document(self) -> Dict[str, Any]:
        return {
            "aggregates": self.aggregate().to_dict(orient="records"),
            "failures": self.failures,
            "configs": self.configs,
            "codec": self.codec,
        }

    def summary_table(self) -> PrettyTable:
        table = PrettyTable(["Variant", "Defense", "Arch", "Accuracy (%)", "Runs"])
        table.align["Variant"] = "l"
        table.align["Defense"] = "l"
        for row in self.aggregate().itertuples(index=False):
            table.add_row([row.variant, row.defense, row.arch, f"{row.mean:.2f} ± {row.std:.2f}", row.n])
        return table

    def plot(self, path: str) -> str:
        """Grouped bar chart: one group per variant, one bar per defense.

        Bars carry the SVG id ``bar-<variant index>-<defense index>``.
        """
        agg = self.aggregate(by=["variant", "defense"])
        variants = list(dict.fromkeys(agg["variant"]))
        defenses = list(dict.fromkeys(agg["defense"]))
        width = 0.8 / max(len(defenses), 1)

        fig = Figure(figsize=(max(4.0, 1.6 * len(variants) + 2), 4))
        ax = fig.add_subplot()
        for di, name in enumerate(defenses):
            part = agg[agg["defense"] == name].set_index("variant")
            labelled = False
            for vi, variant in enumerate(variants):
                if variant not in part.index:
                    continue
                bars = ax.bar(vi + (di - (len(defenses) - 1) / 2) * width, part.at[variant, "mean"], width,
                              yerr=part.at[variant, "std"], color=f"C{di % 10}",
                              label=None if labelled else name)
                bars.patches[0].set_gid(f"bar-{vi}-{di}")
                labelled = True
        ax.set_xticks(np.arange(len(variants)))
        ax.set_xticklabels(variants)
        ax.set_ylabel("clean test accuracy (%)")
        ax.set_ylim(0, 100)
        if defenses:
            ax.legend(fontsize="small")
        fig.tight_layout()
        # fixed salt and no date so reruns write identical files
        with matplotlib.rc_context({"svg.hashsalt": "dualshift"}):
            fig.savefig(path, format="svg", metadata={"Date": None})
        return path

    def write(self, out_dir: str) -> Dict[str, str]:
        os.makedirs(out_dir, exist_ok=True)
        paths = {
            "cells": os.path.join(out_dir, CELLS_NAME),
            "aggregate": os.path.join(out_dir, AGGREGATE_NAME),
            "chart": os.path.join(out_dir, CHART_NAME),
        }
        _commit_cells(self.cells, paths["cells"])
        with open(paths["aggregate"], "w") as f:
            json.dump(self.to_document(), f, indent=2, sort_keys=True)
        self.plot(paths["chart"])
        LOG.info(f"Report written to {out_dir}")
        return paths


def _atomic_write_csv(frame: pd.DataFrame, path: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            frame.to_csv(f, index=False, columns=CELL_COLUMNS)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except OSError as e:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise ToolkitError(f"Cannot write {path}: {e}", ErrorCode.IO_FAILED) from e


def _cell_keys(frame: pd.DataFrame) -> List[tuple]:
    return [tuple(r) for r in frame[CELL_KEY].astype({"run": int, "seed": int}).itertuples(index=False)]


def _commit_cells(frame: pd.DataFrame, path: str) -> None:
    """Write ``frame`` to the cells CSV, keeping stored rows of other cells."""
    stored = _read_cells(path)
    ours = set(_cell_keys(frame))
    others = stored.loc[np.array([k not in ours for k in _cell_keys(stored)], dtype=bool)]
    merged = frame if others.empty else pd.concat([others, frame], ignore_index=True)
    _atomic_write_csv(merged, path)


def _read_cells(path: str) -> pd.DataFrame:
    if not os.path.exists(path):
        return pd.DataFrame(columns=CELL_COLUMNS)
    frame = pd.read_csv(path, dtype={"variant": str, "defense": str, "arch": str})
    missing = set(CELL_COLUMNS) - set(frame.columns)
    if missing:
        raise ToolkitError(f"{path} is missing columns {sorted(missing)}", ErrorCode.LOAD_FAILED)
    return frame[CELL_COLUMNS]


# # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # #
#                                    MATRIX                                    #
# # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # #

def run_matrix(variants: Mapping[str, LabeledDataset], test_set: LabeledDataset,
               defenses: Sequence[DefenseConfig], spec: TrainSpec, seeds: Sequence[int],
               archs: Optional[Sequence[str]] = None, out_dir: Optional[str] = None) -> EvalReport:
    """Train and score one victim per (variant, defense, arch, seed) cell.

    With ``out_dir`` every finished cell is committed to the cells CSV right
    away and cells already present there are skipped. A failing cell is
    logged and recorded; the remaining cells still run.
    """
    require(len(variants) > 0, "no dataset variants given")
    require(len(defenses) > 0, "no defenses given")
    require(len(seeds) > 0, "no seeds given")
    archs = list(archs) if archs else [spec.arch]
    for arch in archs:
        if arch not in ARCH_MAP:
            raise ToolkitError(f"Unknown architecture: {arch} (known: {sorted(ARCH_MAP)})", ErrorCode.CONFIG_INVALID)
    labels = [d.label for d in defenses]
    require(len(set(labels)) == len(labels), f"duplicate defenses in matrix: {labels}")

    cells_path = os.path.join(out_dir, CELLS_NAME) if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    jobs = [(v, d, a, run, s) for v in variants for d in defenses for a in archs for run, s in enumerate(seeds)]
    wanted = {(v, d.label, a, run, int(s)) for v, d, a, run, s in jobs}
    # rows from earlier matrices stay in the CSV but not in this report
    stored = _read_cells(cells_path) if cells_path else pd.DataFrame(columns=CELL_COLUMNS)
    cells = stored.loc[np.array([k in wanted for k in _cell_keys(stored)], dtype=bool)].reset_index(drop=True)
    done = set(_cell_keys(cells))

    report = EvalReport(cells=cells, configs={
        "train_spec": spec.model_dump(mode="json"),
        "defenses": [d.model_dump(mode="json") for d in defenses],
        "variants": list(variants),
        "archs": archs,
        "seeds": list(seeds),
    })

    quiet = not LOG.isEnabledFor(logging.INFO)
    for variant, defense, arch, run, seed in tqdm(jobs, desc="cells", disable=quiet, leave=False):
        key = (variant, defense.label, arch, run, int(seed))
        if key in done:
            LOG.info(f"Cell {key} skipped (already in report)")
            continue

        cell_spec = spec.model_copy(update={"seed": int(seed), "arch": arch})
        cell_defense = defense.model_copy(update={"seed": defense.seed + int(seed)})
        t0 = time.monotonic()
        try:
            victim = train_victim(variants[variant], cell_defense, cell_spec)
            accuracy = test_accuracy(victim, test_set)
        except (ToolkitError, RuntimeError, ValueError) as e:
            code = e.error_code if isinstance(e, ToolkitError) else ErrorCode.UNKNOWN
            LOG.warning(f"Cell {key} failed: {code}: {e}")
            report.failures.append(dict(zip(CELL_KEY, key), error_code=code, message=str(e)))
            continue

        row = dict(zip(CELL_KEY, key), accuracy=accuracy, runtime_s=time.monotonic() - t0)
        frame = pd.DataFrame([row], columns=CELL_COLUMNS)
        report.cells = frame if report.cells.empty else pd.concat([report.cells, frame], ignore_index=True)
        done.add(key)
        if cells_path:
            _commit_cells(report.cells, cells_path)
        LOG.info(f"Cell {key}: accuracy={accuracy:.2f}% in {row['runtime_s']:.1f}s")

    LOG.info(f"Matrix finished: {report.succeeded} cells, {len(report.failures)} failed")
    return report

