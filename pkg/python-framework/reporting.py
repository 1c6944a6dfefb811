#!/usr/bin/env python3
"""
Reporting
Prediction files, accuracy recomputation, spike-trace comparison, the
counter block and the aggregated run report.
"""

import json
import logging
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import joblib
import numpy as np
import pandas as pd
import psutil
from sklearn.metrics import accuracy_score, confusion_matrix

from ttfs_network import ForwardResult, spike_trace_frame

logger = logging.getLogger(__name__)

PREDICTION_COLUMNS = ["image", "label", "first_spike", "membrane", "no_decision"]
BACKENDS = ("ref-cont", "ref-disc", "hw")


# ============================================================================
# PREDICTIONS AND TRACES
# ============================================================================

def prediction_frame(images: Sequence[int], labels: Sequence[int],
                     first_spike: Sequence[int], membrane: Sequence[int]) -> pd.DataFrame:
    """first_spike is -1 where no output neuron spiked"""
    first = np.asarray(first_spike, dtype=np.int64)
    return pd.DataFrame({
        'image': np.asarray(images, dtype=np.int64),
        'label': np.asarray(labels, dtype=np.int64),
        'first_spike': first,
        'membrane': np.asarray(membrane, dtype=np.int64),
        'no_decision': (first < 0).astype(np.int64),
    }, columns=PREDICTION_COLUMNS)


def run_trace_frame(images: Sequence[int], results: Sequence[ForwardResult]) -> pd.DataFrame:
    """Spike traces of a run with a leading image column"""
    frames = []
    for image, result in zip(images, results):
        frame = spike_trace_frame(result)
        frame.insert(0, "image", int(image))
        frames.append(frame)
    if not frames:
        return pd.DataFrame(columns=["image", "layer", "neuron", "tick"])
    return pd.concat(frames, ignore_index=True)


def read_predictions(path: Union[str, Path]) -> pd.DataFrame:
    frame = pd.read_csv(path)
    missing = set(PREDICTION_COLUMNS) - set(frame.columns)
    if missing:
        raise ValueError(f"{path} lacks prediction columns {sorted(missing)}")
    return frame


def accuracy_block(frame: pd.DataFrame) -> Dict[str, Any]:
    """Accuracies recomputed from a prediction frame"""
    labels = frame["label"].to_numpy()
    if labels.size == 0:
        return {'images': 0}
    first = frame["first_spike"].to_numpy()
    membrane = frame["membrane"].to_numpy()
    classes = sorted(set(labels.tolist()) | set(membrane.tolist()))
    return {
        'images': int(labels.size),
        'first_spike_accuracy': float(accuracy_score(labels, first)),
        'membrane_accuracy': float(accuracy_score(labels, membrane)),
        'no_decision_count': int(frame["no_decision"].sum()),
        'membrane_confusion': {
            'labels': [int(c) for c in classes],
            'matrix': confusion_matrix(labels, membrane, labels=classes).tolist(),
        },
    }


@dataclass
class TraceDiff:
    left: str
    right: str
    only_left: int = 0
    only_right: int = 0
    rows_left: int = 0
    rows_right: int = 0
    examples: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def identical(self) -> bool:
        return self.only_left == 0 and self.only_right == 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            'left': self.left,
            'right': self.right,
            'identical': self.identical,
            'rows_left': self.rows_left,
            'rows_right': self.rows_right,
            'only_left': self.only_left,
            'only_right': self.only_right,
            'examples': self.examples,
        }


def compare_trace_frames(left: pd.DataFrame, right: pd.DataFrame,
                         left_name: str = "left", right_name: str = "right",
                         max_examples: int = 20) -> TraceDiff:
    """Row-set difference of two spike traces"""
    if list(left.columns) != list(right.columns):
        raise ValueError(f"trace columns differ: {list(left.columns)} vs {list(right.columns)}")
    merged = left.merge(right, how="outer", on=list(left.columns), indicator=True)
    diff = TraceDiff(left_name, right_name, rows_left=len(left), rows_right=len(right))
    diff.only_left = int((merged["_merge"] == "left_only").sum())
    diff.only_right = int((merged["_merge"] == "right_only").sum())
    mismatched = merged[merged["_merge"] != "both"].head(max_examples)
    for row in mismatched.to_dict(orient="records"):
        side = row.pop("_merge")
        row = {k: (v.item() if hasattr(v, "item") else v) for k, v in row.items()}
        row['side'] = left_name if side == "left_only" else right_name
        diff.examples.append(row)
    return diff


def compare_traces(left: Union[str, Path], right: Union[str, Path]) -> TraceDiff:
    return compare_trace_frames(pd.read_csv(left, float_precision="round_trip"),
                                pd.read_csv(right, float_precision="round_trip"),
                                Path(left).name, Path(right).name)


# ============================================================================
# REPORT
# ============================================================================

def per_event_block(counters: Dict[str, Any]) -> Dict[str, Any]:
    """Per-event bytes in the read/write comparison layout"""
    return {
        'spike': {'read_bytes': counters.get('per_spike_read_bytes', 0.0),
                  'write_bytes': counters.get('per_spike_write_bytes', 0.0)},
        'timestep': {'read_bytes': counters.get('per_eot_read_bytes', 0.0),
                     'write_bytes': counters.get('per_eot_write_bytes', 0.0)},
    }


def host_info() -> Dict[str, Any]:
    """Machine description for provenance"""
    return {
        'cpu_count': psutil.cpu_count(logical=True),
        'total_memory_bytes': int(psutil.virtual_memory().total),
        'platform': platform.platform(),
        'python': platform.python_version(),
    }


def artifact_hashes(paths: Sequence[Union[str, Path]]) -> Dict[str, str]:
    hashes = {}
    for path in sorted(Path(p) for p in paths):
        if path.exists():
            hashes[path.name] = joblib.hash(path.read_bytes())
    return hashes


def build_report(out_dir: Union[str, Path], config: Dict[str, Any],
                 decode: str = "membrane") -> Dict[str, Any]:
    """Aggregate every artifact present under out_dir; accuracies are recomputed from files"""
    out_dir = Path(out_dir)
    report: Dict[str, Any] = {'config': config, 'decode': decode, 'accuracy': {}}

    ann_report = out_dir / "ann_report.json"
    if ann_report.exists():
        ann = json.loads(ann_report.read_text())
        report['accuracy']['ann'] = ann.get('test_accuracy')
        report['ann'] = ann

    key = "membrane_accuracy" if decode == "membrane" else "first_spike_accuracy"
    for backend in BACKENDS:
        path = out_dir / f"predictions_{backend}.csv"
        if not path.exists():
            continue
        block = accuracy_block(read_predictions(path))
        report.setdefault('backends', {})[backend] = block
        report['accuracy'][f"snn_{backend}"] = block.get(key)

    counters_path = out_dir / "counters_hw.json"
    if counters_path.exists():
        counters = json.loads(counters_path.read_text())
        report['counters'] = counters
        report['per_event'] = per_event_block(counters)

    for name in ("conversion_report.json", "finetune_report.json", "placement_report.json"):
        path = out_dir / name
        if path.exists():
            report[name.replace("_report.json", "")] = json.loads(path.read_text())

    compare_path = out_dir / "compare.json"
    if compare_path.exists():
        report['compare'] = json.loads(compare_path.read_text())

    report['artifacts'] = artifact_hashes(p for p in out_dir.iterdir()
                                          if p.is_file() and p.name != "report.json")
    report['host'] = host_info()
    return report


def write_json(data: Dict[str, Any], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default))
    return path


def _json_default(value: Any) -> Any:
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")
