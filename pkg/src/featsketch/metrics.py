"""Evaluation harness over directories of predicted and reference sketches.

Metric adapters come in two flavours. Paired adapters score one image pair
at a time and are averaged; set adapters (``paired = False``) score the two
file lists as distributions. Real LPIPS/FID implementations plug in as
external executables or importable factories.
"""

from __future__ import annotations

import csv
import json
import shlex
import shutil
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

from .data import IMAGE_SUFFIXES, load_image
from .errors import AdapterError, DataError


class MeanAbsoluteDifference:
    paired = True

    def __call__(self, pred, gt):
        return float((pred - gt).abs().mean())


class ExternalMetric:
    """Runs ``command PRED_DIR GT_DIR`` and parses the last stdout line as a float."""

    paired = False

    def __init__(self, command):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)

    def __call__(self, pred_paths, gt_paths):
        if shutil.which(self.command[0]) is None:
            raise AdapterError(f"metric executable {self.command[0]!r} not found")
        pred_dir, gt_dir = pred_paths[0].parent, gt_paths[0].parent
        try:
            out = subprocess.run([*self.command, str(pred_dir), str(gt_dir)], capture_output=True, text=True, check=True)
            return float(out.stdout.strip().splitlines()[-1])
        except (subprocess.CalledProcessError, ValueError, IndexError) as exc:
            raise AdapterError(f"metric command {self.command} failed: {exc}") from exc


def load_metric(spec):
    if spec in ("stub", "l1"):
        return MeanAbsoluteDifference()
    if spec.startswith("exec:"):
        return ExternalMetric(spec[len("exec:"):])
    from .adapters import import_object

    return import_object(spec)()


@dataclass
class Report:
    per_pair: dict = field(default_factory=dict)
    aggregate: dict = field(default_factory=dict)
    unavailable: dict = field(default_factory=dict)

    def write(self, path):
        """CSV table (one row per pair plus an ``aggregate`` row) and a JSON twin."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        metrics = list(self.aggregate) + [m for m in self.unavailable if m not in self.aggregate]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["pair", *metrics])
            for stem, scores in self.per_pair.items():
                writer.writerow([stem, *(_fmt(scores.get(m)) for m in metrics)])
            writer.writerow(["aggregate", *(_fmt(self.aggregate.get(m)) for m in metrics)])
        path.with_suffix(".json").write_text(
            json.dumps({"per_pair": self.per_pair, "aggregate": self.aggregate, "unavailable": self.unavailable}, indent=1)
        )
        return path


def _fmt(v):
    return "unavailable" if v is None else repr(v)


def _listing(folder):
    folder = Path(folder)
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def eval_metrics(pred_dir, gt_dir, adapters, out=None):
    """Score predictions against references with every adapter in ``adapters`` (name to adapter, or ``None``)."""
    preds, gts = _listing(pred_dir), _listing(gt_dir)
    if set(preds) != set(gts):
        only_pred = sorted(set(preds) - set(gts))
        only_gt = sorted(set(gts) - set(preds))
        raise DataError(f"file sets differ: only in predictions {only_pred}, only in references {only_gt}",
                        [*only_pred, *only_gt])
    stems = sorted(preds)
    report = Report(per_pair={s: {} for s in stems})
    images = None
    for name, adapter in adapters.items():
        if adapter is None:
            report.unavailable[name] = "adapter not configured"
            continue
        try:
            if getattr(adapter, "paired", True):
                if images is None:
                    images = {s: (load_image(preds[s]), load_image(gts[s])) for s in stems}
                scores = [adapter(*images[s]) for s in stems]
                for s, v in zip(stems, scores):
                    report.per_pair[s][name] = v
                report.aggregate[name] = sum(scores) / len(scores) if scores else None
            else:
                report.aggregate[name] = adapter([preds[s] for s in stems], [gts[s] for s in stems])
        except AdapterError as exc:
            report.unavailable[name] = str(exc)
            report.aggregate.pop(name, None)
    if out is not None:
        report.write(out)
    return report
