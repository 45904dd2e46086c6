"""Count metrics and the per-category report.

"MSE" here is the root of the mean squared count error, the quantity
crowd-counting tables conventionally report under that name.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .annotations import CATEGORY_ORDER, Category, categorize, dumps_dataset
from .model import ModelState, infer_count

EMPTY = "—"


@dataclass(frozen=True)
class BucketStats:
    n: int
    mae: float | None
    mse: float | None


def mae_mse(gt, pred) -> tuple[float | None, float | None]:
    """(MAE, root-mean-square error); (None, None) for an empty bucket."""
    gt = np.asarray(gt, dtype=np.float64).ravel()
    pred = np.asarray(pred, dtype=np.float64).ravel()
    if gt.shape != pred.shape:
        raise ValueError(f"gt has {gt.size} counts, pred has {pred.size}")
    if gt.size == 0:
        return None, None
    err = np.abs(gt - pred)
    return float(err.mean()), float(math.sqrt(float(np.mean(err * err))))


@dataclass
class EvalReport:
    buckets: dict  # Category -> BucketStats
    errors: list = field(default_factory=list)  # (record id, message)
    metadata: dict = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return not self.errors

    def __getitem__(self, cat) -> BucketStats:
        return self.buckets[Category(cat)]

    def to_dict(self) -> dict:
        return {
            "buckets": {c.value: {"n": s.n, "mae": s.mae, "mse": s.mse} for c, s in self.buckets.items()},
            "errors": [list(e) for e in self.errors],
            "complete": self.complete,
            "metadata": dict(self.metadata),
        }


def corpus_digest(records) -> str:
    ordered = sorted(records, key=lambda r: r.id)
    return hashlib.sha256(dumps_dataset(ordered).encode("utf-8")).hexdigest()


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch else int(time.time())
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def build_report(gt_pred: dict, records, errors=(), metadata=None, distractors_in_low=False) -> EvalReport:
    """Aggregate per-image (gt, pred) pairs keyed by record id into buckets."""
    by_cat: dict[Category, list] = {c: [] for c in CATEGORY_ORDER}
    for rec in sorted(records, key=lambda r: r.id):
        if rec.id not in gt_pred:
            continue
        for cat in categorize(rec, distractors_in_low):
            by_cat[cat].append(gt_pred[rec.id])
    buckets = {}
    for cat in CATEGORY_ORDER:
        pairs = by_cat[cat]
        mae, mse = mae_mse([p[0] for p in pairs], [p[1] for p in pairs])
        buckets[cat] = BucketStats(len(pairs), mae, mse)
    return EvalReport(buckets, sorted(errors), dict(metadata or {}))


def evaluate(predictor, records, load_image, distractors_in_low: bool = False) -> EvalReport:
    """Evaluate ``predictor`` over ``records``.

    ``predictor`` is a ModelState (counts via :func:`infer_count`) or any
    callable mapping an image array to a count. ``load_image(record)`` returns
    the image; failures are collected per record and evaluation continues.
    Buckets come from ground-truth counts.
    """
    if isinstance(predictor, ModelState):
        state = predictor
        predict = lambda img: infer_count(state, img)[0]  # noqa: E731
        model_digest = state.digest()
    else:
        predict = predictor
        model_digest = getattr(predictor, "__name__", "callable")
    records = list(records)
    gt_pred, errors = {}, []
    for rec in sorted(records, key=lambda r: r.id):
        try:
            image = load_image(rec)
        except (OSError, ValueError) as exc:
            errors.append((rec.id, f"{type(exc).__name__}: {exc}"))
            continue
        gt_pred[rec.id] = (float(rec.count), float(predict(image)))
    meta = {"model_digest": model_digest, "corpus_digest": corpus_digest(records), "timestamp": _timestamp()}
    return build_report(gt_pred, records, errors, meta, distractors_in_low)


def _fmt(v) -> str:
    return EMPTY if v is None else f"{v:.2f}"


def emit_report(report: EvalReport, fmt: str = "text", label: str = "model") -> str:
    if fmt == "text":
        return _text_table(report, label)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["category", "n", "mae", "mse"])
        for cat in CATEGORY_ORDER:
            s = report.buckets[cat]
            w.writerow([cat.value, s.n, EMPTY if s.mae is None else repr(s.mae), EMPTY if s.mse is None else repr(s.mse)])
        return buf.getvalue()
    if fmt in ("json", "json-like", "structured"):
        return json.dumps(report.to_dict(), indent=2, ensure_ascii=False, sort_keys=True) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def parse_csv_report(text: str) -> dict:
    out = {}
    for row in csv.DictReader(io.StringIO(text)):
        conv = lambda v: None if v == EMPTY else float(v)  # noqa: E731
        out[row["category"]] = BucketStats(int(row["n"]), conv(row["mae"]), conv(row["mse"]))
    return out


def _text_table(report: EvalReport, label: str) -> str:
    group_w = 17
    label_w = max(len(label), len("Method"), 6) + 2
    head1 = "Method".ljust(label_w) + "".join(c.value.center(group_w) for c in CATEGORY_ORDER)
    head2 = "".ljust(label_w) + "".join(("MAE".rjust(8) + "MSE".rjust(9)) for _ in CATEGORY_ORDER)
    vals = "".join(_fmt(report.buckets[c].mae).rjust(8) + _fmt(report.buckets[c].mse).rjust(9) for c in CATEGORY_ORDER)
    ns = "".join(f"n={report.buckets[c].n}".center(group_w) for c in CATEGORY_ORDER)
    lines = [head1, head2, "-" * len(head1), label.ljust(label_w) + vals, "".ljust(label_w) + ns]
    if report.errors:
        lines.append(f"INCOMPLETE: {len(report.errors)} image(s) failed")
        lines += [f"  {rid}: {msg}" for rid, msg in report.errors]
    return "\n".join(lines) + "\n"
