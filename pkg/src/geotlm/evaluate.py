"""Score line-delimited evaluation records and lay results out as tables."""

import json
import os

from .errors import MissingFile, ParseError
from .metrics import (
    TASKS,
    BoundingBox,
    DetectionScore,
    EvalRecord,
    classification_accuracy,
    counting_accuracy,
    detection_score,
    localization_accuracy,
    parse_boxes_from_text,
    parse_cells,
    parse_count,
    parse_label,
)

DETECTION_THRESHOLDS = (0.25, 0.50, 0.75)


def _ground_truth(task, value):
    if task == "counting":
        if isinstance(value, bool) or int(value) != value:
            raise ValueError("counting ground truth must be an integer")
        return int(value)
    if task == "localization":
        cells = frozenset(int(c) for c in value)
        if not cells or not cells <= frozenset(range(9)):
            raise ValueError("localization ground truth must be a non-empty subset of 0..8")
        return cells
    if task == "classification":
        return str(value)
    return [BoundingBox.from_json(b) for b in value]


def _prediction(task, obj, classes):
    if "prediction" in obj:
        value = obj["prediction"]
        if value is None:
            return None
        if task == "counting":
            return int(value)
        if task == "localization":
            return frozenset(int(c) for c in value)
        if task == "classification":
            return str(value)
        return [BoundingBox.from_json(b) for b in value]
    text = obj.get("prediction_text")
    if text is None:
        raise ValueError("record needs 'prediction' or 'prediction_text'")
    if task == "counting":
        return parse_count(text)
    if task == "localization":
        return parse_cells(text)
    if task == "classification":
        return parse_label(text, classes)
    return parse_boxes_from_text(text, classes=classes)


def load_eval_records(path, task, classes=None):
    """Records of ``task`` from a JSONL file; invalid lines are reported together."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if not os.path.exists(path):
        raise MissingFile(f"records file {path} does not exist")
    records, problems = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if obj.get("task") != task:
                    continue
                records.append(EvalRecord(task, str(obj.get("image_id", "")),
                                          _ground_truth(task, obj["ground_truth"]),
                                          _prediction(task, obj, classes)))
            except (ValueError, KeyError, TypeError) as exc:
                problems.append((lineno, f"{type(exc).__name__}: {exc}"))
    if problems:
        raise ParseError(problems)
    return records


def score(records, task, iou=None, classes=None):
    """Metric dict for one task; fractions in [0, 1]."""
    if task == "counting":
        return {"@Acc": counting_accuracy(records)}
    if task == "localization":
        return localization_accuracy(records)
    if task == "classification":
        rep = classification_accuracy(records, classes=classes)
        return {"aggregate": rep.aggregate, "per_class": rep.per_class, "support": rep.support}
    thresholds = (iou,) if iou is not None else DETECTION_THRESHOLDS
    labels = sorted({b.label for r in records for b in r.ground_truth})
    out = {}
    for t in thresholds:
        table = {}
        for name in ["All", *labels]:
            total = DetectionScore(0, 0, 0)
            for r in records:
                preds = r.prediction or []
                gts = r.ground_truth
                if name != "All":
                    preds = [b for b in preds if b.label == name]
                    gts = [b for b in gts if b.label == name]
                total = total + detection_score(preds, gts, t)
            table[name] = {"R": total.recall, "P": total.precision, "F1": total.f1,
                           "TP": total.tp, "FP": total.fp, "FN": total.fn}
        out[f"IoU={t:.2f}"] = table
    return out


def _pct(x):
    return f"{100.0 * x:6.2f}"


def format_report(task, metrics, n_records):
    lines = [f"task: {task}   records: {n_records}"]
    if task == "counting":
        lines += ["@Acc", _pct(metrics["@Acc"])]
    elif task == "localization":
        lines += ["@Acc100  @Acc50    Top1",
                  "  ".join(_pct(metrics[k]) for k in ("Acc@100", "Acc@50", "Top1"))]
    elif task == "classification":
        width = max([len("aggregate")] + [len(c) for c in metrics["per_class"]])
        for c, v in metrics["per_class"].items():
            lines.append(f"{c:<{width}}  {_pct(v)}  (n={metrics['support'][c]})")
        lines.append(f"{'aggregate':<{width}}  {_pct(metrics['aggregate'])}")
    else:
        for thr, table in metrics.items():
            lines.append(thr)
            lines.append(f"  {'class':<10}     R     P    F1")
            for name, m in table.items():
                lines.append(f"  {name:<10}" + "".join(_pct(m[k]) for k in ("R", "P", "F1")))
    return "\n".join(lines) + "\n"


def report_json(task, metrics, n_records):
    return json.dumps({"task": task, "records": n_records, "metrics": metrics},
                      indent=2, sort_keys=True) + "\n"
