"""Scoring for counting, 3x3 grid localization, classification and detection."""

import re
from collections import Counter
from dataclasses import dataclass

from .errors import EmptyGroundTruth, InvalidBox, UnknownClass

TASKS = ("counting", "localization", "classification", "detection")
GRID_CELLS = frozenset(range(9))


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float
    label: str = ""

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise InvalidBox(f"box needs x1 < x2 and y1 < y2, got {self.coords}")

    @property
    def coords(self):
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self):
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def to_json(self):
        return {"bbox": list(self.coords), "label": self.label}

    @classmethod
    def from_json(cls, obj):
        if isinstance(obj, dict):
            x1, y1, x2, y2 = obj["bbox"]
            return cls(float(x1), float(y1), float(x2), float(y2), str(obj.get("label", "")))
        x1, y1, x2, y2, *rest = obj
        return cls(float(x1), float(y1), float(x2), float(y2), str(rest[0]) if rest else "")


def box_iou(a, b):
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def cells_from_boxes(boxes, image_w, image_h):
    """3x3 cells (row-major 0..8) whose interior overlaps any box with positive area."""
    cells = set()
    cw, ch = image_w / 3.0, image_h / 3.0
    for b in boxes:
        for r in range(3):
            for c in range(3):
                ox = min(b.x2, (c + 1) * cw) - max(b.x1, c * cw)
                oy = min(b.y2, (r + 1) * ch) - max(b.y1, r * ch)
                if ox > 0 and oy > 0:
                    cells.add(3 * r + c)
    return frozenset(cells)


def localization_metrics(pred, gt):
    """(hit@100, hit@50, top1) for one predicted vs ground-truth cell set."""
    pred, gt = frozenset(pred), frozenset(gt)
    if not gt:
        raise EmptyGroundTruth("ground-truth cell set is empty")
    if not (pred | gt) <= GRID_CELLS:
        raise ValueError(f"cells must lie in 0..8, got {sorted(pred | gt)}")
    inter = len(pred & gt)
    jaccard = inter / len(pred | gt)
    return pred == gt, jaccard >= 0.5, inter > 0


@dataclass
class EvalRecord:
    task: str
    image_id: str
    ground_truth: object
    prediction: object  # None when the answer text could not be parsed

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")


def counting_accuracy(records):
    if not records:
        return 0.0
    hits = sum(1 for r in records if r.prediction is not None and r.prediction == r.ground_truth)
    return hits / len(records)


def localization_accuracy(records):
    """Acc@100, Acc@50 and Top1 averaged over records."""
    if not records:
        return {"Acc@100": 0.0, "Acc@50": 0.0, "Top1": 0.0}
    totals = [0, 0, 0]
    for r in records:
        flags = localization_metrics(r.prediction or frozenset(), r.ground_truth)
        for i, f in enumerate(flags):
            totals[i] += f
    n = len(records)
    return {"Acc@100": totals[0] / n, "Acc@50": totals[1] / n, "Top1": totals[2] / n}


@dataclass
class ClassificationReport:
    per_class: dict  # label -> accuracy
    support: dict  # label -> number of ground-truth records
    aggregate: float  # micro average


def classification_accuracy(records, classes=None, class_filter=None):
    """Per-class accuracy over ground-truth labels plus the micro average.

    ``classes`` declares the label vocabulary; a ground truth outside it raises
    UnknownClass. Predictions outside it simply count as wrong.
    """
    if classes is not None:
        classes = list(classes)
        for r in records:
            if r.ground_truth not in classes:
                raise UnknownClass(f"ground-truth label {r.ground_truth!r} not in {classes}")
    if class_filter is not None:
        keep = set(class_filter)
        if classes is not None and not keep <= set(classes):
            raise UnknownClass(f"filter labels {sorted(keep - set(classes))} not declared")
        records = [r for r in records if r.ground_truth in keep]
    total = Counter(r.ground_truth for r in records)
    correct = Counter(r.ground_truth for r in records if r.prediction == r.ground_truth)
    order = classes if classes is not None else sorted(total)
    per_class = {c: correct[c] / total[c] for c in order if total[c]}
    n = sum(total.values())
    return ClassificationReport(per_class, {c: total[c] for c in order if total[c]},
                                sum(correct.values()) / n if n else 0.0)


@dataclass
class DetectionScore:
    tp: int
    fp: int
    fn: int

    @property
    def recall(self):
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def precision(self):
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def f1(self):
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def __add__(self, other):
        return DetectionScore(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def greedy_match_iou(iou, iou_threshold):
    """Greedy one-to-one matching on a precomputed IoU matrix (rows = preds).

    Pairs are taken in descending IoU order; equal IoUs are resolved by
    (pred index, gt index).
    """
    cands = sorted((-v, i, j) for i, row in enumerate(iou) for j, v in enumerate(row)
                   if v >= iou_threshold)
    used_p, used_g, pairs = set(), set(), []
    for _, i, j in cands:
        if i not in used_p and j not in used_g:
            used_p.add(i)
            used_g.add(j)
            pairs.append((i, j))
    return pairs


def greedy_matches(preds, gts, iou_threshold):
    """One-to-one (pred, gt) index pairs, taken in descending IoU order."""
    return greedy_match_iou([[box_iou(p, g) for g in gts] for p in preds], iou_threshold)


def detection_score(preds, gts, iou_threshold):
    if not 0 < iou_threshold <= 1:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    tp = len(greedy_matches(preds, gts, iou_threshold))
    return DetectionScore(tp, len(preds) - tp, len(gts) - tp)


def detection_prf(preds, gts, iou_threshold):
    """(recall, precision, f1) from greedy one-to-one matching."""
    s = detection_score(preds, gts, iou_threshold)
    return s.recall, s.precision, s.f1


# --- parsing free-text answers ---------------------------------------------

_NUM = r"[-+]?\d+(?:\.\d+)?"
_BOX_RE = re.compile(
    rf"(?:([A-Za-z][\w-]*)\s*[:=]?\s*)?\[\s*({_NUM})\s*,\s*({_NUM})\s*,\s*({_NUM})\s*,\s*({_NUM})\s*\]"
)


_NOT_LABELS = {"a", "an", "and", "are", "at", "box", "boxes", "in", "is", "or", "the"}


def parse_boxes_from_text(text, with_flag=False, classes=None):
    """Extract ``[x1, y1, x2, y2]`` boxes, each optionally preceded by a class word.

    Invalid boxes (x1 >= x2 or y1 >= y2) are dropped and set the failure flag,
    as does text with no box at all. With ``classes`` given, a preceding word
    outside that set is not taken as a label.
    """
    boxes, failed = [], False
    for m in _BOX_RE.finditer(text):
        label = m.group(1) or ""
        if label.lower() in _NOT_LABELS or (classes is not None and label not in classes):
            label = ""
        x1, y1, x2, y2 = (float(m.group(k)) for k in range(2, 6))
        try:
            boxes.append(BoundingBox(x1, y1, x2, y2, label))
        except InvalidBox:
            failed = True
    if not boxes:
        failed = True
    return (boxes, failed) if with_flag else boxes


_INT_RE = re.compile(r"[-+]?\d+")


def parse_count(text):
    m = _INT_RE.search(text)
    return int(m.group()) if m else None


def parse_cells(text):
    cells = [int(t) for t in _INT_RE.findall(text)]
    if any(c not in GRID_CELLS for c in cells):
        return None
    return frozenset(cells)


def parse_label(text, classes=None):
    words = re.findall(r"[A-Za-z][\w-]*", text)
    if classes is None:
        return words[0] if words else None
    for w in words:
        if w in classes:
            return w
    return None
