"""gIoU / cIoU and the evaluation harness."""
from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from .datamodel import BinaryMask

CATEGORY_LABELS = OrderedDict([("short_phrase", "short query"), ("long_sentence", "long query")])


@dataclass(frozen=True)
class EvalRecord:
    sample_id: str
    mask_index: int
    intersection: int
    union: int
    iou: float
    kind: str = ""
    phrasing: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.iou <= 1.0:
            raise ValueError(f"iou {self.iou} outside [0, 1]")


def _bits(mask):
    return mask.bits if isinstance(mask, BinaryMask) else np.asarray(mask)


def mask_iou(pred, gt):
    """Exact pixel counts ``(intersection, union, iou)``; two empty masks score 1."""
    p, g = _bits(pred).astype(bool), _bits(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shape mismatch: {p.shape} vs {g.shape}")
    inter = int(np.count_nonzero(p & g))
    union = int(np.count_nonzero(p | g))
    return inter, union, (inter / union if union else 1.0)


def per_image_ious(records):
    """Mean iou per sample id, preserving first-seen order."""
    groups = OrderedDict()
    for r in records:
        groups.setdefault(r.sample_id, []).append(r.iou)
    return OrderedDict((k, sum(v) / len(v)) for k, v in groups.items())


def giou(records):
    records = list(records)
    if not records:
        raise ValueError("giou of an empty record list")
    vals = list(per_image_ious(records).values())
    return float(np.mean(vals))


def ciou(records):
    records = list(records)
    inter = sum(r.intersection for r in records)
    union = sum(r.union for r in records)
    if union == 0:
        raise ValueError("ciou undefined: cumulative union is zero")
    return inter / union


@dataclass
class EvalReport:
    rows: dict  # label -> {"gIoU", "cIoU", "n"}
    records: list
    text_exact: float | None = None

    def to_dict(self):
        return {"rows": self.rows, "text_exact_match": self.text_exact}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1)

    def to_table(self):
        labels = list(self.rows)
        header = f"{'':<8}" + "".join(f"{lab:>24}" for lab in labels)
        sub = f"{'':<8}" + "".join(f"{'gIoU':>12}{'cIoU':>12}" for _ in labels)
        vals = f"{'model':<8}"
        for lab in labels:
            row = self.rows[lab]
            g = "-" if row["gIoU"] is None else f"{100 * row['gIoU']:.1f}"
            c = "-" if row["cIoU"] is None else f"{100 * row['cIoU']:.1f}"
            vals += f"{g:>12}{c:>12}"
        counts = f"{'n':<8}" + "".join(f"{self.rows[lab]['n']:>24}" for lab in labels)
        return "\n".join([header, sub, vals, counts]) + "\n"

    def dump_records(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def summarize(records):
    rows = OrderedDict()
    for key, label in CATEGORY_LABELS.items():
        sub = [r for r in records if r.phrasing == key]
        rows[label] = _row(sub)
    rows["overall"] = _row(records)
    return rows


def _row(records):
    if not records:
        return {"gIoU": None, "cIoU": None, "n": 0}
    union = sum(r.union for r in records)
    return {
        "gIoU": giou(records),
        "cIoU": ciou(records) if union else None,
        "n": len({r.sample_id for r in records}),
    }


def score_sample(sample, pred_masks):
    """Pair predicted masks with ground truth in order; missing predictions count as empty."""
    out = []
    for k, gt in enumerate(sample.target_masks):
        if k < len(pred_masks):
            pred = pred_masks[k]
        else:
            pred = np.zeros_like(gt.bits)
        inter, union, iou = mask_iou(pred, gt)
        if k >= len(pred_masks):
            # a missing mask is a miss even when the target happens to be empty
            iou = 0.0 if gt.area == 0 else iou
        out.append(EvalRecord(sample.id, k, inter, union, iou, sample.kind, sample.phrasing))
    return out


def evaluate(predictor, split, max_new=None):
    """Run ``predictor.predict(image, instruction)`` on every sample and score it.

    Samples without target masks only contribute to the text exact-match rate.
    """
    from .tokenizer import normalize

    records = []
    exact = []
    for s in split:
        kwargs = {} if max_new is None else {"max_new": max_new}
        pred = predictor.predict(s.image, s.instruction, **kwargs)
        exact.append(pred.text == normalize(s.answer_text))
        records.extend(score_sample(s, pred.masks))
    return EvalReport(rows=summarize(records), records=records,
                      text_exact=float(np.mean(exact)) if exact else None)


class OraclePredictor:
    """Returns the ground truth; the upper bound of every metric."""

    def __init__(self, samples):
        self._by_key = {(s.instruction, s.image.pixels.tobytes()): s for s in samples}

    def predict(self, image, instruction, max_new=None):
        from .model import Prediction
        from .tokenizer import normalize

        s = self._by_key[(instruction, image.pixels.tobytes())]
        return Prediction(text=normalize(s.answer_text), masks=list(s.target_masks))


class RandomMaskPredictor:
    """Each pixel on with probability 0.5, one mask per ground-truth mask count requested."""

    def __init__(self, samples, seed=0):
        self._n = {(s.instruction, s.image.pixels.tobytes()): s.n_masks for s in samples}
        self.rng = np.random.default_rng(seed)

    def predict(self, image, instruction, max_new=None):
        from .model import Prediction

        n = self._n[(instruction, image.pixels.tobytes())]
        masks = [BinaryMask(self.rng.integers(0, 2, size=(image.height, image.width))) for _ in range(n)]
        return Prediction(text="", masks=masks)


def random_mask_baseline(split, trials=10_000, seed=0):
    """Monte-Carlo expected gIoU of Bernoulli(0.5) masks against the split's targets.

    Pixel membership is exchangeable, so each trial draws the intersection and
    the predicted-outside count as binomials instead of full masks.
    """
    rng = np.random.default_rng(seed)
    per_image = []
    for s in split:
        if not s.target_masks:
            continue
        ious = []
        for m in s.target_masks:
            a = m.area
            n = m.height * m.width
            inter = rng.binomial(a, 0.5, size=trials)
            outside = rng.binomial(n - a, 0.5, size=trials)
            union = a + outside
            iou = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
            ious.append(iou.mean())
        per_image.append(float(np.mean(ious)))
    if not per_image:
        raise ValueError("split has no masked samples")
    return float(np.mean(per_image))
