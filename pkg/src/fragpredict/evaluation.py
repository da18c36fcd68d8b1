"""Classification reports and ROC/AUC, plus text/CSV/SVG/JSON rendering.

All metric arithmetic stays unrounded; two-decimal half-up rounding is
applied only when a table or legend is rendered.  The trapezoidal AUC is
checked elsewhere against an exhaustive pairwise-comparison oracle, whose
tie convention (0.5 per tied pair) matches the grouped-threshold sweep
used here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .errors import EmptyInputError, UndefinedRocError

CLASS_NAMES = ("Unfragmented", "Fragmented")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_labels(cls, labels, predictions, positive: int = 1) -> "ConfusionCounts":
        labels = np.asarray(labels)
        predictions = np.asarray(predictions)
        pos_l, pos_p = labels == positive, predictions == positive
        return cls(
            tp=int(np.sum(pos_l & pos_p)),
            fp=int(np.sum(~pos_l & pos_p)),
            tn=int(np.sum(~pos_l & ~pos_p)),
            fn=int(np.sum(pos_l & ~pos_p)),
        )


@dataclass(frozen=True)
class ClassificationReport:
    class_names: tuple[str, str]
    precision: tuple[float, float]
    recall: tuple[float, float]
    f1: tuple[float, float]
    support: tuple[int, int]
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    zero_support_classes: tuple[str, ...] = ()

    @property
    def total_support(self) -> int:
        return sum(self.support)


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def classification_report(
    labels, predictions, class_names: tuple[str, str] = CLASS_NAMES
) -> ClassificationReport:
    """Per-class precision/recall/F1/support with macro and weighted averages.

    Labels and predictions are 0/1 sequences where index i of
    `class_names` names class i.  Zero-support classes report 0.0 and are
    flagged in `zero_support_classes`.
    """
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.size == 0:
        raise EmptyInputError("empty label/prediction sequences")
    if labels.shape != predictions.shape:
        raise EmptyInputError(
            f"labels length {labels.size} != predictions length {predictions.size}"
        )

    per_class = []
    supports = []
    zero_support = []
    for cls in (0, 1):
        tp = int(np.sum((labels == cls) & (predictions == cls)))
        fp = int(np.sum((labels != cls) & (predictions == cls)))
        fn = int(np.sum((labels == cls) & (predictions != cls)))
        support = int(np.sum(labels == cls))
        if support == 0:
            zero_support.append(class_names[cls])
        per_class.append(_prf(tp, fp, fn))
        supports.append(support)

    (p0, r0, f0), (p1, r1, f1) = per_class
    n = labels.size
    w0, w1 = supports[0] / n, supports[1] / n
    return ClassificationReport(
        class_names=class_names,
        precision=(p0, p1),
        recall=(r0, r1),
        f1=(f0, f1),
        support=(supports[0], supports[1]),
        accuracy=float(np.mean(labels == predictions)),
        macro_precision=(p0 + p1) / 2,
        macro_recall=(r0 + r1) / 2,
        macro_f1=(f0 + f1) / 2,
        weighted_precision=w0 * p0 + w1 * p1,
        weighted_recall=w0 * r0 + w1 * r1,
        weighted_f1=w0 * f0 + w1 * f1,
        zero_support_classes=tuple(zero_support),
    )


@dataclass(frozen=True)
class RocCurve:
    """Ordered (fpr, tpr) points from (0,0) to (1,1) with swept thresholds."""

    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # thresholds[0] is +inf (no positive predictions)
    auc: float


def roc_curve(labels, scores) -> RocCurve:
    """Threshold sweep over distinct scores, descending; ties move together."""
    labels = np.asarray(labels, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise UndefinedRocError(
            f"ROC undefined: {n_pos} positive and {n_neg} negative labels"
        )

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]

    cum_tp = np.cumsum(sorted_labels == 1)
    cum_fp = np.cumsum(sorted_labels == 0)
    # Last index of each tied group = the point where that threshold applies.
    distinct = np.nonzero(np.diff(sorted_scores, append=-np.inf))[0]

    fpr = np.concatenate([[0.0], cum_fp[distinct] / n_neg])
    tpr = np.concatenate([[0.0], cum_tp[distinct] / n_pos])
    thresholds = np.concatenate([[np.inf], sorted_scores[distinct]])
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds, auc=auc)


def auc_oracle(labels, scores) -> float:
    """Exhaustive pairwise AUC: correctly ordered (pos, neg) pairs, ties 0.5."""
    labels = np.asarray(labels, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    if not pos or not neg:
        raise UndefinedRocError(
            f"AUC undefined: {len(pos)} positive and {len(neg)} negative labels"
        )
    wins = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                wins += 1.0
            elif sp == sn:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def micro_average_roc(labels, scores) -> RocCurve:
    """Pool both one-vs-rest problems (positive and negative class) into one ROC."""
    labels = np.asarray(labels, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    pooled_labels = np.concatenate([labels == 1, labels == 0]).astype(np.int64)
    pooled_scores = np.concatenate([scores, 1.0 - scores])
    return roc_curve(pooled_labels, pooled_scores)


# ---------------------------------------------------------------------------
# Rendering.  Numbers are rounded (2 decimals, half-up) here and only here.
# ---------------------------------------------------------------------------


def _round2(x: float) -> str:
    return str(Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def render_report(report: ClassificationReport) -> str:
    """Fixed-column text table: Class, Precision, Recall, F1-Score, Support."""
    name_w = max(len("Weighted Avg"), *(len(n) for n in report.class_names))
    header = f"{'Class':<{name_w}}  {'Precision':>9}  {'Recall':>6}  {'F1-Score':>8}  {'Support':>7}"
    lines = [header, "-" * len(header)]
    for i, name in enumerate(report.class_names):
        lines.append(
            f"{name:<{name_w}}  {_round2(report.precision[i]):>9}  "
            f"{_round2(report.recall[i]):>6}  {_round2(report.f1[i]):>8}  "
            f"{report.support[i]:>7}"
        )
    lines.append("")
    lines.append(
        f"{'Accuracy':<{name_w}}  {'':>9}  {'':>6}  {_round2(report.accuracy):>8}  "
        f"{report.total_support:>7}"
    )
    lines.append(
        f"{'Macro Avg':<{name_w}}  {_round2(report.macro_precision):>9}  "
        f"{_round2(report.macro_recall):>6}  {_round2(report.macro_f1):>8}  "
        f"{report.total_support:>7}"
    )
    lines.append(
        f"{'Weighted Avg':<{name_w}}  {_round2(report.weighted_precision):>9}  "
        f"{_round2(report.weighted_recall):>6}  {_round2(report.weighted_f1):>8}  "
        f"{report.total_support:>7}"
    )
    if report.zero_support_classes:
        lines.append("")
        lines.append(
            "warning: zero support for " + ", ".join(report.zero_support_classes)
        )
    return "\n".join(lines) + "\n"


def report_to_csv(report: ClassificationReport) -> str:
    """Unrounded CSV export of every report field."""
    rows = ["row,precision,recall,f1_score,support"]
    for i, name in enumerate(report.class_names):
        rows.append(
            f"{name},{report.precision[i]!r},{report.recall[i]!r},"
            f"{report.f1[i]!r},{report.support[i]}"
        )
    rows.append(f"Accuracy,,,{report.accuracy!r},{report.total_support}")
    rows.append(
        f"Macro Avg,{report.macro_precision!r},{report.macro_recall!r},"
        f"{report.macro_f1!r},{report.total_support}"
    )
    rows.append(
        f"Weighted Avg,{report.weighted_precision!r},{report.weighted_recall!r},"
        f"{report.weighted_f1!r},{report.total_support}"
    )
    return "\n".join(rows) + "\n"


_SVG_W, _SVG_H = 480, 400
_MARGIN = {"left": 62, "right": 24, "top": 24, "bottom": 52}
_CURVE_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b")


def _sx(fpr: float) -> float:
    inner = _SVG_W - _MARGIN["left"] - _MARGIN["right"]
    return _MARGIN["left"] + fpr * inner


def _sy(tpr: float) -> float:
    inner = _SVG_H - _MARGIN["top"] - _MARGIN["bottom"]
    return _SVG_H - _MARGIN["bottom"] - tpr * inner


def render_roc(curves: list[tuple[str, RocCurve]], title: str = "ROC Curves") -> str:
    """SVG 1.1 document: unit axes, chance diagonal, one path per curve, legend."""
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{_SVG_W}" height="{_SVG_H}" viewBox="0 0 {_SVG_W} {_SVG_H}">',
        f'<rect width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
        f'<text x="{_SVG_W / 2}" y="16" text-anchor="middle" font-size="13" '
        f'font-family="sans-serif">{title}</text>',
    ]
    # axes with ticks every 0.2
    x0, y0, x1, y1 = _sx(0.0), _sy(0.0), _sx(1.0), _sy(1.0)
    parts.append(
        f'<g class="axis" stroke="black" fill="none">'
        f'<path d="M {x0} {y1} L {x0} {y0} L {x1} {y0}"/></g>'
    )
    for i in range(6):
        t = i / 5
        parts.append(
            f'<line class="tick" x1="{_sx(t)}" y1="{y0}" x2="{_sx(t)}" y2="{y0 + 5}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{_sx(t)}" y="{y0 + 18}" text-anchor="middle" font-size="11" '
            f'font-family="sans-serif">{t:.1f}</text>'
        )
        parts.append(
            f'<line class="tick" x1="{x0 - 5}" y1="{_sy(t)}" x2="{x0}" y2="{_sy(t)}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{x0 - 8}" y="{_sy(t) + 4}" text-anchor="end" font-size="11" '
            f'font-family="sans-serif">{t:.1f}</text>'
        )
    parts.append(
        f'<text x="{(x0 + x1) / 2}" y="{_SVG_H - 12}" text-anchor="middle" font-size="12" '
        f'font-family="sans-serif">False Positive Rate</text>'
    )
    parts.append(
        f'<text x="16" y="{(y0 + y1) / 2}" text-anchor="middle" font-size="12" '
        f'font-family="sans-serif" transform="rotate(-90 16 {(y0 + y1) / 2})">'
        f"True Positive Rate</text>"
    )
    parts.append(
        f'<line class="chance-line" x1="{x0}" y1="{y0}" x2="{x1}" y2="{y1}" '
        f'stroke="gray" stroke-dasharray="5,4"/>'
    )
    for i, (name, curve) in enumerate(curves):
        color = _CURVE_COLORS[i % len(_CURVE_COLORS)]
        coords = " L ".join(
            f"{_sx(f):.2f} {_sy(t):.2f}" for f, t in zip(curve.fpr, curve.tpr)
        )
        parts.append(
            f'<path class="roc-curve" d="M {coords}" fill="none" '
            f'stroke="{color}" stroke-width="1.8"/>'
        )
        ly = _MARGIN["top"] + 14 + 16 * i
        lx = _sx(0.52)
        parts.append(
            f'<g class="legend-entry">'
            f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 22}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="1.8"/>'
            f'<text x="{lx + 28}" y="{ly}" font-size="11" font-family="sans-serif">'
            f"{name} (AUC = {_round2(curve.auc)})</text></g>"
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def curves_to_json(curves: list[tuple[str, RocCurve]]) -> str:
    """JSON export; the +inf lead threshold serializes as null."""
    payload = {}
    for name, curve in curves.items() if isinstance(curves, dict) else curves:
        payload[name] = {
            "fpr": [float(v) for v in curve.fpr],
            "tpr": [float(v) for v in curve.tpr],
            "thresholds": [None if np.isinf(v) else float(v) for v in curve.thresholds],
            "auc": float(curve.auc),
        }
    return json.dumps(payload, indent=2) + "\n"
