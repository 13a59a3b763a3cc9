"""Classification metrics, ROC/PR curves, Jacobi PCA and report writers."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, CurveError

Z_95 = 1.96


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray
    class_names: List[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["true\\pred"] + list(self.class_names))
            for name, row in zip(self.class_names, self.counts):
                w.writerow([name] + [int(v) for v in row])

    @classmethod
    def from_csv(cls, path) -> "ConfusionMatrix":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        names = rows[0][1:]
        counts = np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)
        return cls(counts, names)


def confusion(labels: Sequence[int], preds: Sequence[int], k: int,
              class_names: Optional[Sequence[str]] = None) -> ConfusionMatrix:
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    if labels.shape != preds.shape:
        raise ContractError(f"{labels.size} labels vs {preds.size} predictions")
    if labels.size and (min(labels.min(), preds.min()) < 0 or max(labels.max(), preds.max()) >= k):
        raise ContractError(f"class index outside [0, {k})")
    counts = np.bincount(labels * k + preds, minlength=k * k).reshape(k, k)
    names = list(class_names) if class_names is not None else [str(i) for i in range(k)]
    return ConfusionMatrix(counts.astype(np.int64), names)


def _ratio(num: float, den: float, what: str, notes: List[str]) -> float:
    if den == 0:
        msg = f"{what}: zero denominator, reported as 0"
        notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
        return 0.0
    return 100.0 * num / den


def f1_score(precision: float, sensitivity: float) -> float:
    """Harmonic mean of precision and sensitivity (same units in and out)."""
    if precision + sensitivity == 0:
        return 0.0
    return 2.0 * precision * sensitivity / (precision + sensitivity)


def confidence_interval(error_rate: float, n: int, z: float = Z_95) -> float:
    """Normal-approximation half-width z * sqrt(e (1 - e) / n)."""
    if not 0.0 <= error_rate <= 1.0:
        raise ContractError(f"error rate {error_rate} outside [0, 1]")
    if n < 1:
        raise ContractError("sample count must be >= 1")
    return z * math.sqrt(error_rate * (1.0 - error_rate) / n)


@dataclass
class ClassMetrics:
    name: str
    tp: int
    fp: int
    fn: int
    tn: int
    acc: float
    sen: float
    pre: float
    f1: float


@dataclass
class MetricsReport:
    per_class: List[ClassMetrics]
    accuracy: float
    macro_sen: float
    macro_pre: float
    macro_f1: float
    f1_ci: float
    total: int
    aucs: Dict[str, Dict[str, float]] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> None:
        payload = self.to_dict()
        payload["footer"] = ("Acc = trace/total; Sen/Pre/F1 are unweighted class means; "
                             "f1_ci = 100 * 1.96 * sqrt(e(1-e)/n) with e = 1 - macro_f1/100; "
                             "PR-AUC uses step interpolation.")
        Path(path).write_text(json.dumps(payload, indent=2), encoding="utf-8")


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """One-vs-rest counts per class, percentages, and macro averages."""
    counts = np.asarray(cm.counts, dtype=np.int64)
    total = int(counts.sum())
    if total == 0:
        raise ContractError("confusion matrix is empty")
    notes: List[str] = []
    per_class = []
    for c, name in enumerate(cm.class_names):
        tp = int(counts[c, c])
        fn = int(counts[c].sum()) - tp
        fp = int(counts[:, c].sum()) - tp
        tn = total - tp - fn - fp
        sen = _ratio(tp, tp + fn, f"{name} sensitivity", notes)
        pre = _ratio(tp, tp + fp, f"{name} precision", notes)
        per_class.append(ClassMetrics(name, tp, fp, fn, tn, 100.0 * (tp + tn) / total,
                                      sen, pre, f1_score(pre, sen)))
    acc = 100.0 * float(np.trace(counts)) / total
    macro_f1 = float(np.mean([m.f1 for m in per_class]))
    ci = 100.0 * confidence_interval(min(max(1.0 - macro_f1 / 100.0, 0.0), 1.0), total)
    return MetricsReport(per_class, acc, float(np.mean([m.sen for m in per_class])),
                         float(np.mean([m.pre for m in per_class])), macro_f1, ci, total,
                         notes=notes)


# ---------------------------------------------------------------- curves

@dataclass
class Curve:
    kind: str
    x: np.ndarray
    y: np.ndarray
    thresholds: np.ndarray

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "x", "y"])
            for t, a, b in zip(self.thresholds, self.x, self.y):
                w.writerow([repr(float(t)), repr(float(a)), repr(float(b))])


@dataclass
class RocPr:
    roc: Curve
    pr: Curve
    auc_roc: float
    auc_pr: float


def roc_pr(scores, labels, positive_class: int = 1) -> RocPr:
    """ROC and PR curves for one class versus the rest.

    ``scores`` is either an (N, K) probability matrix or an (N,) score vector
    for the positive class. Thresholds sweep the distinct scores from high to
    low; tied scores enter together.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 2:
        scores = scores[:, positive_class]
    y = np.asarray(labels) == positive_class
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise CurveError("need at least one positive and one negative sample")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    yy = y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(yy)[last].astype(np.float64)
    fp = (last + 1) - tp
    thresholds = np.r_[np.inf, s[last]]
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    recall = tpr
    precision = np.r_[1.0, tp / (tp + fp)]
    auc_roc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    auc_pr = float(np.sum(np.diff(recall) * precision[1:]))
    return RocPr(Curve("roc", fpr, tpr, thresholds), Curve("pr", recall, precision, thresholds),
                 auc_roc, auc_pr)


def macro_roc_pr(probs: np.ndarray, labels, k: Optional[int] = None) -> Dict[str, object]:
    """One-vs-rest curves for every class that has both positives and negatives."""
    probs = np.asarray(probs, dtype=np.float64)
    k = k if k is not None else probs.shape[1]
    per_class: Dict[int, RocPr] = {}
    for c in range(k):
        try:
            per_class[c] = roc_pr(probs, labels, c)
        except CurveError:
            continue
    roc_vals = [r.auc_roc for r in per_class.values()]
    pr_vals = [r.auc_pr for r in per_class.values()]
    return {"per_class": per_class,
            "macro_auc_roc": float(np.mean(roc_vals)) if roc_vals else float("nan"),
            "macro_auc_pr": float(np.mean(pr_vals)) if pr_vals else float("nan")}


# ---------------------------------------------------------------- PCA

def _round_robin(n: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Pairings of 0..n-1 such that every pair meets once across n-1 rounds."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a < n and b < n]
        rounds.append((np.array([a for a, _ in pairs], dtype=np.intp),
                       np.array([b for _, b in pairs], dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


_EPS2 = np.finfo(float).eps ** 2


def jacobi_eigh(a: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once, in round-robin order so
    that the rotations of one round touch disjoint rows and can be applied
    together. Iteration stops once the off-diagonal Frobenius norm falls to
    ``tol`` times the matrix norm. Returns eigenvalues in descending order and
    the matching eigenvectors as columns.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ContractError(f"expected a square matrix, got {a.shape}")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    scale = max(np.linalg.norm(a), np.finfo(float).tiny)
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        off = math.sqrt(max(float((a * a).sum() - (np.diag(a) ** 2).sum()), 0.0))
        if off <= tol * scale:
            break
        for p, q in rounds:
            apq = a[p, q]
            # entries below eps^2 of the norm are rounding noise; dropping them keeps theta finite
            negligible = np.abs(apq) <= _EPS2 * scale
            a[p[negligible], q[negligible]] = a[q[negligible], p[negligible]] = 0.0
            active = ~negligible
            if not active.any():
                continue
            p, q, apq = p[active], q[active], apq[active]
            theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t[theta == 0] = 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            ap, aq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            ap, aq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * ap - s[:, None] * aq
            a[q, :] = s[:, None] * ap + c[:, None] * aq
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="mergesort")
    return vals[order], v[:, order]


def _sign_fix(components: np.ndarray) -> np.ndarray:
    """Flip each row so its largest-magnitude entry is positive."""
    out = components.copy()
    for i, row in enumerate(out):
        if row[np.argmax(np.abs(row))] < 0:
            out[i] = -row
    return out


@dataclass
class PCAResult:
    coords: np.ndarray
    explained_variance: np.ndarray
    components: np.ndarray
    mean: np.ndarray
    degenerate: bool = False


def pca_project(features, n_components: int = 2, tol: float = 1e-10) -> PCAResult:
    """Project mean-centred rows onto the top principal axes."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3 or x.shape[1] < 2:
        raise ContractError(f"PCA needs an N x D matrix with N >= 3 and D >= 2, got {x.shape}")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / (x.shape[0] - 1)
    if not np.any(cov):
        warnings.warn("features have zero variance; PCA coordinates are all zero",
                      RuntimeWarning, stacklevel=2)
        comps = np.eye(x.shape[1])[:n_components]
        return PCAResult(np.zeros((x.shape[0], n_components)), np.zeros(n_components),
                         comps, mu, degenerate=True)
    vals, vecs = jacobi_eigh(cov, tol=tol)
    comps = _sign_fix(vecs[:, :n_components].T)
    return PCAResult(xc @ comps.T, np.maximum(vals[:n_components], 0.0), comps, mu)


# ---------------------------------------------------------------- SVG output

_W, _H, _M = 800, 600, 60
_COLORS = ("#d62728", "#1f77b4", "#9467bd", "#2ca02c", "#ff7f0e", "#8c564b")


def _scaler(lo, hi, a, b):
    span = (hi - lo) or 1.0
    return lambda v: a + (v - lo) / span * (b - a)


def _frame(title: str, xlabel: str, ylabel: str) -> List[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {_W} {_H}" width="{_W}" height="{_H}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<rect x="{_M}" y="{_M}" width="{_W - 2 * _M}" height="{_H - 2 * _M}" fill="none" stroke="black"/>',
        f'<text x="{_W / 2}" y="{_M / 2}" text-anchor="middle" font-size="18">{title}</text>',
        f'<text x="{_W / 2}" y="{_H - 15}" text-anchor="middle" font-size="14">{xlabel}</text>',
        f'<text x="15" y="{_H / 2}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 15 {_H / 2})">{ylabel}</text>',
    ]


def svg_lines(series: Dict[str, Tuple[np.ndarray, np.ndarray]], path, title: str = "",
              xlabel: str = "x", ylabel: str = "y", bounds=(0.0, 1.0, 0.0, 1.0)) -> None:
    x0, x1, y0, y1 = bounds
    sx = _scaler(x0, x1, _M, _W - _M)
    sy = _scaler(y0, y1, _H - _M, _M)
    parts = _frame(title, xlabel, ylabel)
    for i, (name, (xs, ys)) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{_W - _M - 150}" y="{_M + 20 + 18 * i}" fill="{color}" '
                     f'font-size="13">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts), encoding="utf-8")


def svg_scatter(points: np.ndarray, labels: Sequence[int], path, names: Sequence[str] = (),
                title: str = "", xlabel: str = "PC1", ylabel: str = "PC2") -> None:
    points = np.asarray(points, dtype=np.float64)
    x0, x1 = (points[:, 0].min(), points[:, 0].max()) if len(points) else (0.0, 1.0)
    y0, y1 = (points[:, 1].min(), points[:, 1].max()) if len(points) else (0.0, 1.0)
    sx = _scaler(x0, x1, _M + 10, _W - _M - 10)
    sy = _scaler(y0, y1, _H - _M - 10, _M + 10)
    parts = _frame(title, xlabel, ylabel)
    for (a, b), lab in zip(points, labels):
        parts.append(f'<circle cx="{sx(a):.2f}" cy="{sy(b):.2f}" r="3" '
                     f'fill="{_COLORS[int(lab) % len(_COLORS)]}" fill-opacity="0.7"/>')
    for i, name in enumerate(names):
        parts.append(f'<text x="{_M + 10}" y="{_M + 20 + 18 * i}" fill="{_COLORS[i % len(_COLORS)]}" '
                     f'font-size="13">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts), encoding="utf-8")


# ---------------------------------------------------------------- report bundle

def write_reports(out_dir, labels, probs, class_names: Sequence[str],
                  svg: bool = True) -> MetricsReport:
    """Emit confusion.csv, metrics.json and per-class roc/pr CSVs (and SVGs)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = np.asarray(labels, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    k = len(class_names)
    cm = confusion(labels, probs.argmax(axis=1), k, class_names)
    cm.to_csv(out / "confusion.csv")
    report = metrics(cm)
    curves = macro_roc_pr(probs, labels, k)
    for c, res in curves["per_class"].items():
        name = class_names[c]
        res.roc.to_csv(out / f"roc_{name}.csv")
        res.pr.to_csv(out / f"pr_{name}.csv")
        report.aucs[name] = {"roc": res.auc_roc, "pr": res.auc_pr}
        if svg:
            svg_lines({name: (res.roc.x, res.roc.y)}, out / f"roc_{name}.svg",
                      f"ROC {name}", "false positive rate", "true positive rate")
            svg_lines({name: (res.pr.x, res.pr.y)}, out / f"pr_{name}.svg",
                      f"PR {name}", "recall", "precision")
    report.aucs["macro"] = {"roc": curves["macro_auc_roc"], "pr": curves["macro_auc_pr"]}
    report.write_json(out / "metrics.json")
    return report


def write_pca(out_dir, features, labels, class_names: Sequence[str], svg: bool = True) -> PCAResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = pca_project(features)
    with open(out / "pca.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["pc1", "pc2", "label"])
        for (a, b), lab in zip(res.coords, labels):
            w.writerow([repr(float(a)), repr(float(b)), int(lab)])
    if svg:
        svg_scatter(res.coords, labels, out / "pca.svg", class_names, "PCA of penultimate features")
    return res
