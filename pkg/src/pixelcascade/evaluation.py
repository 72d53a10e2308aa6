"""Evaluation protocols: MaxF/MAE, NMS thinning, ODS/OIS matching, PR curves.

Conventions chosen here (and flagged in reports where relevant): F-measure
beta^2 is 0.3 for saliency and 1.0 for boundaries; 255 thresholds for MaxF,
99 for ODS/OIS; the matching radius defaults to 0.0075 of the image
diagonal; saliency MaxF defaults to the per-image-mean aggregation with the
dataset-pooled variant available.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine

SALIENCY_BETA2 = 0.3
BOUNDARY_BETA2 = 1.0
DEFAULT_SCALES = (0.5, 1.0, 1.5, 2.0)


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float


@dataclass(frozen=True)
class MatchTolerance:
    max_dist: float = 0.0075  # fraction of the image diagonal

    def __post_init__(self):
        if not 0 < self.max_dist < 1:
            raise ValueError("max_dist must lie in (0, 1)")

    def radius(self, shape) -> float:
        h, w = shape[-2], shape[-1]
        return self.max_dist * float(np.hypot(h, w))


@dataclass
class EvalReport:
    max_f: float | None = None
    mae: float | None = None
    ods: float | None = None
    ois: float | None = None
    curve: list = field(default_factory=list)
    max_f_mode: str | None = None


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {gt.shape}")
    return pred, gt


def mae(pred, gt) -> float:
    """Mean absolute error between a probability map and its target."""
    pred, gt = _check_pair(pred, gt)
    return float(np.abs(pred - gt).mean())


def f_measure(precision, recall, beta2) -> float:
    den = beta2 * precision + recall
    if den == 0:
        return 0.0
    return (1.0 + beta2) * precision * recall / den


def _prf(tp, fp, fn, beta2):
    precision = tp / (tp + fp) if tp + fp > 0 else 1.0
    recall = tp / (tp + fn) if tp + fn > 0 else 1.0
    return precision, recall, f_measure(precision, recall, beta2)


def _uniform_thresholds(n):
    if n < 1:
        raise ValueError("n_thresholds must be at least 1")
    return (np.arange(n) + 0.5) / n


def _count_at(pred, gt, cut):
    hit = pred >= cut
    pos = gt > 0.5
    tp = int(np.count_nonzero(hit & pos))
    fp = int(np.count_nonzero(hit & ~pos))
    fn = int(np.count_nonzero(~hit & pos))
    return tp, fp, fn


def pr_curve_region(preds, gts, n_thresholds, beta2=SALIENCY_BETA2,
                    threshold_mode="uniform"):
    """Dataset-pooled PR curve over evenly spaced thresholds.

    Returns (points, max_f). ``threshold_mode="quantile"`` cuts at score
    quantiles of the pooled predictions instead of fixed levels, which makes
    max_f invariant under strictly monotone rescaling of the scores; the
    recorded threshold is then the quantile level.
    """
    if len(preds) == 0 or len(preds) != len(gts):
        raise ValueError("need matching nonempty prediction/target lists")
    pairs = [_check_pair(p, g) for p, g in zip(preds, gts)]
    levels = _uniform_thresholds(n_thresholds)
    if threshold_mode == "uniform":
        cuts = levels
    elif threshold_mode == "quantile":
        pooled = np.concatenate([p.ravel() for p, _ in pairs])
        cuts = np.quantile(pooled, levels, method="lower")
    else:
        raise ValueError(f"unknown threshold mode {threshold_mode!r}")
    points = []
    best = 0.0
    for level, cut in zip(levels, cuts):
        tp = fp = fn = 0
        for p, g in pairs:
            a, b, c = _count_at(p, g, cut)
            tp += a
            fp += b
            fn += c
        precision, recall, f = _prf(tp, fp, fn, beta2)
        points.append(PRPoint(float(level), precision, recall))
        best = max(best, f)
    return points, best


def pr_curve_per_image_mean(preds, gts, n_thresholds, beta2=SALIENCY_BETA2):
    """Per-image-mean PR curve: average precision and recall per threshold."""
    if len(preds) == 0 or len(preds) != len(gts):
        raise ValueError("need matching nonempty prediction/target lists")
    pairs = [_check_pair(p, g) for p, g in zip(preds, gts)]
    levels = _uniform_thresholds(n_thresholds)
    points = []
    best = 0.0
    for level in levels:
        ps = []
        rs = []
        for p, g in pairs:
            tp, fp, fn = _count_at(p, g, level)
            precision, recall, _ = _prf(tp, fp, fn, beta2)
            ps.append(precision)
            rs.append(recall)
        precision = float(np.mean(ps))
        recall = float(np.mean(rs))
        points.append(PRPoint(float(level), precision, recall))
        best = max(best, f_measure(precision, recall, beta2))
    return points, best


# Non-maximal suppression and thinning -----------------------------------------


def _sobel(p):
    padded = np.pad(p, 1, mode="edge")
    s = padded
    gx = (s[:-2, 2:] + 2 * s[1:-1, 2:] + s[2:, 2:]
          - s[:-2, :-2] - 2 * s[1:-1, :-2] - s[2:, :-2])
    gy = (s[2:, :-2] + 2 * s[2:, 1:-1] + s[2:, 2:]
          - s[:-2, :-2] - 2 * s[:-2, 1:-1] - s[:-2, 2:])
    return gx, gy


_DIR_OFFSETS = {
    0: ((0, 1), (0, -1)),      # gradient east-west
    1: ((1, 1), (-1, -1)),     # gradient ne-sw diagonal
    2: ((1, 0), (-1, 0)),      # gradient north-south
    3: ((1, -1), (-1, 1)),     # gradient nw-se diagonal
}


def _shifted(p, dy, dx):
    out = np.zeros_like(p)
    h, w = p.shape
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    yd = slice(max(-dy, 0), h + min(-dy, 0))
    xd = slice(max(-dx, 0), w + min(-dx, 0))
    out[yd, xd] = p[ys, xs]
    return out


def _neighbour_counts(mask):
    acc = np.zeros(mask.shape, dtype=int)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy or dx:
                acc += _shifted(mask.astype(int), dy, dx)
    return acc


def _zhang_suen(mask):
    mask = mask.copy()
    offs = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]
    while True:
        changed = False
        for phase in (0, 1):
            n = [_shifted(mask.astype(int), dy, dx) for dy, dx in offs]
            b = sum(n)
            ring = n + [n[0]]
            a = sum(((ring[i] == 0) & (ring[i + 1] == 1)).astype(int)
                    for i in range(8))
            p2, p4, p6, p8 = n[0], n[2], n[4], n[6]
            if phase == 0:
                c1 = p2 * p4 * p6 == 0
                c2 = p4 * p6 * p8 == 0
            else:
                c1 = p2 * p4 * p8 == 0
                c2 = p2 * p6 * p8 == 0
            remove = mask & (b >= 2) & (b <= 6) & (a == 1) & c1 & c2
            if np.any(remove):
                mask &= ~remove
                changed = True
        if not changed:
            return mask


def _break_blocks(mask, scores):
    """Remove the weakest pixel of any fully-on 2x2 block (deterministic)."""
    mask = mask.copy()
    while True:
        block = mask[:-1, :-1] & mask[:-1, 1:] & mask[1:, :-1] & mask[1:, 1:]
        ys, xs = np.nonzero(block)
        if ys.size == 0:
            return mask
        y, x = ys[0], xs[0]
        cells = [(y, x), (y, x + 1), (y + 1, x), (y + 1, x + 1)]
        weakest = min(cells, key=lambda c: (scores[c], -c[0], -c[1]))
        mask[weakest] = False


def thin_mask(mask, scores=None) -> np.ndarray:
    """Connectivity-preserving thinning of a binary mask to width 1.

    ``scores`` (same shape) break ties when a residual 2x2 block must lose
    a pixel; by default position decides.
    """
    m = np.asarray(mask).astype(bool)
    if scores is None:
        scores = np.zeros(m.shape)
    thinned = _zhang_suen(m)
    return _break_blocks(thinned, np.asarray(scores, dtype=np.float64))


def nms_thin(edge_prob) -> np.ndarray:
    """Suppress non-maxima along the quantized gradient, then thin to width 1.

    A pixel survives suppression when its score is at least that of both
    neighbours along its Sobel-estimated gradient direction (4 orientation
    bins) and is positive; survivors keep their score. A thinning pass plus
    a 2x2-block breaker reduce plateau ridges to single-pixel width.
    """
    p = np.asarray(edge_prob, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {p.shape}")
    gx, gy = _sobel(p)
    theta = np.degrees(np.arctan2(gy, gx)) % 180.0
    bins = np.round(theta / 45.0).astype(int) % 4
    keep = p > 0
    for b, (d1, d2) in _DIR_OFFSETS.items():
        sel = bins == b
        n1 = _shifted(p, *d1)
        n2 = _shifted(p, *d2)
        keep &= ~sel | ((p >= n1) & (p >= n2))
    if not np.any(keep):
        return np.zeros_like(p)
    mask = thin_mask(keep, p)
    return np.where(mask, p, 0.0)


def ridge_width_ok(mask) -> bool:
    """True when no 2x2 neighbourhood is fully on (the width-1 probe)."""
    m = np.asarray(mask) > 0
    block = m[:-1, :-1] & m[:-1, 1:] & m[1:, :-1] & m[1:, 1:]
    return not np.any(block)


# Boundary matching -------------------------------------------------------------


def match_boundaries(pred_thin, gt, tol: MatchTolerance = MatchTolerance()):
    """Greedy one-to-one correspondence within the tolerance radius.

    Candidate pairs are processed in increasing (distance, pred index,
    gt index) order; each point matches at most once. Returns (tp, fp, fn).
    """
    pred_thin, gt = _check_pair(pred_thin, gt)
    radius = tol.radius(pred_thin.shape)
    pred_pts = np.argwhere(pred_thin > 0.5)
    gt_pts = np.argwhere(gt > 0.5)
    np_, ng = len(pred_pts), len(gt_pts)
    if np_ == 0 or ng == 0:
        return 0, np_, ng
    diff = pred_pts[:, None, :] - gt_pts[None, :, :]
    dist = np.sqrt((diff.astype(np.float64) ** 2).sum(axis=2))
    pi, gi = np.nonzero(dist <= radius)
    order = np.lexsort((gi, pi, dist[pi, gi]))
    pred_used = np.zeros(np_, dtype=bool)
    gt_used = np.zeros(ng, dtype=bool)
    tp = 0
    for k in order:
        a, b = pi[k], gi[k]
        if not pred_used[a] and not gt_used[b]:
            pred_used[a] = True
            gt_used[b] = True
            tp += 1
    return tp, np_ - tp, ng - tp


def ods_ois(pred_prob_maps, gts, n_thresholds=99, tol: MatchTolerance = MatchTolerance(),
            beta2=BOUNDARY_BETA2, thin=True):
    """Fixed-threshold (ODS) and per-image-best (OIS) boundary scores.

    Each map is thinned once, binarized at every threshold, and matched
    against its target. ODS maximizes the pooled F over thresholds. OIS
    picks each image's best threshold, aggregates the counts at those
    choices, and scores the aggregate. Ties in an image's F resolve to the
    threshold nearest the pooled optimum, so an image with a flat F profile
    (nothing matched anywhere) contributes the same counts to both scores
    instead of dumping its lowest-threshold false positives on OIS. Returns
    (ods, ois, curve).
    """
    if len(pred_prob_maps) == 0 or len(pred_prob_maps) != len(gts):
        raise ValueError("need matching nonempty prediction/target lists")
    thresholds = _uniform_thresholds(n_thresholds)
    thinned = [nms_thin(p) if thin else np.asarray(p, dtype=np.float64)
               for p in pred_prob_maps]
    counts = np.zeros((len(thinned), n_thresholds, 3), dtype=np.int64)
    for i, (p, g) in enumerate(zip(thinned, gts)):
        for j, t in enumerate(thresholds):
            counts[i, j] = match_boundaries((p >= t) & (p > 0), np.asarray(g), tol)

    curve = []
    ods = 0.0
    ods_j = 0
    for j, t in enumerate(thresholds):
        tp, fp, fn = counts[:, j].sum(axis=0)
        precision, recall, f = _prf(tp, fp, fn, beta2)
        curve.append(PRPoint(float(t), precision, recall))
        if f > ods:
            ods = f
            ods_j = j

    agg = np.zeros(3, dtype=np.int64)
    for i in range(len(thinned)):
        fs = [_prf(*counts[i, j], beta2)[2] for j in range(n_thresholds)]
        best_f = max(fs)
        tied = [j for j, f in enumerate(fs) if f == best_f]
        best_j = min(tied, key=lambda j: (abs(j - ods_j), j))
        agg += counts[i, best_j]
    _, _, ois = _prf(*agg, beta2)
    return ods, ois, curve


# Multi-scale prediction ---------------------------------------------------------


def _resize_map(arr, out_h, out_w):
    x = arr[None, None] if arr.ndim == 2 else arr
    return engine.resize_bilinear_kernel(x, out_h, out_w)


def multiscale_predict(model, image, scales=DEFAULT_SCALES) -> np.ndarray:
    """Average the model's probability maps over rescaled inputs.

    The input is resized per scale, replicate-padded up to a multiple of 16,
    predicted, cropped, resized back to the original geometry, and averaged.
    """
    if not scales:
        raise ValueError("scales must be nonempty")
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    n, c, h, w = x.shape
    acc = np.zeros((n, 1, h, w))
    for s in scales:
        sh, sw = max(1, round(h * s)), max(1, round(w * s))
        scaled = engine.resize_bilinear_kernel(x, sh, sw)
        ph = (-sh) % 16
        pw = (-sw) % 16
        if ph or pw:
            scaled = np.pad(scaled, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
        prob = model.predict(scaled)[:, :, :sh, :sw]
        acc += engine.resize_bilinear_kernel(prob, h, w)
    return acc / len(scales)


# Report assembly and export -----------------------------------------------------


def evaluate_saliency(preds, gts, n_thresholds=255, beta2=SALIENCY_BETA2,
                      max_f_mode="per_image_mean") -> EvalReport:
    if max_f_mode == "per_image_mean":
        curve, max_f = pr_curve_per_image_mean(preds, gts, n_thresholds, beta2)
    elif max_f_mode == "pooled":
        curve, max_f = pr_curve_region(preds, gts, n_thresholds, beta2)
    else:
        raise ValueError(f"unknown max_f mode {max_f_mode!r}")
    mean_mae = float(np.mean([mae(p, g) for p, g in zip(preds, gts)]))
    return EvalReport(max_f=max_f, mae=mean_mae, curve=curve,
                      max_f_mode=max_f_mode)


def evaluate_boundaries(preds, gts, n_thresholds=99,
                        tol: MatchTolerance = MatchTolerance(),
                        beta2=BOUNDARY_BETA2) -> EvalReport:
    ods, ois, curve = ods_ois(preds, gts, n_thresholds, tol, beta2)
    return EvalReport(ods=ods, ois=ois, curve=curve)


def export_report(report: EvalReport) -> str:
    """Flat key=value lines in stable order, omitting absent metrics."""
    lines = []
    for key in ("max_f", "mae", "ods", "ois"):
        value = getattr(report, key)
        if value is not None:
            lines.append(f"{key}={value:.6f}")
    if report.max_f_mode is not None:
        lines.append(f"max_f_mode={report.max_f_mode}")
    lines.append(f"curve_points={len(report.curve)}")
    return "\n".join(lines) + "\n"


def export_pr_csv(curve, beta2) -> str:
    lines = ["threshold,precision,recall,f"]
    for pt in curve:
        f = f_measure(pt.precision, pt.recall, beta2)
        lines.append(f"{pt.threshold:.6f},{pt.precision:.6f},{pt.recall:.6f},{f:.6f}")
    return "\n".join(lines) + "\n"
