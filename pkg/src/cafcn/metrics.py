"""Saliency evaluation: PR/ROC curves over 256 thresholds, F-beta, MAE, AUC, AP,
weighted F-beta and S-measure.

Maps in [0, 1] are quantized to 8-bit levels with ``floor(v * 255 + 0.5)``
before thresholding; a pixel is foreground at threshold ``t`` when its level
is ``>= t``.  Curves are stored in threshold order (row ``t`` is threshold
``t``), so recall, TPR and FPR are non-increasing down the rows.

Conventions for degenerate counts: precision of an empty prediction is 1;
FPR is 0 when the mask has no background.  A mask without foreground makes
recall undefined and raises ``DegenerateMask``; dataset evaluation skips
such images for the recall-bearing metrics and counts them.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve, distance_transform_edt

EPS = np.spacing(1.0)
THRESHOLDS = 256

METRIC_KEYS = ("f_beta", "mae", "auc", "ap", "f_beta_w", "s_measure")
CURVE_HEADER = "threshold,precision,recall,fpr,tpr"


class DegenerateMask(ValueError):
    """Ground truth without foreground pixels."""


def to_levels(s):
    s = np.clip(np.asarray(s, dtype=np.float64), 0.0, 1.0)
    return np.floor(s * 255.0 + 0.5).astype(np.int64)


def _prepare(s, g):
    s = np.asarray(s, dtype=np.float64)
    g = np.asarray(g)
    if s.ndim == 3 and s.shape[2] == 1:
        s = s[..., 0]
    if g.ndim == 3 and g.shape[2] == 1:
        g = g[..., 0]
    if s.shape != g.shape:
        raise ValueError(f"map {s.shape} and mask {g.shape} differ in shape")
    if not np.all((g == 0) | (g == 1)):
        raise ValueError("ground truth mask must be binary")
    return s, g.astype(bool)


def confusion_counts(s, g):
    """Integer ``(tp, fp, fn, tn)`` arrays, one entry per threshold 0..255."""
    s, g = _prepare(s, g)
    lv = to_levels(s)
    fg_hist = np.bincount(lv[g], minlength=THRESHOLDS)
    bg_hist = np.bincount(lv[~g], minlength=THRESHOLDS)
    # count of levels >= t, by reverse cumulative sum
    tp = np.cumsum(fg_hist[::-1])[::-1]
    fp = np.cumsum(bg_hist[::-1])[::-1]
    fn = int(g.sum()) - tp
    tn = int((~g).sum()) - fp
    return tp, fp, fn, tn


def pr_curve(s, g):
    """``256 x 2`` array of (precision, recall) indexed by threshold."""
    tp, fp, fn, _ = confusion_counts(s, g)
    n_fg = tp[0] + fn[0]
    if n_fg == 0:
        raise DegenerateMask("mask has no foreground; recall is undefined")
    predicted = tp + fp
    precision = np.where(predicted > 0, tp / np.maximum(predicted, 1), 1.0)
    recall = tp / n_fg
    return np.stack([precision, recall], axis=1)


def roc_curve(s, g):
    """``256 x 2`` array of (fpr, tpr) indexed by threshold."""
    tp, fp, fn, tn = confusion_counts(s, g)
    n_fg = tp[0] + fn[0]
    n_bg = fp[0] + tn[0]
    if n_fg == 0:
        raise DegenerateMask("mask has no foreground; TPR is undefined")
    tpr = tp / n_fg
    fpr = fp / n_bg if n_bg > 0 else np.zeros(THRESHOLDS)
    return np.stack([fpr, tpr], axis=1)


def f_beta(precision, recall, beta_sq=0.3):
    """Works elementwise on arrays; 0 where precision and recall are both 0."""
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    num = (1.0 + beta_sq) * p * r
    den = beta_sq * p + r
    out = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return float(out) if out.ndim == 0 else out


def adaptive_threshold_level(s):
    return int(min(to_levels(min(2.0 * float(np.mean(s)), 1.0)), 255))


def f_beta_report(s, g, beta_sq=0.3, adaptive=False):
    """Max F-beta over the 256 thresholds, or F-beta at twice the mean saliency."""
    curve = pr_curve(s, g)
    fb = f_beta(curve[:, 0], curve[:, 1], beta_sq)
    if adaptive:
        return float(fb[adaptive_threshold_level(_prepare(s, g)[0])])
    return float(fb.max())


def mae(s, g):
    s, g = _prepare(s, g)
    return float(np.mean(np.abs(s - g)))


def _trapezoid_sorted(x, y):
    # stable sort keeps threshold order among equal abscissae
    order = np.argsort(x, kind="stable")
    x = x[order]
    y = y[order]
    return float(np.sum(0.5 * (x[1:] - x[:-1]) * (y[1:] + y[:-1])))


def curve_polyline_roc(roc):
    """ROC vertices from (0, 0) through thresholds 255..0 to (1, 1)."""
    pts = np.asarray(roc, dtype=np.float64)[::-1]
    return np.vstack([[0.0, 0.0], pts, [1.0, 1.0]])


def curve_polyline_pr(pr):
    """PR vertices (recall, precision) through thresholds 255..0.

    The curve starts at recall 0 with the precision of the lowest-recall
    point and, if recall never reaches 1, is extended flat to recall 1.
    """
    pts = np.asarray(pr, dtype=np.float64)[::-1]
    recall = pts[:, 1]
    precision = pts[:, 0]
    xs = np.concatenate([[0.0], recall])
    ys = np.concatenate([[precision[0]], precision])
    if xs[-1] < 1.0:
        xs = np.append(xs, 1.0)
        ys = np.append(ys, ys[-1])
    return np.stack([xs, ys], axis=1)


def auc(roc):
    """Trapezoidal area under a ``256 x 2`` (fpr, tpr) curve."""
    poly = curve_polyline_roc(roc)
    return _trapezoid_sorted(poly[:, 0], poly[:, 1])


def ap(pr):
    """Trapezoidal area under a ``256 x 2`` (precision, recall) curve over recall."""
    poly = curve_polyline_pr(pr)
    return _trapezoid_sorted(poly[:, 0], poly[:, 1])


def _gauss_kernel(size=7, sigma=5.0):
    # MATLAB fspecial('gaussian', size, sigma)
    m = (size - 1) / 2.0
    y, x = np.ogrid[-m:m + 1, -m:m + 1]
    h = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    h[h < np.finfo(h.dtype).eps * h.max()] = 0
    return h / h.sum()


def f_beta_weighted(s, g, beta_sq=1.0):
    """Weighted F-measure of Margolin et al. (CVPR 2014).

    Errors are spread with a 7x7, sigma 5 Gaussian, background errors are
    taken from the nearest foreground pixel's error and scaled up with
    distance from the object.  Returns 0 for an empty mask.
    """
    s, g = _prepare(s, g)
    if not g.any():
        return 0.0
    gf = g.astype(np.float64)
    dist, idx = distance_transform_edt(~g, return_indices=True)
    err = np.abs(s - gf)
    et = err.copy()
    bg = ~g
    et[bg] = err[idx[0][bg], idx[1][bg]]
    ea = convolve(et, _gauss_kernel(), mode="constant", cval=0.0)
    min_e = np.where(g & (ea < err), ea, err)
    importance = np.where(bg, 2.0 - np.exp(np.log(0.5) / 5.0 * dist), 1.0)
    ew = min_e * importance
    tpw = gf.sum() - ew[g].sum()
    fpw = ew[bg].sum()
    recall = 1.0 - ew[g].mean()
    precision = tpw / (EPS + tpw + fpw)
    return float((1.0 + beta_sq) * recall * precision / (EPS + recall + beta_sq * precision))


def _object_score(values):
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + sigma + EPS)


def s_object(s, g):
    """Object-aware structural similarity."""
    u = g.mean()
    fg = s * g
    bg = (1.0 - s) * ~g
    score_fg = _object_score(fg[g]) if g.any() else 0.0
    score_bg = _object_score(bg[~g]) if (~g).any() else 0.0
    return u * score_fg + (1.0 - u) * score_bg


def _round_half_up(v):
    return int(math.floor(v + 0.5))


def centroid(g):
    """1-based (x, y) split point: rounded foreground centroid, or the image centre."""
    h, w = g.shape
    if not g.any():
        return _round_half_up(w / 2.0), _round_half_up(h / 2.0)
    rows, cols = np.nonzero(g)
    return _round_half_up(cols.mean() + 1.0), _round_half_up(rows.mean() + 1.0)


def _ssim(p, q):
    n = p.size
    if n == 0:
        return 0.0
    x = p.mean()
    y = q.mean()
    d = max(n - 1, 1)
    sx = np.sum((p - x) ** 2) / d
    sy = np.sum((q - y) ** 2) / d
    sxy = np.sum((p - x) * (q - y)) / d
    a = 4.0 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return a / (b + EPS)
    return 1.0 if b == 0 else 0.0


def s_region(s, g):
    """Region-aware structural similarity over four quadrants about the centroid."""
    h, w = g.shape
    x, y = centroid(g)
    gf = g.astype(np.float64)
    area = h * w
    w1 = x * y / area
    w2 = (w - x) * y / area
    w3 = x * (h - y) / area
    w4 = 1.0 - w1 - w2 - w3
    parts = [(slice(0, y), slice(0, x)), (slice(0, y), slice(x, w)),
             (slice(y, h), slice(0, x)), (slice(y, h), slice(x, w))]
    return sum(wt * _ssim(s[r, c], gf[r, c]) for wt, (r, c) in zip((w1, w2, w3, w4), parts))


def s_measure(s, g, alpha=0.5):
    """``alpha * S_region + (1 - alpha) * S_object``, clipped at 0.

    An all-background mask scores ``1 - mean(s)`` and an all-foreground mask
    ``mean(s)``.
    """
    s, g = _prepare(s, g)
    y = g.mean()
    if y == 0:
        return float(1.0 - s.mean())
    if y == 1:
        return float(s.mean())
    return float(max(0.0, alpha * s_region(s, g) + (1.0 - alpha) * s_object(s, g)))


@dataclass
class MetricReport:
    f_beta: float
    mae: float
    auc: float
    ap: float
    f_beta_w: float
    s_measure: float
    pr_curve: np.ndarray = field(repr=False)
    roc_curve: np.ndarray = field(repr=False)
    n_images: int = 1
    n_degenerate: int = 0
    f_beta_statistic: str = "max"

    def scalars(self):
        return {k: getattr(self, k) for k in METRIC_KEYS}


def evaluate_image(s, g, beta_sq=0.3, alpha=0.5, adaptive=False) -> MetricReport:
    s_arr, g_arr = _prepare(s, g)
    degenerate = not g_arr.any()
    if degenerate:
        nan_curve = np.full((THRESHOLDS, 2), np.nan)
        return MetricReport(math.nan, mae(s_arr, g_arr), math.nan, math.nan, math.nan,
                            s_measure(s_arr, g_arr, alpha), nan_curve, nan_curve.copy(),
                            1, 1, "adaptive" if adaptive else "max")
    pr = pr_curve(s_arr, g_arr)
    roc = roc_curve(s_arr, g_arr)
    return MetricReport(
        f_beta=f_beta_report(s_arr, g_arr, beta_sq, adaptive),
        mae=mae(s_arr, g_arr),
        auc=auc(roc),
        ap=ap(pr),
        f_beta_w=f_beta_weighted(s_arr, g_arr),
        s_measure=s_measure(s_arr, g_arr, alpha),
        pr_curve=pr,
        roc_curve=roc,
        f_beta_statistic="adaptive" if adaptive else "max",
    )


def evaluate_dataset(items, beta_sq=0.3, alpha=0.5, adaptive=False) -> MetricReport:
    """Per-image metrics averaged over the dataset; curves averaged per threshold.

    Images whose mask has no foreground contribute to MAE and S-measure only.
    """
    reports = [evaluate_image(s, g, beta_sq, alpha, adaptive) for s, g in items]
    if not reports:
        raise ValueError("nothing to evaluate")
    valid = [r for r in reports if r.n_degenerate == 0]

    def mean_of(key, pool):
        return float(np.mean([getattr(r, key) for r in pool])) if pool else math.nan

    if valid:
        pr = np.mean(np.stack([r.pr_curve for r in valid]), axis=0)
        roc = np.mean(np.stack([r.roc_curve for r in valid]), axis=0)
    else:
        pr = np.full((THRESHOLDS, 2), np.nan)
        roc = pr.copy()
    return MetricReport(
        f_beta=mean_of("f_beta", valid),
        mae=mean_of("mae", reports),
        auc=mean_of("auc", valid),
        ap=mean_of("ap", valid),
        f_beta_w=mean_of("f_beta_w", valid),
        s_measure=mean_of("s_measure", reports),
        pr_curve=pr,
        roc_curve=roc,
        n_images=len(reports),
        n_degenerate=len(reports) - len(valid),
        f_beta_statistic="adaptive" if adaptive else "max",
    )


def format_report(report: MetricReport, keys=METRIC_KEYS):
    """Flat ``key=value`` text in a fixed key order."""
    lines = [f"# f_beta statistic: {report.f_beta_statistic}"]
    for k in keys:
        lines.append(f"{k}={getattr(report, k):.10f}")
    lines.append(f"n_images={report.n_images}")
    lines.append(f"n_degenerate={report.n_degenerate}")
    return "\n".join(lines) + "\n"


def parse_report(text):
    out = {}
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        k, v = line.split("=", 1)
        out[k] = float(v) if k in METRIC_KEYS else int(v)
    return out


def format_curves(report: MetricReport):
    lines = [CURVE_HEADER]
    for t in range(THRESHOLDS):
        p, r = report.pr_curve[t]
        fpr, tpr = report.roc_curve[t]
        lines.append(f"{t},{p:.10f},{r:.10f},{fpr:.10f},{tpr:.10f}")
    return "\n".join(lines) + "\n"
