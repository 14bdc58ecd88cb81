"""Slow reference implementations used to check the fast paths.

Everything here is written as plain loops over pixels, positions or
thresholds and shares no code with the modules it checks.
"""

import math

import numpy as np


def numerical_gradient(f, x, h=1e-5):
    """Central differences of scalar ``f`` at array ``x`` (``x`` is restored)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic, numeric):
    """``|a - n| / (|a| + |n|)`` in the Frobenius norm; 0 when both vanish."""
    a = np.ravel(np.asarray(analytic, dtype=np.float64))
    n = np.ravel(np.asarray(numeric, dtype=np.float64))
    den = np.linalg.norm(a) + np.linalg.norm(n)
    if den == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / den)


def conv2d_loops(x, w, b, stride, pad):
    h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((ho, wo, cout))
    for oy in range(ho):
        for ox in range(wo):
            for co in range(cout):
                acc = b[co]
                for ky in range(kh):
                    for kx in range(kw):
                        iy = oy * stride - pad + ky
                        ix = ox * stride - pad + kx
                        if 0 <= iy < h and 0 <= ix < wd:
                            for ci in range(cin):
                                acc += x[iy, ix, ci] * w[ky, kx, ci, co]
                out[oy, ox, co] = acc
    return out


def maxpool2_scan(x):
    h, w, c = x.shape
    out = np.zeros((h // 2, w // 2, c))
    idx = np.zeros((h // 2, w // 2, c), dtype=int)
    for oy in range(h // 2):
        for ox in range(w // 2):
            for ch in range(c):
                best, best_k = None, 0
                for k, (dy, dx) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
                    v = x[2 * oy + dy, 2 * ox + dx, ch]
                    if best is None or v > best:
                        best, best_k = v, k
                out[oy, ox, ch] = best
                idx[oy, ox, ch] = best_k
    return out, idx


def affinity_loops(x, y, wf, wg):
    """``S[i][j] = sum_c (x_i Wf)_c (y_j Wg)_c`` with explicit loops."""
    xs = x.reshape(-1, x.shape[-1])
    ys = y.reshape(-1, y.shape[-1])
    n, c = xs.shape
    r = wf.shape[1]
    s = np.zeros((n, n))
    for i in range(n):
        fi = [sum(xs[i, a] * wf[a, k] for a in range(c)) for k in range(r)]
        for j in range(n):
            gj = [sum(ys[j, a] * wg[a, k] for a in range(c)) for k in range(r)]
            s[i, j] = sum(fi[k] * gj[k] for k in range(r))
    return s


def coattention_loops(x, y, wf, wg, wh1, wh2, gamma1, gamma2):
    """Returns ``(x_w, y_w, alpha_x, alpha_y)`` computed position by position."""
    shape = x.shape
    xs = x.reshape(-1, shape[-1])
    ys = y.reshape(-1, shape[-1])
    n, c = xs.shape
    s = affinity_loops(x, y, wf, wg)
    ax = np.zeros((n, n))
    ay = np.zeros((n, n))
    for i in range(n):
        m = max(s[i, j] for j in range(n))
        z = sum(math.exp(s[i, j] - m) for j in range(n))
        for j in range(n):
            ax[i, j] = math.exp(s[i, j] - m) / z
    for j in range(n):
        m = max(s[i, j] for i in range(n))
        z = sum(math.exp(s[i, j] - m) for i in range(n))
        for i in range(n):
            ay[i, j] = math.exp(s[i, j] - m) / z
    h1 = np.array([[sum(xs[i, a] * wh1[a, k] for a in range(c)) for k in range(c)] for i in range(n)])
    h2 = np.array([[sum(ys[j, a] * wh2[a, k] for a in range(c)) for k in range(c)] for j in range(n)])
    xw = np.zeros_like(xs)
    yw = np.zeros_like(ys)
    for i in range(n):
        for k in range(c):
            xw[i, k] = gamma1 * sum(ax[i, j] * h2[j, k] for j in range(n)) + xs[i, k]
    for j in range(n):
        for k in range(c):
            yw[j, k] = gamma2 * sum(ay[i, j] * h1[i, k] for i in range(n)) + ys[j, k]
    return xw.reshape(shape), yw.reshape(shape), ax, ay


def _level(v):
    v = min(max(float(v), 0.0), 1.0)
    return int(math.floor(v * 255.0 + 0.5))


def confusion_loops(s, g):
    """Per-threshold ``(tp, fp, fn, tn)`` lists by visiting every pixel."""
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    g = np.asarray(g).reshape(-1)
    tp, fp, fn, tn = [], [], [], []
    levels = [_level(v) for v in s]
    for t in range(256):
        a = b = c = d = 0
        for lv, gt in zip(levels, g):
            pos = lv >= t
            if pos and gt:
                a += 1
            elif pos:
                b += 1
            elif gt:
                c += 1
            else:
                d += 1
        tp.append(a)
        fp.append(b)
        fn.append(c)
        tn.append(d)
    return tp, fp, fn, tn


def curves_loops(s, g):
    """``(pr, roc)`` as lists of (precision, recall) and (fpr, tpr) per threshold."""
    tp, fp, fn, tn = confusion_loops(s, g)
    pr, roc = [], []
    for t in range(256):
        pred = tp[t] + fp[t]
        precision = tp[t] / pred if pred else 1.0
        recall = tp[t] / (tp[t] + fn[t])
        neg = fp[t] + tn[t]
        fpr = fp[t] / neg if neg else 0.0
        pr.append((precision, recall))
        roc.append((fpr, recall))
    return pr, roc


def _rect_area(points, sub=64):
    """Midpoint rectangles, ``sub`` per segment, between consecutive vertices."""
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        width = (x1 - x0) / sub
        for k in range(sub):
            t = (k + 0.5) / sub
            area += width * (y0 + t * (y1 - y0))
    return area


def auc_rectangles(roc, sub=64):
    """Area under an ROC given per threshold, walking thresholds 255 -> 0."""
    pts = [(0.0, 0.0)] + [tuple(map(float, roc[t])) for t in range(255, -1, -1)] + [(1.0, 1.0)]
    pts = sorted(pts, key=lambda p: p[0])  # Python's sort is stable
    return _rect_area(pts, sub)


def ap_rectangles(pr, sub=64):
    pts = [(float(pr[t][1]), float(pr[t][0])) for t in range(255, -1, -1)]
    pts = [(0.0, pts[0][1])] + pts
    if pts[-1][0] < 1.0:
        pts.append((1.0, pts[-1][1]))
    pts = sorted(pts, key=lambda p: p[0])
    return _rect_area(pts, sub)


def auc_pair_counting(s, g):
    """AUC as P(fg level > bg level) + P(tie) / 2 over all fg/bg pixel pairs."""
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    g = np.asarray(g).reshape(-1)
    fg = [_level(v) for v, t in zip(s, g) if t]
    bg = [_level(v) for v, t in zip(s, g) if not t]
    wins = 0.0
    for a in fg:
        for b in bg:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(fg) * len(bg))


def weighted_f_loops(s, g, beta_sq=1.0):
    """Weighted F-measure from first principles: brute-force nearest foreground
    pixel, explicit 7x7 Gaussian sum with zero padding.

    Nearest-pixel ties are broken by scan order, so callers should use masks
    where ties cannot change the result.
    """
    s = np.asarray(s, dtype=np.float64)
    g = np.asarray(g).astype(bool)
    h, w = g.shape
    eps = np.spacing(1.0)
    fg = [(r, c) for r in range(h) for c in range(w) if g[r, c]]
    err = [[abs(s[r, c] - (1.0 if g[r, c] else 0.0)) for c in range(w)] for r in range(h)]
    et = [[0.0] * w for _ in range(h)]
    dist = [[0.0] * w for _ in range(h)]
    for r in range(h):
        for c in range(w):
            if g[r, c]:
                et[r][c] = err[r][c]
                continue
            best = None
            for fr, fc in fg:
                d = math.hypot(fr - r, fc - c)
                if best is None or d < best[0]:
                    best = (d, fr, fc)
            dist[r][c] = best[0]
            et[r][c] = err[best[1]][best[2]]
    sigma = 5.0
    k = [[math.exp(-(dx * dx + dy * dy) / (2 * sigma * sigma)) for dx in range(-3, 4)] for dy in range(-3, 4)]
    total = sum(map(sum, k))
    k = [[v / total for v in row] for row in k]
    tp_loss = fp_sum = fg_count = 0.0
    for r in range(h):
        for c in range(w):
            ea = 0.0
            for dy in range(-3, 4):
                for dx in range(-3, 4):
                    rr, cc = r + dy, c + dx
                    if 0 <= rr < h and 0 <= cc < w:
                        ea += k[dy + 3][dx + 3] * et[rr][cc]
            e = err[r][c]
            if g[r, c]:
                ew = ea if ea < e else e
                tp_loss += ew
                fg_count += 1
            else:
                fp_sum += e * (2.0 - math.exp(math.log(0.5) / 5.0 * dist[r][c]))
    recall = 1.0 - tp_loss / fg_count
    tpw = fg_count - tp_loss
    precision = tpw / (eps + tpw + fp_sum)
    return (1 + beta_sq) * recall * precision / (eps + recall + beta_sq * precision)


def s_measure_loops(s, g, alpha=0.5):
    """Structure measure written out with scalar loops (region weight ``alpha``)."""
    s = np.asarray(s, dtype=np.float64)
    g = np.asarray(g).astype(bool)
    h, w = g.shape
    eps = np.spacing(1.0)
    vals = [(s[r, c], bool(g[r, c])) for r in range(h) for c in range(w)]
    n = len(vals)
    n_fg = sum(1 for _, t in vals if t)
    if n_fg == 0:
        return 1.0 - sum(v for v, _ in vals) / n
    if n_fg == n:
        return sum(v for v, _ in vals) / n

    def obj(xs):
        m = sum(xs) / len(xs)
        sd = math.sqrt(sum((v - m) ** 2 for v in xs) / (len(xs) - 1)) if len(xs) > 1 else 0.0
        return 2 * m / (m * m + 1 + sd + eps)

    u = n_fg / n
    s_obj = u * obj([v for v, t in vals if t]) + (1 - u) * obj([1 - v for v, t in vals if not t])

    sx = sum(c + 1 for r in range(h) for c in range(w) if g[r, c]) / n_fg
    sy = sum(r + 1 for r in range(h) for c in range(w) if g[r, c]) / n_fg
    cx = int(math.floor(sx + 0.5))
    cy = int(math.floor(sy + 0.5))

    def ssim(rows, cols):
        ps = [s[r, c] for r in rows for c in cols]
        qs = [1.0 if g[r, c] else 0.0 for r in rows for c in cols]
        k = len(ps)
        if k == 0:
            return 0.0
        mx = sum(ps) / k
        my = sum(qs) / k
        d = max(k - 1, 1)
        vx = sum((p - mx) ** 2 for p in ps) / d
        vy = sum((q - my) ** 2 for q in qs) / d
        cxy = sum((p - mx) * (q - my) for p, q in zip(ps, qs)) / d
        a = 4 * mx * my * cxy
        b = (mx * mx + my * my) * (vx + vy)
        if a != 0:
            return a / (b + eps)
        return 1.0 if b == 0 else 0.0

    top, bottom = range(0, cy), range(cy, h)
    left, right = range(0, cx), range(cx, w)
    regions = [(top, left), (top, right), (bottom, left), (bottom, right)]
    weights = [len(a) * len(b) / n for a, b in regions]
    s_reg = sum(wt * ssim(a, b) for wt, (a, b) in zip(weights, regions))
    return max(0.0, alpha * s_reg + (1 - alpha) * s_obj)


def in_square(px, py, cx, cy, r):
    return cx - r <= px < cx + r and cy - r <= py < cy + r


def in_disc(px, py, cx, cy, r):
    return math.hypot(px - cx, py - cy) < r


def in_triangle(px, py, vertices):
    """Strict barycentric inside test (boundary points count as outside)."""
    (x1, y1), (x2, y2), (x3, y3) = vertices
    det = (y2 - y3) * (x1 - x3) + (x3 - x2) * (y1 - y3)
    l1 = ((y2 - y3) * (px - x3) + (x3 - x2) * (py - y3)) / det
    l2 = ((y3 - y1) * (px - x3) + (x1 - x3) * (py - y3)) / det
    l3 = 1.0 - l1 - l2
    return l1 > 0 and l2 > 0 and l3 > 0
