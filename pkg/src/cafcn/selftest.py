"""Built-in correctness checks: gradients, attention invariants, adjointness,
metric oracles and the loss closed form.

``run_selftest`` returns one ``CheckResult`` per check.  Setting ``fault`` (or
the ``CAFCN_SELFTEST_FAULT`` environment variable) to the name of a gradient
check perturbs one analytic gradient entry before comparison; the check is
then expected to fail.  It exists only to prove the checks can fail.
"""

import math
import os
import time
from dataclasses import dataclass

import numpy as np

from . import metrics, oracles
from .coattention import CoAttentionParams, attend, coattention_backward, coattention_forward
from .losses import LossConfig, weighted_bce
from .network import NetworkConfig, NetworkParams, forward_backward_pair, forward_pair, pair_loss
from .tensor import (ConvKernel, conv2d, conv2d_backward, deconv2d, deconv2d_backward, inner,
                     maxpool2, maxpool2_backward, matmul, relu, relu_backward, sigmoid,
                     sigmoid_backward, softmax_rows, softmax_rows_backward)

FAULT_ENV = "CAFCN_SELFTEST_FAULT"

PRIMITIVE_TOL = 1e-6
COATTENTION_TOL = 1e-5
NETWORK_TOL = 1e-4
ADJOINT_TOL = 1e-12
LOSS_EXPECTED = 0.34657
LOSS_TOL = 1e-5
LOSS_GRAD_TOL = 1e-7


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    limit: float
    detail: str = ""
    seconds: float = 0.0

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"{status}  {self.name:<24} value={self.value:.3e} limit={self.limit:.1e}{extra}"


def _maybe_fault(fault, name, grad):
    if fault == name:
        grad = np.array(grad, dtype=np.float64, copy=True)
        flat = grad.reshape(-1)
        flat[0] += 1e-3 * (1.0 + abs(flat[0]))
    return grad


def _compare(errors, analytic, numeric, label):
    errors[label] = oracles.relative_error(analytic, numeric)


# --- gradient checks ---------------------------------------------------------

def primitive_gradient_errors(rng, fault=None):
    """Relative error of every primitive's backward pass, keyed by label."""
    errors = {}
    fd = oracles.numerical_gradient

    for stride, pad in ((1, 1), (2, 0)):
        x = rng.standard_normal((5, 5, 2))
        k = ConvKernel(rng.standard_normal((3, 3, 2, 3)), rng.standard_normal(3), stride)
        r = rng.standard_normal(conv2d(x, k, pad).shape)
        gx, gw, gb = conv2d_backward(x, k, r, pad)
        gx = _maybe_fault(fault, "conv2d", gx)
        _compare(errors, gx, fd(lambda v: inner(r, conv2d(v, k, pad)), x.copy()), f"conv2d.x s{stride}")
        _compare(errors, gw, fd(lambda v: inner(r, conv2d(x, ConvKernel(v, k.bias, stride), pad)),
                                k.weights.copy()), f"conv2d.w s{stride}")
        _compare(errors, gb, fd(lambda v: inner(r, conv2d(x, ConvKernel(k.weights, v, stride), pad)),
                                k.bias.copy()), f"conv2d.b s{stride}")

    x = rng.standard_normal((3, 3, 3))
    k = ConvKernel(rng.standard_normal((4, 4, 2, 3)), rng.standard_normal(2), 2)
    r = rng.standard_normal(deconv2d(x, k, 1).shape)
    gx, gw, gb = deconv2d_backward(x, k, r, 1)
    gx = _maybe_fault(fault, "deconv2d", gx)
    _compare(errors, gx, fd(lambda v: inner(r, deconv2d(v, k, 1)), x.copy()), "deconv2d.x")
    _compare(errors, gw, fd(lambda v: inner(r, deconv2d(x, ConvKernel(v, k.bias, 2), 1)),
                            k.weights.copy()), "deconv2d.w")
    _compare(errors, gb, fd(lambda v: inner(r, deconv2d(x, ConvKernel(k.weights, v, 2), 1)),
                            k.bias.copy()), "deconv2d.b")

    # distinct values with gaps well above the FD step keep the argmax fixed
    x = rng.permutation(64).reshape(4, 4, 4) * 0.01
    pooled, idx = maxpool2(x)
    r = rng.standard_normal(pooled.shape)
    g = _maybe_fault(fault, "maxpool2", maxpool2_backward(r, idx))
    _compare(errors, g, fd(lambda v: inner(r, maxpool2(v)[0]), x.copy(), h=1e-4), "maxpool2")

    x = rng.uniform(0.1, 1.0, (3, 3, 2)) * rng.choice([-1.0, 1.0], (3, 3, 2))
    r = rng.standard_normal(x.shape)
    g = _maybe_fault(fault, "relu", relu_backward(x, r))
    _compare(errors, g, fd(lambda v: inner(r, relu(v)), x.copy()), "relu")

    x = rng.standard_normal((3, 3, 2)) * 2.0
    r = rng.standard_normal(x.shape)
    g = _maybe_fault(fault, "sigmoid", sigmoid_backward(sigmoid(x), r))
    _compare(errors, g, fd(lambda v: inner(r, sigmoid(v)), x.copy()), "sigmoid")

    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    r = rng.standard_normal((3, 2))
    ga = _maybe_fault(fault, "matmul", r @ b.T)
    _compare(errors, ga, fd(lambda v: inner(r, matmul(v, b)), a.copy()), "matmul.a")
    _compare(errors, a.T @ r, fd(lambda v: inner(r, matmul(a, v)), b.copy()), "matmul.b")

    s = rng.standard_normal((4, 5))
    r = rng.standard_normal(s.shape)
    g = _maybe_fault(fault, "softmax", softmax_rows_backward(softmax_rows(s), r))
    _compare(errors, g, fd(lambda v: inner(r, softmax_rows(v)), s.copy()), "softmax_rows")
    return errors


def coattention_gradient_errors(rng, channels=8, side=2, fault=None):
    """Per-field relative errors for co-attention with ``N = side**2`` positions."""
    x = rng.standard_normal((side, side, channels))
    y = rng.standard_normal((side, side, channels))
    p = CoAttentionParams.init(channels, rng)
    p = p.copy(gamma1=0.7, gamma2=-0.4)
    rx = rng.standard_normal(x.shape)
    ry = rng.standard_normal(y.shape)

    def objective(xv, yv, params):
        xw, yw = coattention_forward(xv, yv, params)
        return inner(rx, xw) + inner(ry, yw)

    gx, gy, gp = coattention_backward(x, y, p, rx, ry)
    gx = _maybe_fault(fault, "coattention", gx)
    fd = oracles.numerical_gradient
    errors = {
        "x": oracles.relative_error(gx, fd(lambda v: objective(v, y, p), x.copy())),
        "y": oracles.relative_error(gy, fd(lambda v: objective(x, v, p), y.copy())),
    }
    for field in ("wf", "wg", "wh1", "wh2"):
        base = getattr(p, field).copy()
        num = fd(lambda v, f=field: objective(x, y, p.copy(**{f: v})), base)
        errors[field] = oracles.relative_error(getattr(gp, field), num)
    for field in ("gamma1", "gamma2"):
        base = np.array([getattr(p, field)])
        num = fd(lambda v, f=field: objective(x, y, p.copy(**{f: float(v[0])})), base)
        errors[field] = oracles.relative_error([getattr(gp, field)], num)
    return errors


def gradient_check_network(seed=0, gain=3.0, gamma=0.7):
    """Small network, images and masks used for the full-network gradient check.

    ``gain`` is the init bound multiplier (bound ``gain / sqrt(fan_in)``).  It
    is large enough that no parameter's gradient drowns in finite-difference
    noise and small enough that the sigmoid head stays unsaturated.
    """
    cfg = NetworkConfig(input_size=8, input_channels=3, encoder_channels=(4, 8),
                        feature_channels=8, attention_reduction=8, final_channels=4)
    params = NetworkParams.init(cfg, seed=seed, gain=gain)
    params["cam.gamma"] = np.array([gamma])
    rng = np.random.default_rng(seed + 1)
    i1 = rng.random((8, 8, 3))
    i2 = rng.random((8, 8, 3))
    g1 = (rng.random((8, 8)) < 0.4).astype(np.float64)
    g2 = (rng.random((8, 8)) < 0.4).astype(np.float64)
    return params, (i1, i2, g1, g2)


def network_gradient_errors(seed=0, fault=None, h=1e-5):
    params, (i1, i2, g1, g2) = gradient_check_network(seed)
    _, grads = forward_backward_pair(i1, i2, g1, g2, params)
    errors = {}
    for name in params.names():
        analytic = _maybe_fault(fault, "network", grads[name]) if name == "pred.w" else grads[name]
        tensor = params.tensors[name]  # perturbed in place, restored by the FD helper
        num = oracles.numerical_gradient(lambda _: pair_loss(i1, i2, g1, g2, params), tensor, h=h)
        errors[name] = oracles.relative_error(analytic, num)
    return errors


def _worst(errors):
    label = max(errors, key=errors.get)
    return errors[label], label


def check_gradients(seed=0, fault=None):
    out = []
    for name, fn, tol in (
        ("gradient.primitives", lambda: primitive_gradient_errors(np.random.default_rng(seed), fault),
         PRIMITIVE_TOL),
        ("gradient.coattention", lambda: coattention_gradient_errors(np.random.default_rng(seed), fault=fault),
         COATTENTION_TOL),
        ("gradient.network", lambda: network_gradient_errors(seed, fault=fault), NETWORK_TOL),
    ):
        t0 = time.perf_counter()
        worst, label = _worst(fn())
        out.append(CheckResult(name, worst < tol, worst, tol, f"worst={label}",
                               time.perf_counter() - t0))
    return out


# --- attention algebra -------------------------------------------------------

def attention_algebra(seed=0, trials=20):
    """Returns ``(max slice-sum error, identity_ok, swap_ok)``."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    identity_ok = True
    swap_ok = True
    for _ in range(trials):
        side = int(rng.integers(2, 5))
        c = int(rng.choice([8, 16]))
        x = rng.standard_normal((side, side, c)) * rng.uniform(0.5, 3.0)
        y = rng.standard_normal((side, side, c)) * rng.uniform(0.5, 3.0)
        p = CoAttentionParams.init(c, rng).copy(gamma1=rng.standard_normal(), gamma2=rng.standard_normal())
        att = attend(x, y, p)
        for amap in (att.alpha_x, att.alpha_y):
            worst = max(worst, float(np.max(np.abs(amap.slice_sums() - 1.0))))
        xw, yw = coattention_forward(x, y, p.copy(gamma1=0.0, gamma2=0.0))
        identity_ok &= np.array_equal(xw, x) and np.array_equal(yw, y)
        xw, yw = coattention_forward(x, y, p)
        yw2, xw2 = coattention_forward(y, x, p.swapped())
        swap_ok &= np.array_equal(xw, xw2) and np.array_equal(yw, yw2)
    # the full network shares one co-attention, so swapping images swaps maps
    params, (i1, i2, _, _) = gradient_check_network(seed)
    p1, p2, _ = forward_pair(i1, i2, params)
    q2, q1, _ = forward_pair(i2, i1, params)
    swap_ok &= np.array_equal(p1, q1) and np.array_equal(p2, q2)
    return worst, bool(identity_ok), bool(swap_ok)


def check_attention(seed=0):
    t0 = time.perf_counter()
    worst, identity_ok, swap_ok = attention_algebra(seed)
    ok = worst <= 1e-9 and identity_ok and swap_ok
    detail = f"identity={'ok' if identity_ok else 'BROKEN'} swap={'ok' if swap_ok else 'BROKEN'}"
    return CheckResult("attention.algebra", ok, worst, 1e-9, detail, time.perf_counter() - t0)


# --- adjointness -------------------------------------------------------------

def _compatible_size(rng, k, stride, pad):
    base = k - 2 * pad
    lowest = max(1, -(-(1 - base) // stride))  # smallest multiple giving size >= 1
    return base + stride * int(rng.integers(lowest, lowest + 4))


def adjoint_errors(seed=0, instances=50):
    """Relative gaps ``|<conv x, y> - <x, deconv y>|`` over random instances.

    Sizes are shape-compatible: ``(h + 2 pad - k)`` is a multiple of the
    stride, so the deconvolution restores exactly the input size.
    """
    rng = np.random.default_rng(seed)
    gaps = []
    for _ in range(instances):
        kh = int(rng.integers(1, 5))
        kw = int(rng.integers(1, 5))
        stride = int(rng.integers(1, 4))
        pad = int(rng.integers(0, min(kh, kw)))
        cin = int(rng.integers(1, 5))
        cout = int(rng.integers(1, 5))
        h = _compatible_size(rng, kh, stride, pad)
        w = _compatible_size(rng, kw, stride, pad)
        w_t = rng.standard_normal((kh, kw, cin, cout))
        x = rng.standard_normal((h, w, cin))
        cx = conv2d(x, ConvKernel(w_t, np.zeros(cout), stride), pad)
        y = rng.standard_normal(cx.shape)
        ty = deconv2d(y, ConvKernel(w_t, np.zeros(cin), stride), pad)
        a = inner(cx, y)
        b = inner(x, ty)
        gaps.append(abs(a - b) / max(1.0, abs(a), abs(b)))
    return gaps


def check_adjoint(seed=0):
    t0 = time.perf_counter()
    worst = max(adjoint_errors(seed))
    return CheckResult("adjoint.deconv", worst <= ADJOINT_TOL, worst, ADJOINT_TOL,
                       "50 instances", time.perf_counter() - t0)


# --- metrics -----------------------------------------------------------------

def random_map_pair(rng, size=8):
    """Random map (quantization-friendly and arbitrary values mixed) and a
    mask with at least one foreground and one background pixel."""
    while True:
        g = rng.random((size, size)) < rng.uniform(0.1, 0.9)
        if g.any() and not g.all():
            break
    if rng.random() < 0.5:
        s = rng.integers(0, 256, (size, size)) / 255.0
    else:
        s = rng.random((size, size))
    return s, g


def metric_oracle_gaps(seed=0, pairs=100):
    """Largest deviations from the oracles.

    Keys: ``counts`` (number of threshold/pair combinations whose integer
    confusion counts differ), ``curves``, ``f_beta``, ``mae``, ``auc``, ``ap``.
    """
    rng = np.random.default_rng(seed)
    gaps = dict(counts=0, curves=0.0, f_beta=0.0, mae=0.0, auc=0.0, ap=0.0)
    for _ in range(pairs):
        s, g = random_map_pair(rng)
        tp, fp, fn, tn = metrics.confusion_counts(s, g)
        otp, ofp, ofn, otn = oracles.confusion_loops(s, g)
        for fast, slow in ((tp, otp), (fp, ofp), (fn, ofn), (tn, otn)):
            gaps["counts"] += int(np.sum(np.asarray(fast) != np.asarray(slow)))
        opr, oroc = oracles.curves_loops(s, g)
        pr = metrics.pr_curve(s, g)
        roc = metrics.roc_curve(s, g)
        gaps["curves"] = max(gaps["curves"], float(np.max(np.abs(pr - np.array(opr)))),
                             float(np.max(np.abs(roc - np.array(oroc)))))
        hand_f = max((1.3 * p * r / (0.3 * p + r)) if (0.3 * p + r) > 0 else 0.0 for p, r in opr)
        gaps["f_beta"] = max(gaps["f_beta"], abs(metrics.f_beta_report(s, g) - hand_f))
        hand_mae = sum(abs(float(s[i, j]) - float(g[i, j])) for i in range(8) for j in range(8)) / 64
        gaps["mae"] = max(gaps["mae"], abs(metrics.mae(s, g) - hand_mae))
        gaps["auc"] = max(gaps["auc"], abs(metrics.auc(roc) - oracles.auc_rectangles(oroc)))
        gaps["ap"] = max(gaps["ap"], abs(metrics.ap(pr) - oracles.ap_rectangles(opr)))
    return gaps


def reference_metric_gaps(seed=0, pairs=20):
    """Weighted F and S-measure against their loop implementations.

    For weighted F the foreground error is held constant so that the
    nearest-foreground choice for background pixels cannot depend on
    tie-breaking.  S-measure gets unconstrained maps: a constant region
    would hit its exact-zero-variance branch, where summation order alone
    decides the outcome.
    """
    rng = np.random.default_rng(seed)
    wf = sm = 0.0
    for _ in range(pairs):
        s, g = random_map_pair(rng)
        sm = max(sm, abs(metrics.s_measure(s, g) - oracles.s_measure_loops(s, g)))
        s[g] = rng.random()
        wf = max(wf, abs(metrics.f_beta_weighted(s, g) - oracles.weighted_f_loops(s, g)))
    return wf, sm


def check_metrics(seed=0):
    t0 = time.perf_counter()
    gaps = metric_oracle_gaps(seed)
    ok = (gaps["counts"] == 0 and gaps["curves"] == 0.0 and gaps["f_beta"] <= 1e-12
          and gaps["mae"] <= 1e-12 and gaps["auc"] <= 1e-9 and gaps["ap"] <= 1e-9)
    worst = max(gaps["f_beta"], gaps["mae"], gaps["auc"], gaps["ap"], gaps["curves"])
    detail = " ".join(f"{k}={v:.1e}" if isinstance(v, float) else f"{k}={v}" for k, v in gaps.items())
    res = [CheckResult("metrics.oracle", ok, worst, 1e-9, detail, time.perf_counter() - t0)]
    t0 = time.perf_counter()
    wf, sm = reference_metric_gaps(seed)
    res.append(CheckResult("metrics.reference", max(wf, sm) <= 1e-12, max(wf, sm), 1e-12,
                           f"f_beta_w={wf:.1e} s_measure={sm:.1e}", time.perf_counter() - t0))
    return res


# --- loss --------------------------------------------------------------------

def loss_closed_form():
    """Loss at ``p = 0.5`` on a half-foreground mask, and its FD gradient gap."""
    p = np.full((4, 4), 0.5)
    g = np.zeros((4, 4))
    g[:2] = 1.0
    cfg = LossConfig(eta=0.3)
    loss, _ = weighted_bce(p, g, cfg)
    rng = np.random.default_rng(0)
    q = rng.uniform(0.05, 0.95, (4, 4))
    _, grad = weighted_bce(q, g, cfg)
    num = oracles.numerical_gradient(lambda v: weighted_bce(v, g, cfg)[0], q.copy(), h=1e-6)
    return loss, float(np.max(np.abs(grad - num)))


def check_loss():
    t0 = time.perf_counter()
    loss, gap = loss_closed_form()
    err = abs(loss - LOSS_EXPECTED)
    ok = err <= LOSS_TOL and gap <= LOSS_GRAD_TOL
    return CheckResult("loss.closed_form", ok, err, LOSS_TOL,
                       f"loss={loss:.6f} grad_gap={gap:.1e}", time.perf_counter() - t0)


def run_selftest(seed=0, fault=None):
    if fault is None:
        fault = os.environ.get(FAULT_ENV) or None
    results = check_gradients(seed, fault)
    results.append(check_attention(seed))
    results.append(check_adjoint(seed))
    results.extend(check_metrics(seed))
    results.append(check_loss())
    for r in results:
        if not math.isfinite(r.value):
            r.passed = False
    return results
