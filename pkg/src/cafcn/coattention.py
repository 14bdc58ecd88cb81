"""Co-attention between two feature maps, and its group-average extension.

Both inputs are ``H x W x C`` maps, flattened to ``N x C`` with ``N = H*W``
(row-major positions).  One affinity matrix ``S[i, j] = <f(x_i), g(y_j)>``
is shared by the two directions:

* ``alpha_x`` normalizes ``S`` over ``j`` (rows) and mixes ``h2(y_j)`` into
  every position ``i`` of ``x``;
* ``alpha_y`` normalizes ``S`` over ``i`` (columns) and mixes ``h1(x_i)``
  into every position ``j`` of ``y``.

The attended features come back through a residual gate:
``x_w = gamma1 * o_x + x`` and ``y_w = gamma2 * o_y + y``.

Projections are bias-free ``C x C'`` matrices (1x1 convolutions without
bias) applied on the right of the ``N x C`` feature matrix.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor, softmax_rows, softmax_rows_backward


@dataclass
class CoAttentionParams:
    wf: Tensor
    wg: Tensor
    wh1: Tensor
    wh2: Tensor
    gamma1: float = 0.0
    gamma2: float = 0.0

    def __post_init__(self):
        self.wf = as_tensor(self.wf, rank=2)
        self.wg = as_tensor(self.wg, rank=2)
        self.wh1 = as_tensor(self.wh1, rank=2)
        self.wh2 = as_tensor(self.wh2, rank=2)
        c, cr = self.wf.shape
        if self.wg.shape != (c, cr):
            raise DimensionError(f"wf {self.wf.shape} and wg {self.wg.shape} differ")
        if self.wh1.shape != (c, c) or self.wh2.shape != (c, c):
            raise DimensionError("value projections must be C x C")
        self.gamma1 = float(self.gamma1)
        self.gamma2 = float(self.gamma2)

    @property
    def channels(self):
        return self.wf.shape[0]

    @classmethod
    def init(cls, channels, rng, reduction=8, reduced=None):
        """Uniform(-1/sqrt(C), 1/sqrt(C)) projections, gates at zero.

        ``reduced`` overrides the ``C / reduction`` key/query width; tests use
        it to build the ``C' = C`` identity configuration.
        """
        if reduced is None:
            if channels % reduction:
                raise DimensionError(f"channels {channels} not divisible by {reduction}")
            reduced = channels // reduction
        bound = 1.0 / np.sqrt(channels)

        def u(*shape):
            return rng.uniform(-bound, bound, size=shape)

        return cls(u(channels, reduced), u(channels, reduced),
                   u(channels, channels), u(channels, channels), 0.0, 0.0)

    def swapped(self):
        """Parameters for running the module with its inputs exchanged."""
        return CoAttentionParams(self.wg, self.wf, self.wh2, self.wh1, self.gamma2, self.gamma1)

    def zeros_like(self):
        return CoAttentionParams(np.zeros_like(self.wf), np.zeros_like(self.wg),
                                 np.zeros_like(self.wh1), np.zeros_like(self.wh2), 0.0, 0.0)

    def copy(self, **changes):
        base = CoAttentionParams(self.wf.copy(), self.wg.copy(), self.wh1.copy(),
                                 self.wh2.copy(), self.gamma1, self.gamma2)
        return replace(base, **changes) if changes else base


@dataclass
class AttentionMap:
    """``N x N`` attention weights.

    ``axis`` is the axis of ``alpha`` that sums to one: 1 when every row is
    a distribution (normalized over ``j``), 0 when every column is.
    """

    alpha: Tensor
    axis: int

    def slice_sums(self):
        return self.alpha.sum(axis=self.axis)


@dataclass
class Attended:
    o_x: Tensor
    o_y: Tensor
    alpha_x: AttentionMap
    alpha_y: AttentionMap
    cache: dict = field(default_factory=dict, repr=False)


def _flatten_pair(x, y, params):
    x = as_tensor(x, rank=3)
    y = as_tensor(y, rank=3)
    if x.shape != y.shape:
        raise DimensionError(f"co-attention inputs differ in shape: {x.shape} vs {y.shape}")
    if x.shape[2] != params.channels:
        raise DimensionError(f"features have {x.shape[2]} channels, params expect {params.channels}")
    c = x.shape[2]
    return x.reshape(-1, c), y.reshape(-1, c)


def _mm(a, b):
    # contiguous operands keep BLAS on one code path, so mirrored inputs
    # produce bitwise mirrored outputs
    return np.ascontiguousarray(a) @ np.ascontiguousarray(b)


def _affinity_flat(fx, gy):
    # explicit sum of outer products: S(a, b) is exactly S(b, a).T
    s = np.zeros((fx.shape[0], gy.shape[0]))
    for c in range(fx.shape[1]):
        s += fx[:, c, None] * gy[None, :, c]
    return s


def affinity(x: Tensor, y: Tensor, params: CoAttentionParams) -> Tensor:
    """``S[i, j] = <Wf x_i, Wg y_j>`` over flattened positions."""
    xf, yf = _flatten_pair(x, y, params)
    return _affinity_flat(_mm(xf, params.wf), _mm(yf, params.wg))


def _column_softmax(s):
    return softmax_rows(np.ascontiguousarray(s.T)).T


def attend(x: Tensor, y: Tensor, params: CoAttentionParams) -> Attended:
    xf, yf = _flatten_pair(x, y, params)
    fx = _mm(xf, params.wf)
    gy = _mm(yf, params.wg)
    s = _affinity_flat(fx, gy)
    ax = softmax_rows(s)
    ay = _column_softmax(s)
    h1 = _mm(xf, params.wh1)
    h2 = _mm(yf, params.wh2)
    o_x = _mm(ax, h2)
    o_y = _mm(ay.T, h1)
    cache = dict(xf=xf, yf=yf, fx=fx, gy=gy, h1=h1, h2=h2)
    return Attended(o_x, o_y, AttentionMap(ax, axis=1), AttentionMap(ay, axis=0), cache)


def coattention_forward(x: Tensor, y: Tensor, params: CoAttentionParams):
    """Return the gated, attention-weighted maps ``(x_w, y_w)``."""
    x = as_tensor(x, rank=3)
    y = as_tensor(y, rank=3)
    att = attend(x, y, params)
    x_w = params.gamma1 * att.o_x.reshape(x.shape) + x
    y_w = params.gamma2 * att.o_y.reshape(y.shape) + y
    return x_w, y_w


def coattention_backward(x: Tensor, y: Tensor, params: CoAttentionParams,
                         grad_xw: Tensor, grad_yw: Tensor):
    """Exact gradients of ``<grad_xw, x_w> + <grad_yw, y_w>``.

    Returns ``(grad_x, grad_y, grad_params)`` with ``grad_params`` a
    ``CoAttentionParams`` holding the gradient of every field.
    """
    x = as_tensor(x, rank=3)
    y = as_tensor(y, rank=3)
    grad_xw = as_tensor(grad_xw)
    grad_yw = as_tensor(grad_yw)
    if grad_xw.shape != x.shape or grad_yw.shape != y.shape:
        raise DimensionError("upstream gradients must match the forward outputs")
    att = attend(x, y, params)
    k = att.cache
    ax, ay = att.alpha_x.alpha, att.alpha_y.alpha
    c = x.shape[2]
    gxw = grad_xw.reshape(-1, c)
    gyw = grad_yw.reshape(-1, c)

    g_gamma1 = float(np.sum(gxw * att.o_x))
    g_gamma2 = float(np.sum(gyw * att.o_y))
    g_ox = params.gamma1 * gxw
    g_oy = params.gamma2 * gyw

    # o_x = ax @ h2 ; o_y = ay.T @ h1
    g_ax = _mm(g_ox, k["h2"].T)
    g_h2 = _mm(ax.T, g_ox)
    g_ay = _mm(k["h1"], g_oy.T)
    g_h1 = _mm(ay, g_oy)

    g_s = softmax_rows_backward(ax, g_ax)
    g_s += softmax_rows_backward(ay.T, g_ay.T).T

    g_fx = _mm(g_s, k["gy"])
    g_gy = _mm(g_s.T, k["fx"])

    xf, yf = k["xf"], k["yf"]
    grads = CoAttentionParams(
        wf=_mm(xf.T, g_fx),
        wg=_mm(yf.T, g_gy),
        wh1=_mm(xf.T, g_h1),
        wh2=_mm(yf.T, g_h2),
        gamma1=g_gamma1,
        gamma2=g_gamma2,
    )
    g_x = gxw + _mm(g_fx, params.wf.T) + _mm(g_h1, params.wh1.T)
    g_y = gyw + _mm(g_gy, params.wg.T) + _mm(g_h2, params.wh2.T)
    return g_x.reshape(x.shape), g_y.reshape(y.shape), grads


@dataclass
class GroupAttention:
    """Result of group-average attention over ``n`` feature maps.

    ``weighted[k]`` is image ``k``'s co-attention weighted feature and
    ``partners[k]`` the partner-side feature it should be concatenated with.
    For ``n > 2`` every partner is the single ``shared`` representation.
    """

    shared: Tensor
    weighted: list
    partners: list
    attention: list


def group_average_attention(features, params: CoAttentionParams) -> GroupAttention:
    """Co-attention for a group in ``O(n)``.

    Two images take the ordinary pairwise path.  For more, each image is
    attended once against the group's mean feature map; the mean-side
    outputs are averaged into one shared representation.
    """
    features = [as_tensor(f, rank=3) for f in features]
    n = len(features)
    if n < 2:
        raise ValueError("group attention needs at least two feature maps")
    shape = features[0].shape
    if any(f.shape != shape for f in features):
        raise DimensionError("all group features must share one shape")

    if n == 2:
        x_w, y_w = coattention_forward(features[0], features[1], params)
        att = attend(features[0], features[1], params)
        return GroupAttention(0.5 * (x_w + y_w), [x_w, y_w], [y_w, x_w],
                              [att.alpha_x, att.alpha_y])

    mean = np.mean(np.stack(features), axis=0)
    weighted, partner_side, attention = [], [], []
    for f in features:
        att = attend(f, mean, params)
        weighted.append(params.gamma1 * att.o_x.reshape(shape) + f)
        partner_side.append(params.gamma2 * att.o_y.reshape(shape) + mean)
        attention.append(att.alpha_x)
    shared = np.mean(np.stack(partner_side), axis=0)
    return GroupAttention(shared, weighted, [shared] * n, attention)
