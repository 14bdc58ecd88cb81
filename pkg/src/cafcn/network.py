"""The twin-branch co-attention FCN at desk scale.

Per branch: a small conv/relu/max-pool encoder, three extra convolutions,
then (jointly) co-attention.  Each branch concatenates its own weighted
feature with its partner's, squeezes the pair through two consistency
convolutions, merges the result back with its own weighted feature and
decodes with stride-2 transposed convolutions, additive skip connections
from the encoder and a 1x1 sigmoid head.

Both branches share every parameter, including the co-attention
projections (``Wf = Wg``, ``Wh1 = Wh2``, ``gamma1 = gamma2``), so swapping
the inputs swaps the outputs exactly.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .coattention import (CoAttentionParams, coattention_backward, coattention_forward,
                          group_average_attention)
from .losses import LossConfig, check_binary, weighted_bce, weighted_bce_logit_grad
from .tensor import (ConvKernel, DimensionError, as_tensor, conv2d, conv2d_backward, deconv2d,
                     deconv2d_backward, maxpool2, maxpool2_backward, relu, relu_backward, sigmoid)

DECONV_KERNEL = 4
DECONV_STRIDE = 2
DECONV_PAD = 1
INIT_GAIN = float(np.sqrt(6.0))


@dataclass(frozen=True)
class NetworkConfig:
    input_size: int = 32
    input_channels: int = 3
    encoder_channels: tuple = (8, 16, 32)
    feature_channels: int = 32
    attention_reduction: int = 8
    skip_stages: tuple = None  # default: every stage the decoder passes through
    final_channels: int = 4

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        if self.skip_stages is None:
            object.__setattr__(self, "skip_stages", tuple(range(self.stages - 1)))
        else:
            object.__setattr__(self, "skip_stages", tuple(sorted(int(s) for s in self.skip_stages)))
        self.validate()

    @property
    def stages(self):
        return len(self.encoder_channels)

    @property
    def encoded_size(self):
        return self.input_size // 2 ** self.stages

    def validate(self):
        if self.stages < 1:
            raise ValueError("need at least one encoder stage")
        if min(self.encoder_channels) < 1 or self.feature_channels < 1 or self.final_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.feature_channels % self.attention_reduction:
            raise ValueError(f"feature channels {self.feature_channels} not divisible by "
                             f"attention reduction {self.attention_reduction}")
        if self.input_size % 2 ** self.stages:
            raise ValueError(f"input size {self.input_size} not divisible by 2^{self.stages}")
        if self.encoded_size < 2:
            raise ValueError("encoded feature map must be at least 2x2")
        if any(s < 0 or s >= self.stages - 1 for s in self.skip_stages):
            raise ValueError(f"skip stages must lie in [0, {self.stages - 2}]")

    def to_ints(self):
        return [self.input_size, self.input_channels, self.feature_channels,
                self.attention_reduction, self.final_channels,
                self.stages, *self.encoder_channels,
                len(self.skip_stages), *self.skip_stages]

    @classmethod
    def from_ints(cls, ints):
        ints = [int(v) for v in ints]
        size, cin, feat, red, final, n_enc = ints[:6]
        enc = tuple(ints[6:6 + n_enc])
        n_skip = ints[6 + n_enc]
        skips = tuple(ints[7 + n_enc:7 + n_enc + n_skip])
        return cls(size, cin, enc, feat, red, skips, final)


def param_layout(cfg: NetworkConfig):
    """Ordered ``(name, shape, fan_in)`` of every trainable tensor.

    This order is the checkpoint order.
    """
    c = cfg.feature_channels
    wide = 2 * c
    out = []

    def conv(name, k, cin, cout):
        out.append((name + ".w", (k, k, cin, cout), k * k * cin))
        out.append((name + ".b", (cout,), k * k * cin))

    cin = cfg.input_channels
    for i, ch in enumerate(cfg.encoder_channels):
        conv(f"enc{i}", 3, cin, ch)
        cin = ch
    conv("add1", 3, cin, wide)
    conv("add2", 1, wide, wide)
    conv("add3", 1, wide, c)
    out.append(("cam.wf", (c, c // cfg.attention_reduction), c))
    out.append(("cam.wh", (c, c), c))
    out.append(("cam.gamma", (1,), 1))
    conv("cons4", 3, 2 * c, c)
    conv("cons5", 1, c, c)
    conv("merge6", 1, 2 * c, c)
    din = c
    for t, dout in enumerate(_decoder_channels(cfg)):
        fan = (DECONV_KERNEL // DECONV_STRIDE) ** 2 * din
        out.append((f"dec{t}.w", (DECONV_KERNEL, DECONV_KERNEL, dout, din), fan))
        out.append((f"dec{t}.b", (dout,), fan))
        din = dout
    for s in cfg.skip_stages:
        ch = cfg.encoder_channels[s]
        conv(f"skip{s}", 1, ch, ch)
    conv("pred", 1, cfg.final_channels, 1)
    return out


def _decoder_channels(cfg):
    n = cfg.stages
    return [cfg.encoder_channels[n - 2 - t] for t in range(n - 1)] + [cfg.final_channels]


class NetworkParams:
    """Named float64 tensors in ``param_layout`` order."""

    def __init__(self, config: NetworkConfig, tensors: dict):
        self.config = config
        layout = param_layout(config)
        missing = [name for name, _, _ in layout if name not in tensors]
        if missing:
            raise DimensionError(f"missing parameters: {missing}")
        self.tensors = {}
        for name, shape, _ in layout:
            t = as_tensor(tensors[name])
            if t.shape != tuple(shape):
                raise DimensionError(f"{name}: expected shape {shape}, got {t.shape}")
            self.tensors[name] = t

    @classmethod
    def init(cls, config: NetworkConfig, seed=0, gain=INIT_GAIN):
        """Uniform(-gain/sqrt(fan_in), gain/sqrt(fan_in)) weights and biases; gamma = 0.

        The default gain sqrt(6) is He-uniform; gain 1 gives the plain
        1/sqrt(fan_in) bound, which starves this relu stack of signal.
        """
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape, fan_in in param_layout(config):
            if name == "cam.gamma":
                tensors[name] = np.zeros(shape)
                continue
            bound = gain / np.sqrt(fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        return cls(config, tensors)

    def names(self):
        return list(self.tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        value = as_tensor(value)
        if value.shape != self.tensors[name].shape:
            raise DimensionError(f"{name}: shape {value.shape} != {self.tensors[name].shape}")
        self.tensors[name] = value

    def items(self):
        return self.tensors.items()

    def copy(self):
        return NetworkParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self):
        return NetworkParams(self.config, {k: np.zeros_like(v) for k, v in self.tensors.items()})

    def size(self):
        return sum(v.size for v in self.tensors.values())

    def all_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())

    def kernel(self, prefix, stride=1):
        return ConvKernel(self.tensors[prefix + ".w"], self.tensors[prefix + ".b"], stride)

    def coattention(self):
        wf = self.tensors["cam.wf"]
        wh = self.tensors["cam.wh"]
        gamma = float(self.tensors["cam.gamma"][0])
        return CoAttentionParams(wf, wf, wh, wh, gamma, gamma)


# --- per-branch pieces -------------------------------------------------------

def _encode(params, image):
    cfg = params.config
    image = as_tensor(image, rank=3)
    expected = (cfg.input_size, cfg.input_size, cfg.input_channels)
    if image.shape != expected:
        raise DimensionError(f"image shape {image.shape} != {expected}")
    cache = {"stages": [], "extra": []}
    h = image
    skips = []
    for i in range(cfg.stages):
        pre = conv2d(h, params.kernel(f"enc{i}"), padding=1)
        pooled, idx = maxpool2(relu(pre))
        cache["stages"].append((h, pre, idx))
        skips.append(pooled)
        h = pooled
    for name, pad in (("add1", 1), ("add2", 0), ("add3", 0)):
        pre = conv2d(h, params.kernel(name), padding=pad)
        cache["extra"].append((name, pad, h, pre))
        h = relu(pre)
    return h, skips, cache


def _encode_backward(params, cache, g_feature, g_skips, grads):
    g = g_feature
    for name, pad, inp, pre in reversed(cache["extra"]):
        g = relu_backward(pre, g)
        g, gw, gb = conv2d_backward(inp, params.kernel(name), g, padding=pad)
        grads[name + ".w"] += gw
        grads[name + ".b"] += gb
    for i in reversed(range(len(cache["stages"]))):
        if g_skips[i] is not None:
            g = g + g_skips[i]
        inp, pre, idx = cache["stages"][i]
        g = relu_backward(pre, maxpool2_backward(g, idx))
        g, gw, gb = conv2d_backward(inp, params.kernel(f"enc{i}"), g, padding=1)
        grads[f"enc{i}.w"] += gw
        grads[f"enc{i}.b"] += gb


def _head(params, own, partner, skips):
    """Consistency, merge and decoder for one branch; returns (prob, logit, cache)."""
    cfg = params.config
    cache = {}
    cat = np.concatenate([own, partner], axis=2)
    pre4 = conv2d(cat, params.kernel("cons4"), padding=1)
    a4 = relu(pre4)
    pre5 = conv2d(a4, params.kernel("cons5"))
    consistency = relu(pre5)
    merged_in = np.concatenate([consistency, own], axis=2)
    pre6 = conv2d(merged_in, params.kernel("merge6"))
    h = relu(pre6)
    cache.update(cat=cat, pre4=pre4, a4=a4, pre5=pre5, merged_in=merged_in, pre6=pre6)
    dec = []
    n = cfg.stages
    for t in range(n):
        pre = deconv2d(h, params.kernel(f"dec{t}", DECONV_STRIDE), padding=DECONV_PAD)
        stage = n - 2 - t
        if t < n - 1 and stage in cfg.skip_stages:
            pre = pre + conv2d(skips[stage], params.kernel(f"skip{stage}"))
        dec.append((h, pre))
        h = relu(pre)
    cache["dec"] = dec
    cache["top"] = h
    logit = conv2d(h, params.kernel("pred"))
    return sigmoid(logit), logit, cache


def _head_backward(params, cache, skips, g_logit, grads):
    """Returns gradients w.r.t. (own, partner) and the per-stage skip inputs."""
    cfg = params.config
    n = cfg.stages
    g_skips = [None] * n
    g, gw, gb = conv2d_backward(cache["top"], params.kernel("pred"), g_logit)
    grads["pred.w"] += gw
    grads["pred.b"] += gb
    for t in reversed(range(n)):
        inp, pre = cache["dec"][t]
        g = relu_backward(pre, g)
        stage = n - 2 - t
        if t < n - 1 and stage in cfg.skip_stages:
            gs, gw, gb = conv2d_backward(skips[stage], params.kernel(f"skip{stage}"), g)
            grads[f"skip{stage}.w"] += gw
            grads[f"skip{stage}.b"] += gb
            g_skips[stage] = gs
        g, gw, gb = deconv2d_backward(inp, params.kernel(f"dec{t}", DECONV_STRIDE), g,
                                      padding=DECONV_PAD)
        grads[f"dec{t}.w"] += gw
        grads[f"dec{t}.b"] += gb
    c = cfg.feature_channels
    g = relu_backward(cache["pre6"], g)
    g, gw, gb = conv2d_backward(cache["merged_in"], params.kernel("merge6"), g)
    grads["merge6.w"] += gw
    grads["merge6.b"] += gb
    g_cons, g_own = g[..., :c], g[..., c:]
    g = relu_backward(cache["pre5"], g_cons)
    g, gw, gb = conv2d_backward(cache["a4"], params.kernel("cons5"), g)
    grads["cons5.w"] += gw
    grads["cons5.b"] += gb
    g = relu_backward(cache["pre4"], g)
    g, gw, gb = conv2d_backward(cache["cat"], params.kernel("cons4"), g, padding=1)
    grads["cons4.w"] += gw
    grads["cons4.b"] += gb
    g_own = g_own + g[..., :c]
    g_partner = np.ascontiguousarray(g[..., c:])
    return np.ascontiguousarray(g_own), g_partner, g_skips


# --- public operations -------------------------------------------------------

def encode(image, params: NetworkParams):
    """Encoder features and the pooled output of every stage (skip sources)."""
    feature, skips, _ = _encode(params, image)
    return feature, skips


@dataclass
class PairTrace:
    features: tuple
    weighted: tuple
    logits: tuple
    caches: dict = field(repr=False, default_factory=dict)


def forward_pair(i1, i2, params: NetworkParams):
    """Co-saliency maps ``(p1, p2)``, each ``S x S x 1`` in (0, 1), plus a trace."""
    f1, s1, e1 = _encode(params, i1)
    f2, s2, e2 = _encode(params, i2)
    x_w, y_w = coattention_forward(f1, f2, params.coattention())
    p1, z1, h1 = _head(params, x_w, y_w, s1)
    p2, z2, h2 = _head(params, y_w, x_w, s2)
    trace = PairTrace((f1, f2), (x_w, y_w), (z1, z2),
                      dict(enc=(e1, e2), head=(h1, h2), skips=(s1, s2)))
    return p1, p2, trace


def pair_loss(i1, i2, g1, g2, params, loss_cfg=LossConfig()):
    """Mean of the two branch losses (forward only)."""
    p1, p2, _ = forward_pair(i1, i2, params)
    g1 = as_tensor(g1).reshape(p1.shape)
    g2 = as_tensor(g2).reshape(p2.shape)
    return 0.5 * (weighted_bce(p1, g1, loss_cfg)[0] + weighted_bce(p2, g2, loss_cfg)[0])


def forward_backward_pair(i1, i2, g1, g2, params: NetworkParams, eta=0.3, loss_cfg=None):
    """Mean branch loss and its gradient for every parameter.

    ``g1``/``g2`` may be ``S x S`` or ``S x S x 1``; they must be binary.
    """
    if loss_cfg is None:
        loss_cfg = LossConfig(eta=eta)
    p1, p2, trace = forward_pair(i1, i2, params)
    g1 = check_binary(g1).reshape(p1.shape)
    g2 = check_binary(g2).reshape(p2.shape)
    l1, gz1 = weighted_bce_logit_grad(p1, g1, loss_cfg)
    l2, gz2 = weighted_bce_logit_grad(p2, g2, loss_cfg)
    grads = params.zeros_like()
    gt = grads.tensors
    h1, h2 = trace.caches["head"]
    s1, s2 = trace.caches["skips"]
    g_own1, g_part1, gs1 = _head_backward(params, h1, s1, 0.5 * gz1, gt)
    g_own2, g_part2, gs2 = _head_backward(params, h2, s2, 0.5 * gz2, gt)
    g_xw = g_own1 + g_part2
    g_yw = g_own2 + g_part1
    f1, f2 = trace.features
    gf1, gf2, gcam = coattention_backward(f1, f2, params.coattention(), g_xw, g_yw)
    gt["cam.wf"] += gcam.wf + gcam.wg
    gt["cam.wh"] += gcam.wh1 + gcam.wh2
    gt["cam.gamma"] += gcam.gamma1 + gcam.gamma2
    e1, e2 = trace.caches["enc"]
    _encode_backward(params, e1, gf1, gs1, gt)
    _encode_backward(params, e2, gf2, gs2, gt)
    return 0.5 * (l1 + l2), grads


def infer_group(images, params: NetworkParams, stats=None):
    """Co-saliency maps for ``n >= 2`` images with one encoder and one decoder pass each.

    ``stats``, when given, is a dict that receives ``encoder_calls`` and
    ``decoder_calls`` counts.
    """
    images = list(images)
    if len(images) < 2:
        raise ValueError("group inference needs at least two images")
    if stats is None:
        stats = {}
    stats.setdefault("encoder_calls", 0)
    stats.setdefault("decoder_calls", 0)
    feats, skips = [], []
    for img in images:
        f, s, _ = _encode(params, img)
        stats["encoder_calls"] += 1
        feats.append(f)
        skips.append(s)
    group = group_average_attention(feats, params.coattention())
    maps = []
    for w, q, s in zip(group.weighted, group.partners, skips):
        p, _, _ = _head(params, w, q, s)
        stats["decoder_calls"] += 1
        maps.append(p)
    return maps


# --- checkpoints -------------------------------------------------------------

MAGIC = b"CAFCN1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: NetworkConfig
    params: NetworkParams
    velocity: NetworkParams = None
    epoch: int = 0


def _write_tensor(fh, t):
    t = np.ascontiguousarray(t, dtype="<f8")
    fh.write(struct.pack("<I", t.ndim))
    fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
    fh.write(t.tobytes())


def save_checkpoint(path, params: NetworkParams, velocity: NetworkParams = None, epoch=0):
    """Write the binary checkpoint.

    Layout (little-endian): ``CAFCN1``; uint32 count + int64 config integers
    (see ``NetworkConfig.to_ints``); uint32 epoch; uint32 tensor count;
    uint32 velocity flag; then each parameter tensor in ``param_layout``
    order as uint32 rank, uint32 dims, raw float64 values; then, if the
    flag is set, the velocity tensors in the same order.
    """
    ints = params.config.to_ints()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(ints)))
        fh.write(struct.pack(f"<{len(ints)}q", *ints))
        fh.write(struct.pack("<III", int(epoch), len(params.tensors), 1 if velocity is not None else 0))
        for name in params.names():
            _write_tensor(fh, params[name])
        if velocity is not None:
            for name in params.names():
                _write_tensor(fh, velocity[name])


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self):
        (rank,) = self.unpack("<I")
        if rank > 4:
            raise CheckpointError(f"tensor rank {rank} > 4 at byte {self.pos - 4}")
        dims = self.unpack(f"<{rank}I")
        count = int(np.prod(dims)) if rank else 1
        raw = self.take(8 * count)
        return np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad magic at byte 0")
    (n_ints,) = r.unpack("<I")
    config = NetworkConfig.from_ints(r.unpack(f"<{n_ints}q"))
    epoch, n_tensors, has_velocity = r.unpack("<III")
    names = [name for name, _, _ in param_layout(config)]
    if n_tensors != len(names):
        raise CheckpointError(f"expected {len(names)} tensors, header says {n_tensors}")
    params = NetworkParams(config, {name: r.tensor() for name in names})
    velocity = None
    if has_velocity:
        velocity = NetworkParams(config, {name: r.tensor() for name in names})
    if r.pos != len(r.data):
        raise CheckpointError(f"trailing bytes after offset {r.pos}")
    return Checkpoint(config, params, velocity, epoch)
