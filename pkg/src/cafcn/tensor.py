"""Dense tensor primitives with hand-written backward passes.

Tensors are plain float64 numpy arrays.  Feature maps are laid out as
height x width x channels; matrices are rows x columns.  Convolution is
cross-correlation (no kernel flip).  Every function is pure: nothing is
mutated and pooling hands back its argmax indices instead of stashing them.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels

Tensor = np.ndarray


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_tensor(values, rank=None) -> Tensor:
    """Convert ``values`` to a C-contiguous float64 array of rank <= 4."""
    t = np.ascontiguousarray(values, dtype=np.float64)
    if t.ndim > 4:
        raise DimensionError(f"tensor rank {t.ndim} exceeds 4")
    if rank is not None and t.ndim != rank:
        raise DimensionError(f"expected rank {rank}, got shape {t.shape}")
    return t


@dataclass
class ConvKernel:
    """Weights ``kH x kW x inC x outC``, a bias and a stride.

    Used as a convolution the bias has ``outC`` entries.  Used as a transposed
    convolution the roles of the channel axes swap, so the bias then has
    ``inC`` entries (one per output channel of the deconvolution).
    """

    weights: Tensor
    bias: Tensor
    stride: int = 1

    def __post_init__(self):
        self.weights = as_tensor(self.weights, rank=4)
        self.bias = as_tensor(self.bias, rank=1)
        kh, kw = self.weights.shape[:2]
        if kh < 1 or kw < 1:
            raise DimensionError("kernel spatial size must be positive")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def shape(self):
        return self.weights.shape


def _check_feature(x):
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"feature map must be H x W x C, got shape {x.shape}")
    return x


def conv_output_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, k: ConvKernel, padding: int = 0) -> Tensor:
    x = _check_feature(x)
    kh, kw, cin, cout = k.weights.shape
    if x.shape[2] != cin:
        raise DimensionError(f"input has {x.shape[2]} channels, kernel expects {cin}")
    if k.bias.shape[0] != cout:
        raise DimensionError(f"bias length {k.bias.shape[0]} != out channels {cout}")
    h, w = x.shape[:2]
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h}x{w} (+{padding})")
    return kernels.conv2d_forward(x, k.weights, k.bias, k.stride, padding)


def conv2d_backward(x: Tensor, k: ConvKernel, grad_out: Tensor, padding: int = 0):
    """Gradients of ``<grad_out, conv2d(x, k)>`` w.r.t. input, weights and bias."""
    x = _check_feature(x)
    grad_out = _check_feature(grad_out)
    kh, kw, cin, cout = k.weights.shape
    if x.shape[2] != cin:
        raise DimensionError(f"input has {x.shape[2]} channels, kernel expects {cin}")
    h, w = x.shape[:2]
    expected = (conv_output_size(h, kh, k.stride, padding),
                conv_output_size(w, kw, k.stride, padding), cout)
    if grad_out.shape != expected:
        raise DimensionError(f"grad_out shape {grad_out.shape} != output shape {expected}")
    gx = kernels.conv2d_grad_input(grad_out, k.weights, k.stride, padding, h, w)
    gw = kernels.conv2d_grad_weight(x, grad_out, kh, kw, k.stride, padding)
    gb = grad_out.sum(axis=(0, 1))
    return gx, gw, gb


def deconv_output_size(n, k, stride, pad):
    return (n - 1) * stride + k - 2 * pad


def deconv2d(x: Tensor, k: ConvKernel, padding: int = 0) -> Tensor:
    """Transposed convolution: the adjoint of ``conv2d`` plus a bias.

    ``x`` carries ``outC`` channels of the kernel and the result has ``inC``.
    """
    x = _check_feature(x)
    kh, kw, cin, cout = k.weights.shape
    if x.shape[2] != cout:
        raise DimensionError(f"deconv input has {x.shape[2]} channels, kernel outC is {cout}")
    if k.bias.shape[0] != cin:
        raise DimensionError(f"deconv bias length {k.bias.shape[0]} != output channels {cin}")
    ho = deconv_output_size(x.shape[0], kh, k.stride, padding)
    wo = deconv_output_size(x.shape[1], kw, k.stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError("padding too large for transposed convolution")
    out = kernels.conv2d_grad_input(x, k.weights, k.stride, padding, ho, wo)
    out += k.bias
    return out


def deconv2d_backward(x: Tensor, k: ConvKernel, grad_out: Tensor, padding: int = 0):
    x = _check_feature(x)
    grad_out = _check_feature(grad_out)
    kh, kw, cin, cout = k.weights.shape
    if x.shape[2] != cout:
        raise DimensionError(f"deconv input has {x.shape[2]} channels, kernel outC is {cout}")
    expected = (deconv_output_size(x.shape[0], kh, k.stride, padding),
                deconv_output_size(x.shape[1], kw, k.stride, padding), cin)
    if grad_out.shape != expected:
        raise DimensionError(f"grad_out shape {grad_out.shape} != output shape {expected}")
    gx = kernels.conv2d_forward(grad_out, k.weights, np.zeros(cout), k.stride, padding)
    gw = kernels.conv2d_grad_weight(grad_out, x, kh, kw, k.stride, padding)
    gb = grad_out.sum(axis=(0, 1))
    return gx, gw, gb


def maxpool2(x: Tensor):
    """2x2 non-overlapping max pool.

    Returns the pooled map and, per output element, the row-major window
    index (0..3) of the winning input.  Ties go to the first index.
    """
    x = _check_feature(x)
    if x.shape[0] % 2 or x.shape[1] % 2:
        raise DimensionError(f"maxpool2 needs even spatial dims, got {x.shape[:2]}")
    return kernels.maxpool2_forward(x)


def maxpool2_backward(grad_out: Tensor, indices: np.ndarray) -> Tensor:
    grad_out = _check_feature(grad_out)
    if indices.shape != grad_out.shape:
        raise DimensionError("indices and grad_out shapes differ")
    return kernels.maxpool2_backward(grad_out, np.ascontiguousarray(indices, dtype=np.intp))


def relu(x: Tensor) -> Tensor:
    return np.maximum(as_tensor(x), 0.0)


def relu_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    return np.where(as_tensor(x) > 0.0, grad_out, 0.0)


_SIGMOID_HI = np.nextafter(1.0, 0.0)
_SIGMOID_LO = np.finfo(np.float64).tiny


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, evaluated without overflow and kept inside (0, 1)."""
    x = as_tensor(x)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return np.clip(out, _SIGMOID_LO, _SIGMOID_HI)


def sigmoid_backward(y: Tensor, grad_out: Tensor) -> Tensor:
    """Backward pass given the sigmoid *output* ``y``."""
    return grad_out * y * (1.0 - y)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a, rank=2)
    b = as_tensor(b, rank=2)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(s: Tensor) -> Tensor:
    s = as_tensor(s, rank=2)
    z = s - s.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(p: Tensor, grad_out: Tensor) -> Tensor:
    """Backward through a row softmax given its output ``p``."""
    return p * (grad_out - (grad_out * p).sum(axis=1, keepdims=True))


def inner(a: Tensor, b: Tensor) -> float:
    """Frobenius inner product."""
    return float(np.dot(np.ravel(a), np.ravel(b)))
