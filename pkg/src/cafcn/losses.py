"""Class-weighted binary cross-entropy on saliency maps."""

from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError, as_tensor


class ValidationError(ValueError):
    """Raised for ground truths that are not binary or do not match predictions."""


@dataclass(frozen=True)
class LossConfig:
    eta: float = 0.3  # weight of the background term; foreground gets 1 - eta
    clamp_epsilon: float = 1e-7

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0:
            raise ValueError(f"eta must lie in (0, 1), got {self.eta}")
        if not 0.0 < self.clamp_epsilon < 0.5:
            raise ValueError(f"clamp_epsilon must lie in (0, 0.5), got {self.clamp_epsilon}")


def check_binary(g):
    g = as_tensor(g)
    if not np.all((g == 0.0) | (g == 1.0)):
        raise ValidationError("ground truth must be binary {0, 1}")
    return g


def weighted_bce(p, g, cfg: LossConfig = LossConfig()):
    """Mean over pixels of ``-[(1-eta) g ln p + eta (1-g) ln(1-p)]``.

    Returns ``(loss, grad)`` where ``grad`` is the derivative with respect to
    ``p``.  Predictions are clamped to ``[eps, 1-eps]`` first; the gradient is
    that of the clamped loss, so it vanishes where the clamp is active.
    """
    p = as_tensor(p)
    g = check_binary(g)
    if p.shape != g.shape:
        raise DimensionError(f"prediction {p.shape} and ground truth {g.shape} differ")
    eps = cfg.clamp_epsilon
    pc = np.clip(p, eps, 1.0 - eps)
    n = p.size
    eta = cfg.eta
    loss = -np.sum((1.0 - eta) * g * np.log(pc) + eta * (1.0 - g) * np.log1p(-pc)) / n
    inside = (p >= eps) & (p <= 1.0 - eps)
    grad = -((1.0 - eta) * g / pc - eta * (1.0 - g) / (1.0 - pc)) / n
    return float(loss), np.where(inside, grad, 0.0)


def weighted_bce_logit_grad(p, g, cfg: LossConfig = LossConfig()):
    """Loss and its gradient w.r.t. the pre-sigmoid logits, where ``p = sigmoid(z)``.

    Uses the fused form ``(eta (1-g) p - (1-eta) g (1-p)) / N``, which equals
    the chained clamped gradient inside the clamp range and, unlike it, does
    not vanish for confidently wrong pixels.
    """
    loss, _ = weighted_bce(p, g, cfg)
    p = as_tensor(p)
    g = as_tensor(g)
    eta = cfg.eta
    grad = (eta * (1.0 - g) * p - (1.0 - eta) * g * (1.0 - p)) / p.size
    return loss, grad
