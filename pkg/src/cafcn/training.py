"""SGD with momentum and weight decay, step learning-rate schedule, epoch loop."""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import LossConfig, ValidationError, weighted_bce, weighted_bce_logit_grad  # noqa: F401
from .network import NetworkParams, forward_backward_pair, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 0.005
    decay_factor: float = 0.1
    decay_every_epochs: int = 50
    velocity: NetworkParams = None
    epoch: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.decay_every_epochs < 1:
            raise ValueError("decay_every_epochs must be >= 1")


def lr_at(epoch, state: OptimizerState):
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return state.learning_rate * state.decay_factor ** (epoch // state.decay_every_epochs)


def sgd_step(params: NetworkParams, grads: NetworkParams, state: OptimizerState, lr=None):
    """One momentum step; weight decay enters as an L2 gradient term.

    ``v <- momentum * v + grad + weight_decay * param``;
    ``param <- param - lr * v``.  Returns ``(new_params, state)``; the input
    params are left untouched and ``state.velocity`` is replaced.
    """
    if lr is None:
        lr = lr_at(state.epoch, state)
    velocity = state.velocity if state.velocity is not None else params.zeros_like()
    new_params = {}
    new_velocity = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        v = state.momentum * velocity[name] + g + state.weight_decay * p
        new_velocity[name] = v
        new_params[name] = p - lr * v
    state.velocity = NetworkParams(params.config, new_velocity)
    return NetworkParams(params.config, new_params), state


def _average(grads_list):
    total = grads_list[0].copy()
    for g in grads_list[1:]:
        for name, t in g.items():
            total.tensors[name] += t
    scale = 1.0 / len(grads_list)
    for name in total.names():
        total.tensors[name] *= scale
    return total


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    params: NetworkParams
    state: OptimizerState
    epoch_losses: list = field(default_factory=list)


def epoch_order(n, seed, epoch):
    """Deterministic shuffle for one epoch, independent of earlier epochs."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def checkpoint_name(epoch):
    return f"epoch_{epoch:04d}.cafcn"


def log_header(state: OptimizerState, loss_cfg: LossConfig, batch_size, seed, extra=()):
    lines = [
        f"# learning_rate={state.learning_rate:g}",
        f"# decay_factor={state.decay_factor:g}",
        f"# decay_every_epochs={state.decay_every_epochs}",
        f"# momentum={state.momentum:g}",
        f"# weight_decay={state.weight_decay:g}",
        f"# batch_size={batch_size}",
        f"# eta={loss_cfg.eta:g}",
        f"# shuffle_seed={seed}",
    ]
    lines.extend(f"# {line}" for line in extra)
    lines.append("# epoch\tlr\tmeanLoss")
    return lines


def train(pairs, params: NetworkParams, state: OptimizerState, epochs, batch_size=4,
          loss_cfg=LossConfig(), seed=0, checkpoint_dir=None, log_path=None):
    """Train on ``pairs`` of ``(image1, image2, mask1, mask2)`` for ``epochs`` epochs.

    Training resumes from ``state.epoch``.  With ``checkpoint_dir`` set, the
    starting point is written as ``epoch_%04d.cafcn`` if it does not exist and
    a checkpoint follows every epoch.  ``log_path`` receives one
    ``epoch<TAB>lr<TAB>meanLoss`` line per epoch (appended).
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("training set is empty")
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
        first = ckdir / checkpoint_name(state.epoch)
        if not first.exists():
            save_checkpoint(first, params, state.velocity, state.epoch)
    result = TrainResult(params, state)
    for _ in range(epochs):
        epoch = state.epoch
        lr = lr_at(epoch, state)
        order = epoch_order(len(pairs), seed, epoch)
        losses = []
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            batch_grads = []
            for idx in batch:
                i1, i2, g1, g2 = pairs[idx]
                loss, grads = forward_backward_pair(i1, i2, g1, g2, params, loss_cfg=loss_cfg)
                if not math.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, pair {idx}")
                losses.append(loss)
                batch_grads.append(grads)
            params, state = sgd_step(params, _average(batch_grads), state, lr=lr)
        state.epoch = epoch + 1
        mean_loss = float(np.mean(losses))
        result.epoch_losses.append(mean_loss)
        log.info("epoch %d lr %g loss %.6f", epoch, lr, mean_loss)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(f"{epoch}\t{lr:.6g}\t{mean_loss:.8f}\n")
        if ckdir is not None:
            save_checkpoint(ckdir / checkpoint_name(state.epoch), params, state.velocity, state.epoch)
    result.params = params
    result.state = state
    return result


def resume(checkpoint_path, state: OptimizerState):
    """Load params and optimizer velocity/epoch from a checkpoint into ``state``."""
    ck = load_checkpoint(checkpoint_path)
    state.velocity = ck.velocity
    state.epoch = ck.epoch
    return ck.params, state
