"""Training objective and optimizer loop.

The objective couples a batch-local Cox partial likelihood with a distance-
correlation penalty that pushes the two modality-specific pooled stacks away
from each other and away from the shared stacks. Optimization is AdamW with
decoupled weight decay under a cosine learning-rate schedule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericalError
from .model import STREAM_ORDER, forward_batch, init_params
from .numerics import Rng, Tensor, concatenate, constant, pairwise_distances, sqrt_clamped

DEGENERATE_EPS = 1e-14


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    lambda_surv: float = 1.0
    lambda_dis: float = 7.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate must be positive, weight_decay >= 0")
        if self.lambda_surv < 0 or self.lambda_dis < 0:
            raise ConfigError("loss weights must be non-negative")
        return self


# -- Cox partial likelihood ----------------------------------------------------

def cox_loss(risks, times, events):
    """Negative Cox partial log-likelihood over a batch.

    For each observed event i the risk set holds every sample whose time is
    >= time_i (Breslow handling of ties). Censored-only batches give 0.
    The log-sum-exp is max-shifted for stability.
    """
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    n = times.shape[0]
    if risks.shape != (n,) or events.shape != (n,):
        raise DataError("risks, times and events must share one length")
    if not events.any():
        return constant(0.0)

    at_risk = times[None, :] >= times[:, None]                        # (i, j)
    shift = np.where(at_risk, risks.data[None, :], -np.inf).max(axis=1)
    # Excluded entries get a huge constant offset so exp underflows to an
    # exact 0 instead of overflowing before masking.
    offset = shift[:, None] + np.where(at_risk, 0.0, 1e9)
    z = risks.reshape(1, n).broadcast_to((n, n)) - constant(offset)
    lse = z.exp().sum(axis=1).log() + constant(shift)
    per_event = (risks - lse) * constant(events.astype(np.float64))
    return -per_event.sum()


# -- distance correlation --------------------------------------------------------

def _double_centered(dist):
    row = dist.mean(axis=1, keepdims=True)
    col = dist.mean(axis=0, keepdims=True)
    grand = dist.mean()
    return dist - row - col + grand


def distance_correlation_tensor(x, y):
    """Differentiable empirical distance correlation between two (n, *) stacks.

    Uses the classical biased 1/n^2 estimator: Euclidean distance matrices
    are double-centered, dCov^2 is the mean elementwise product, and the
    correlation normalizes by the distance variances. Returns (dc, degenerate);
    a stack with zero distance variance yields dc = 0 and degenerate = True.
    """
    x = x if isinstance(x, Tensor) else constant(np.asarray(x, dtype=np.float64))
    y = y if isinstance(y, Tensor) else constant(np.asarray(y, dtype=np.float64))
    if x.shape[0] != y.shape[0]:
        raise DataError("stacks must have the same number of rows")
    if x.shape[0] < 2:
        raise DataError("distance correlation needs at least 2 rows")
    a = _double_centered(pairwise_distances(x))
    b = _double_centered(pairwise_distances(y))
    dvar_x = (a * a).mean()
    dvar_y = (b * b).mean()
    if dvar_x.data <= DEGENERATE_EPS or dvar_y.data <= DEGENERATE_EPS:
        return constant(0.0), True
    dcov = sqrt_clamped((a * b).mean())
    denom = sqrt_clamped(sqrt_clamped(dvar_x) * sqrt_clamped(dvar_y))
    return dcov / denom, False


@dataclass
class BatchBundle:
    """Pooled per-stream stacks plus outcomes for one batch."""

    pooled: dict          # stream -> (B, D_z) Tensor
    risks: Tensor         # (B,)
    times: np.ndarray
    events: np.ndarray


def distance_correlation_loss_terms(batch):
    """Both dependence penalties: specific-vs-specific and specific-vs-shared.

    Returns (loss tensor, flags) where flags mark degenerate terms that were
    defined as 0.
    """
    z_gg, z_hh = batch.pooled["gg"], batch.pooled["hh"]
    z_hg, z_gh = batch.pooled["hg"], batch.pooled["gh"]
    term1, degen1 = distance_correlation_tensor(z_gg, z_hh)
    specific = concatenate([z_gg, z_hh], axis=1)
    shared = concatenate([z_hg, z_gh], axis=1)
    term2, degen2 = distance_correlation_tensor(specific, shared)
    return term1 + term2, (degen1, degen2)


def total_loss(batch, lambda_surv=1.0, lambda_dis=7.0):
    """lambda_surv * Cox + lambda_dis * dependence penalty."""
    surv = cox_loss(batch.risks, batch.times, batch.events)
    dis, flags = distance_correlation_loss_terms(batch)
    total = lambda_surv * surv + lambda_dis * dis
    return total, surv, dis, flags


# -- optimizer -------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int

    @classmethod
    def zeros_like(cls, params):
        return cls(m={k: np.zeros_like(t.data) for k, t in params.params.items()},
                   v={k: np.zeros_like(t.data) for k, t in params.params.items()},
                   step=0)


def adamw_step(params, grads, state, config):
    """One decoupled-weight-decay Adam update, in place on `params`."""
    state.step += 1
    t = state.step
    lr = config.learning_rate
    for name, tensor in params.params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(tensor.data)
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"NaN/Inf gradient for parameter {name!r} "
                                 f"at optimizer step {t}")
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        m_hat = m / (1.0 - config.beta1 ** t)
        v_hat = v / (1.0 - config.beta2 ** t)
        tensor.data = tensor.data - lr * (m_hat / (np.sqrt(v_hat) + config.eps)
                                          + config.weight_decay * tensor.data)
    return params, state


def cosine_lr(step, total_steps, base_lr):
    """Cosine decay from base_lr at step 0 to 0 at total_steps."""
    if not (0 <= step <= total_steps):
        raise ConfigError("step must lie in [0, total_steps]")
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * step / total_steps))


# -- training loop ------------------------------------------------------------------

@dataclass(frozen=True)
class HistoryRecord:
    epoch: int
    batch: int
    lr: float
    loss_total: float
    loss_cox: float
    loss_dis: float


def _named_grads(params, grad_map):
    return {name: grad_map.get(tensor)
            for name, tensor in params.params.items()}


def train(features, config, model_config, model_seed=None):
    """Train on prototyped samples; deterministic given config.seed.

    Batches are drawn by seeded shuffling each epoch. A batch with fewer
    than 2 samples is skipped outright (the dependence penalty needs two
    rows); a batch without events contributes only the dependence term.
    """
    config.validate()
    if len(features) < 2:
        raise DataError("training needs at least 2 samples")
    if not any(f.event for f in features):
        raise DataError("training cohort has no observed events")

    seed = config.seed if model_seed is None else model_seed
    params = init_params(model_config, Rng(seed).child("model-init").seed)
    state = OptimizerState.zeros_like(params)
    shuffle_rng = Rng(config.seed).child("shuffle")

    n = len(features)
    n_batches = (n + config.batch_size - 1) // config.batch_size
    total_steps = config.epochs * n_batches
    history = []
    step = 0

    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        for b in range(n_batches):
            lr = cosine_lr(step, total_steps, config.learning_rate)
            step += 1
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            if idx.size < 2:
                continue
            chunk = [features[i] for i in idx]
            out = forward_batch(chunk, params)
            batch = BatchBundle(
                pooled=out.pooled, risks=out.risks,
                times=np.array([f.time for f in chunk]),
                events=np.array([f.event for f in chunk]))
            total, surv, dis, _ = total_loss(batch, config.lambda_surv,
                                             config.lambda_dis)
            grad_map = total.backward()
            step_cfg = _StepConfig(config, lr)
            adamw_step(params, _named_grads(params, grad_map), state, step_cfg)
            history.append(HistoryRecord(
                epoch=epoch, batch=b, lr=float(lr),
                loss_total=float(total.data), loss_cox=float(surv.data),
                loss_dis=float(dis.data)))
    return params, history


class _StepConfig:
    """TrainConfig view with the scheduled learning rate substituted."""

    def __init__(self, base, lr):
        self.learning_rate = lr
        self.weight_decay = base.weight_decay
        self.beta1 = base.beta1
        self.beta2 = base.beta2
        self.eps = base.eps


def save_history(history, path):
    from .serialize import write_csv
    write_csv(path, ["epoch", "batch", "lr", "loss_total", "loss_cox", "loss_dis"],
              [[h.epoch, h.batch, h.lr, h.loss_total, h.loss_cox, h.loss_dis]
               for h in history])
