"""Training objectives, optimizer, learning-rate schedules and loops.

The DPN objective is the forward KL from a target Dirichlet to the
network's Dirichlet ``exp(z)``: a sharp, smoothed target at the label for
in-domain inputs and the flat Dirichlet for out-of-distribution inputs,
with an optional cross-entropy term weighted by ``ce_weight``.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dirichlet import DirichletParams
from .net import LOGIT_CLAMP, backward, forward, softmax
from .special import digamma, ln_gamma

__all__ = [
    "TargetSpec",
    "LrSchedule",
    "TrainConfig",
    "TrainingDivergedError",
    "Nadam",
    "target_dirichlet_in",
    "target_dirichlet_out",
    "target_alphas",
    "dpn_loss_and_grad",
    "ce_loss_and_grad",
    "dpn_objective",
    "dnn_objective",
    "lr_at",
    "train_dpn",
    "train_dnn",
]


class TrainingDivergedError(RuntimeError):
    """Non-finite loss; carries where it happened."""

    def __init__(self, step, epoch, batch, lr, loss):
        self.step, self.epoch, self.batch, self.lr, self.loss = step, epoch, batch, lr, loss
        super().__init__(
            f"non-finite loss {loss!r} at step {step} (epoch {epoch}, batch {batch}, lr {lr:g})"
        )


@dataclass(frozen=True)
class TargetSpec:
    target_precision: float = 100.0
    smoothing: float = 0.01
    num_classes: int = 3

    def __post_init__(self):
        k, eps = self.num_classes, self.smoothing
        if k < 2:
            raise ValueError("need at least 2 classes")
        if not 0.0 < eps < 1.0 / k or not 1.0 - (k - 1) * eps > eps:
            raise ValueError("smoothing must leave the labelled class the majority mass")
        if not self.target_precision > k:
            raise ValueError("target precision must exceed the number of classes")

    @property
    def on_class_mean(self):
        return 1.0 - (self.num_classes - 1) * self.smoothing


def target_dirichlet_in(label, spec):
    if not 0 <= label < spec.num_classes:
        raise ValueError(f"label {label} out of range for {spec.num_classes} classes")
    mu = np.full(spec.num_classes, spec.smoothing)
    mu[label] = spec.on_class_mean
    return DirichletParams(spec.target_precision * mu)


def target_dirichlet_out(num_classes):
    """Flat Dirichlet, every concentration 1."""
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    return DirichletParams(np.ones(num_classes))


def target_alphas(labels, spec):
    """Batched in-domain targets, shape ``(N, K)``."""
    labels = np.asarray(labels)
    mu = np.full((labels.size, spec.num_classes), spec.smoothing)
    mu[np.arange(labels.size), labels] = spec.on_class_mean
    return spec.target_precision * mu


def dpn_loss_and_grad(z, target):
    """``KL[Dir(target) || Dir(exp(z))]`` and its gradient w.r.t. ``z``.

    Accepts one logit vector or a batch ``(N, K)`` (per-example losses).
    Logits beyond +-30 are clamped and get zero gradient.
    """
    z = np.asarray(z, dtype=np.float64)
    a = target.alpha if isinstance(target, DirichletParams) else np.asarray(target, dtype=np.float64)
    a = np.broadcast_to(a, z.shape)
    zc = np.clip(z, -LOGIT_CLAMP, LOGIT_CLAMP)
    b = np.exp(zc)
    a0 = a.sum(axis=-1, keepdims=True)
    b0 = b.sum(axis=-1, keepdims=True)
    psi_a = digamma(a) - digamma(a0)
    loss = (
        ln_gamma(a0[..., 0])
        - ln_gamma(b0[..., 0])
        + (ln_gamma(b) - ln_gamma(a)).sum(axis=-1)
        + ((a - b) * psi_a).sum(axis=-1)
    )
    dloss_db = digamma(b) - digamma(b0) - psi_a
    grad = np.where(np.abs(z) > LOGIT_CLAMP, 0.0, b * dloss_db)
    return (float(loss) if z.ndim == 1 else loss), grad


def ce_loss_and_grad(z, label):
    """``-ln softmax(z)[label]`` and ``softmax(z) - onehot(label)``."""
    z = np.asarray(z, dtype=np.float64)
    label = np.asarray(label)
    shifted = z - z.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, label[..., None], axis=-1)[..., 0]
    loss = log_norm - picked
    grad = softmax(z)
    if z.ndim == 1:
        grad[label] -= 1.0
        return float(loss), grad
    grad[np.arange(z.shape[0]), label] -= 1.0
    return loss, grad


def dpn_objective(net, x_in, labels, x_ood, spec, ce_weight=0.0, rng=None, masks=None):
    """Multi-task loss on one batch and its parameter gradients.

    ``mean_in[KL(target_in || model) + ce_weight * CE] + mean_ood[KL(flat || model)]``.
    ``x_ood`` may be ``None`` or empty.  Returns ``(loss, parts, grads, trace)``
    where ``parts`` holds the three terms separately (the CE part unweighted).
    """
    n_in = x_in.shape[0]
    have_ood = x_ood is not None and len(x_ood) > 0
    x_all = np.vstack([x_in, x_ood]) if have_ood else x_in
    z, trace = forward(net, x_all, rng=rng, masks=masks)

    kl_in, g_kl_in = dpn_loss_and_grad(z[:n_in], target_alphas(labels, spec))
    grad_z = np.zeros_like(z)
    grad_z[:n_in] = g_kl_in / n_in
    parts = {"in": float(kl_in.mean()), "ce": 0.0, "ood": 0.0}
    if ce_weight:
        ce, g_ce = ce_loss_and_grad(z[:n_in], labels)
        grad_z[:n_in] += ce_weight * g_ce / n_in
        parts["ce"] = float(ce.mean())
    if have_ood:
        n_ood = x_all.shape[0] - n_in
        kl_ood, g_ood = dpn_loss_and_grad(z[n_in:], np.ones(net.output_dim))
        grad_z[n_in:] = g_ood / n_ood
        parts["ood"] = float(kl_ood.mean())
    loss = parts["in"] + ce_weight * parts["ce"] + parts["ood"]
    return loss, parts, backward(net, trace, grad_z), trace


def dnn_objective(net, x, labels, rng=None, masks=None):
    z, trace = forward(net, x, rng=rng, masks=masks)
    ce, g = ce_loss_and_grad(z, labels)
    return float(ce.mean()), backward(net, trace, g / x.shape[0]), trace


@dataclass(frozen=True)
class LrSchedule:
    """``kind`` is ``constant``, ``exponential_decay`` or ``one_cycle``.

    ``decay_rate`` is per epoch.  For ``one_cycle`` the rate ramps linearly
    from ``lr`` to ``10 lr`` over half of ``cycle_length`` epochs, back to
    ``lr`` at ``cycle_length``, then linearly to ``floor`` at ``total_epochs``.
    """

    kind: str = "constant"
    lr: float = 1e-3
    decay_rate: float = 1.0
    cycle_length: float = None
    total_epochs: float = None
    floor: float = 1e-6

    def __post_init__(self):
        if self.kind not in ("constant", "exponential_decay", "one_cycle"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if not (math.isfinite(self.lr) and self.lr >= 0):
            raise ValueError("lr must be finite and >= 0")
        if self.kind == "exponential_decay" and not self.decay_rate > 0:
            raise ValueError("decay_rate must be > 0")
        if self.kind == "one_cycle":
            if self.cycle_length is None or self.total_epochs is None:
                raise ValueError("one_cycle needs cycle_length and total_epochs")
            if not 0 < self.cycle_length <= self.total_epochs:
                raise ValueError("need 0 < cycle_length <= total_epochs")


def _lerp(a, b, t):
    # exact at both ends
    return (1.0 - t) * a + t * b


def lr_at(schedule, epoch):
    """Learning rate at a (fractional) epoch."""
    total = schedule.total_epochs
    if epoch < 0 or (total is not None and epoch > total):
        raise ValueError(f"epoch {epoch} outside [0, {total}]")
    lr = schedule.lr
    if schedule.kind == "constant":
        return lr
    if schedule.kind == "exponential_decay":
        return lr * schedule.decay_rate**epoch
    half = schedule.cycle_length / 2.0
    if epoch <= half:
        return _lerp(lr, 10.0 * lr, epoch / half)
    if epoch <= schedule.cycle_length:
        return _lerp(10.0 * lr, lr, (epoch - half) / half)
    tail = total - schedule.cycle_length
    return _lerp(lr, schedule.floor, (epoch - schedule.cycle_length) / tail)


class Nadam:
    """Adam with Nesterov momentum; ``nesterov=False`` gives plain Adam.

    ``kind="momentum"`` is heavy-ball SGD, kept for debugging.
    """

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, nesterov=True, kind="adam"):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.nesterov = nesterov
        self.kind = kind
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, lr):
        """Update ``params`` in place."""
        self.t += 1
        b1, b2, t = self.beta1, self.beta2, self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            if self.kind == "momentum":
                p -= lr * m
                continue
            v *= b2
            v += (1.0 - b2) * g * g
            v_hat = v / (1.0 - b2**t)
            if self.nesterov:
                m_hat = b1 * m / (1.0 - b1 ** (t + 1)) + (1.0 - b1) * g / (1.0 - b1**t)
            else:
                m_hat = m / (1.0 - b1**t)
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    schedule: LrSchedule = field(default_factory=LrSchedule)
    epochs: int = 10
    batch_size: int = 64
    ce_weight: float = 0.0
    ood_ratio: float = 1.0
    optimizer: str = "nadam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            object.__setattr__(self, "schedule", LrSchedule(**self.schedule))
        for name in ("ce_weight", "ood_ratio", "beta1", "beta2", "eps"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be finite and >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("need epochs >= 0 and batch_size >= 1")
        if self.optimizer not in ("nadam", "adam", "momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self):
        return asdict(self)


def _make_optimizer(net, cfg):
    return Nadam(
        net.params(), cfg.beta1, cfg.beta2, cfg.eps,
        nesterov=cfg.optimizer == "nadam",
        kind="momentum" if cfg.optimizer == "momentum" else "adam",
    )


def _run(net, cfg, n_in, batch_loss):
    """Shared epoch/batch loop; ``batch_loss(net, idx, rng)`` returns ``(loss, grads)``."""
    net = net.copy()
    rng = np.random.default_rng(cfg.seed)
    opt = _make_optimizer(net, cfg)
    params = net.params()
    n_batches = math.ceil(n_in / cfg.batch_size)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_in)
        total = 0.0
        for b in range(n_batches):
            lr = lr_at(cfg.schedule, epoch + b / n_batches)
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            loss, grads = batch_loss(net, idx, rng)
            if not math.isfinite(loss):
                raise TrainingDivergedError(step, epoch, b, lr, loss)
            opt.step(params, grads, lr)
            total += loss
            step += 1
        history.append(total / n_batches)
    return net, history


def train_dpn(net, in_data, ood_data, spec, cfg):
    """Train ``net`` (a copy) with the multi-task DPN objective.

    Every in-domain batch is paired with ``round(ood_ratio * batch)`` OOD
    points taken in order from a reshuffled pass over ``ood_data``.
    Returns ``(trained_net, per_epoch_mean_loss)``.
    """
    if in_data.num_classes != spec.num_classes or net.output_dim != spec.num_classes:
        raise ValueError("class count differs between data, target spec and network")
    x_in, y_in = in_data.features, in_data.labels
    x_ood = ood_data.features if ood_data is not None and cfg.ood_ratio > 0 else None
    ood_state = {"order": np.empty(0, dtype=np.int64), "pos": 0}

    def next_ood(count, rng):
        picked = []
        while count > 0:
            if ood_state["pos"] >= ood_state["order"].size:
                ood_state["order"] = rng.permutation(x_ood.shape[0])
                ood_state["pos"] = 0
            take = ood_state["order"][ood_state["pos"]:ood_state["pos"] + count]
            ood_state["pos"] += take.size
            count -= take.size
            picked.append(take)
        return x_ood[np.concatenate(picked)]

    def batch_loss(model, idx, rng):
        ood = None
        if x_ood is not None:
            ood = next_ood(max(1, round(cfg.ood_ratio * idx.size)), rng)
        loss, _, grads, _ = dpn_objective(
            model, x_in[idx], y_in[idx], ood, spec, cfg.ce_weight, rng=rng
        )
        return loss, grads

    return _run(net, cfg, x_in.shape[0], batch_loss)


def train_dnn(net, in_data, cfg):
    """Cross-entropy training of a plain classifier; same loop as :func:`train_dpn`."""
    x, y = in_data.features, in_data.labels

    def batch_loss(model, idx, rng):
        loss, grads, _ = dnn_objective(model, x[idx], y[idx], rng=rng)
        return loss, grads

    return _run(net, cfg, x.shape[0], batch_loss)
