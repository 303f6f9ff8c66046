"""Fully-connected classifier with dropout and exact backpropagation.

The network maps features to logits ``z``.  Read as a DNN the logits go
through a softmax; read as a DPN they give concentrations
``alpha = exp(z)`` whose mean is the same softmax.

Dropout is inverted: in stochastic mode hidden activations are masked by
Bernoulli(keep_prob) and divided by keep_prob, so the deterministic pass
needs no rescaling.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .dirichlet import DirichletParams
from .measures import EnsemblePrediction

__all__ = [
    "LOGIT_CLAMP",
    "Mlp",
    "ForwardTrace",
    "init_mlp",
    "forward",
    "backward",
    "softmax",
    "to_dirichlet",
    "logits_to_alpha",
    "mc_dropout_predict",
    "mc_dropout_probs",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

LOGIT_CLAMP = 30.0
ACTIVATIONS = ("relu", "leaky_relu")
LEAKY_SLOPE = 0.01
CHECKPOINT_FORMAT = "priornet-mlp"


class CheckpointError(ValueError):
    pass


@dataclass
class Mlp:
    """Weights ``W`` have shape ``(fan_out, fan_in)``.

    ``keep_probs`` has one entry per hidden layer, applied to that layer's
    activations.
    """

    weights: list
    biases: list
    activation: str = "relu"
    keep_probs: list = field(default_factory=list)

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if not self.weights or len(self.weights) != len(self.biases):
            raise ValueError("need one bias per weight matrix")
        self.weights = [np.array(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.array(b, dtype=np.float64) for b in self.biases]
        n_hidden = len(self.weights) - 1
        if not self.keep_probs:
            self.keep_probs = [1.0] * n_hidden
        self.keep_probs = [float(p) for p in self.keep_probs]
        if len(self.keep_probs) != n_hidden:
            raise ValueError(f"need {n_hidden} keep probabilities")
        if any(not 0.0 < p <= 1.0 for p in self.keep_probs):
            raise ValueError("keep probabilities must lie in (0, 1]")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: bias must match weight rows")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: fan-in does not match layer {i - 1}")
        if self.output_dim < 2:
            raise ValueError("need at least 2 output classes")

    @property
    def input_dim(self):
        return self.weights[0].shape[1]

    @property
    def output_dim(self):
        return self.weights[-1].shape[0]

    @property
    def layer_sizes(self):
        return [self.input_dim] + [w.shape[0] for w in self.weights]

    def params(self):
        """Flat list of parameter arrays, ``[W0, b0, W1, b1, ...]``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self):
        return Mlp(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
            list(self.keep_probs),
        )


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    pre_activations: list
    activations: list
    masks: list

    def acts_below(self, i):
        """Input to layer ``i`` (dropout already applied)."""
        return self.inputs if i == 0 else self.activations[i - 1]


def init_mlp(layer_sizes, activation="relu", keep_prob=1.0, seed=0):
    """He-normal hidden weights, zero biases and a zero output layer.

    The zero output layer starts every input at ``z = 0`` (the flat
    Dirichlet) so that no logit begins in the saturated clamp region.
    """
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    pairs = list(zip(layer_sizes[:-1], layer_sizes[1:]))
    for i, (fan_in, fan_out) in enumerate(pairs):
        if i == len(pairs) - 1:
            weights.append(np.zeros((fan_out, fan_in)))
        else:
            weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    n_hidden = len(layer_sizes) - 2
    if np.ndim(keep_prob) == 0:
        keep_prob = [keep_prob] * n_hidden
    return Mlp(weights, biases, activation, list(keep_prob))


def _act(net, h):
    if net.activation == "relu":
        return np.maximum(h, 0.0)
    return np.where(h > 0.0, h, LEAKY_SLOPE * h)


def _act_grad(net, h):
    if net.activation == "relu":
        return (h > 0.0).astype(np.float64)
    return np.where(h > 0.0, 1.0, LEAKY_SLOPE)


def forward(net, x, rng=None, masks=None):
    """Logits for ``x`` of shape ``(N, D)`` or ``(D,)``.

    ``rng`` (a ``numpy.random.Generator`` or an int seed) switches on
    stochastic dropout; ``None`` is the deterministic pass.  ``masks`` replays
    previously recorded dropout masks instead of sampling.
    Returns ``(z, trace)``.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != net.input_dim:
        raise ValueError(f"expected {net.input_dim} features, got shape {x.shape}")
    if rng is not None and not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)

    pre, acts, used_masks = [], [], []
    h = xb
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        a = h @ w.T + b
        pre.append(a)
        if i == last:
            h = a
            break
        h = _act(net, a)
        keep = net.keep_probs[i]
        if masks is not None:
            mask = masks[i]
        elif rng is not None and keep < 1.0:
            mask = (rng.random(h.shape) < keep) / keep
        else:
            mask = None
        if mask is not None:
            h = h * mask
        used_masks.append(mask)
        acts.append(h)

    trace = ForwardTrace(xb, pre, acts, used_masks)
    return (h[0] if single else h), trace


def backward(net, trace, grad_z):
    """Gradients of a loss w.r.t. every parameter given ``dL/dz``.

    ``grad_z`` matches the logits returned by :func:`forward`; per-example
    contributions are summed over the batch.  Returns a list aligned with
    :meth:`Mlp.params`.
    """
    g = np.asarray(grad_z, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    n_layers = len(net.weights)
    if len(trace.pre_activations) != n_layers or g.shape != trace.pre_activations[-1].shape:
        raise ValueError("trace does not match this network or gradient shape")

    grads = [None] * (2 * n_layers)
    for i in range(n_layers - 1, -1, -1):
        below = trace.acts_below(i)
        grads[2 * i] = g.T @ below
        grads[2 * i + 1] = g.sum(axis=0)
        if i == 0:
            break
        g = g @ net.weights[i]
        mask = trace.masks[i - 1]
        if mask is not None:
            g = g * mask
        g = g * _act_grad(net, trace.pre_activations[i - 1])
    return grads


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def logits_to_alpha(z):
    """``exp(clip(z, -30, 30))``, batched."""
    return np.exp(np.clip(z, -LOGIT_CLAMP, LOGIT_CLAMP))


def to_dirichlet(z):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError("to_dirichlet takes one logit vector; use logits_to_alpha for batches")
    return DirichletParams(logits_to_alpha(z))


def mc_dropout_probs(net, x, num_samples, seed):
    """Softmax outputs of ``num_samples`` stochastic passes, shape ``(M, N, K)``."""
    if num_samples < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return np.stack([softmax(forward(net, x, rng)[0]) for _ in range(num_samples)])


def mc_dropout_predict(net, x, num_samples, seed):
    """MC-dropout ensemble for one feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("mc_dropout_predict takes one feature vector")
    return EnsemblePrediction(mc_dropout_probs(net, x, num_samples, seed)[:, 0, :])


def to_json(net):
    return {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "activation": net.activation,
        "layer_sizes": net.layer_sizes,
        "keep_probs": net.keep_probs,
        "layers": [
            {"weight": w.tolist(), "bias": b.tolist()}
            for w, b in zip(net.weights, net.biases)
        ],
    }


def from_json(doc):
    try:
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"not a {CHECKPOINT_FORMAT} document")
        net = Mlp(
            [layer["weight"] for layer in doc["layers"]],
            [layer["bias"] for layer in doc["layers"]],
            doc["activation"],
            doc["keep_probs"],
        )
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if net.layer_sizes != doc.get("layer_sizes", net.layer_sizes):
        raise CheckpointError("layer_sizes disagree with the stored weights")
    return net


def save_checkpoint(net, path):
    with open(path, "w") as f:
        json.dump(to_json(net), f)
        f.write("\n")


def load_checkpoint(path):
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise CheckpointError(f"{path}: expected a JSON object")
    return from_json(doc)
