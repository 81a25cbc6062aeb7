"""Growable multilayer perceptron with manual backprop and Adam.

Layer ``l`` (1-based, as in ``W_1 ... W_{d+1}``) is stored at ``net.weights[l - 1]``
with shape ``M_l x (M_{l-1} + 1)``; the last column holds the biases. Hidden
layers use the modified ReLU (derivative 1 at 0); the output layer emits logits
and softmax only appears inside the loss.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ShapeError(ValueError):
    pass


class CapacityError(ValueError):
    pass


def modified_relu(x):
    """``x`` for ``x >= 0`` and ``0`` otherwise."""
    return np.where(x >= 0, x, 0.0)


def modified_relu_grad(x):
    """Derivative of :func:`modified_relu`, taken as 1 at 0."""
    return np.where(x >= 0, 1.0, 0.0)


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


@dataclass
class DenseNet:
    weights: list[np.ndarray]
    max_widths: list[int]

    @property
    def depth(self) -> int:
        """Number of hidden layers."""
        return len(self.weights) - 1

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[1] - 1] + [W.shape[0] for W in self.weights]

    def W(self, l: int) -> np.ndarray:
        return self.weights[l - 1]

    def hidden_layers(self) -> range:
        return range(1, self.depth + 1)

    def parameter_count(self) -> int:
        return int(sum(W.size for W in self.weights))

    def copy(self) -> DenseNet:
        return DenseNet([W.copy() for W in self.weights], list(self.max_widths))

    def check(self) -> None:
        for l in range(2, len(self.weights) + 1):
            if self.W(l).shape[1] != self.W(l - 1).shape[0] + 1:
                raise ShapeError(f"W_{l} has {self.W(l).shape[1]} columns, expected {self.W(l - 1).shape[0] + 1}")
        for l in self.hidden_layers():
            if self.W(l).shape[0] > self.max_widths[l - 1]:
                raise CapacityError(f"layer {l} width {self.W(l).shape[0]} exceeds {self.max_widths[l - 1]}")


@dataclass
class ForwardTrace:
    """Pre-activations ``Z[l]`` and post-activations ``H[l]`` (``H[0]`` is the input)."""

    Z: list
    H: list

    @property
    def X(self) -> np.ndarray:
        return self.H[0]

    @property
    def logits(self) -> np.ndarray:
        return self.H[-1]

    @property
    def n(self) -> int:
        return self.H[0].shape[1]

    def augmented(self, l: int) -> np.ndarray:
        """``H[l]`` with a trailing row of ones (the bias input)."""
        H = self.H[l]
        return np.vstack([H, np.ones((1, H.shape[1]))])


@dataclass
class Gradients:
    """Mean-over-batch loss gradients per weight matrix plus ``dL/dZ_l`` per layer."""

    dW: list[np.ndarray]
    dZ: list
    loss: float


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_net(cls, net: DenseNet, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        return cls(lr, beta1, beta2, eps, 0,
                   [np.zeros_like(W) for W in net.weights],
                   [np.zeros_like(W) for W in net.weights])


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def init_network(widths, max_widths=None, seed=0) -> DenseNet:
    """Xavier-uniform weights with zero biases.

    ``widths`` is ``(M_0, M_1, ..., M_{d+1})``; ``max_widths`` gives one cap per
    hidden layer and defaults to the initial widths (a static network).
    """
    widths = [int(w) for w in widths]
    if len(widths) < 3:
        raise ValueError("need an input, at least one hidden and an output layer")
    if min(widths) < 1:
        raise ValueError(f"all widths must be positive, got {widths}")
    hidden = widths[1:-1]
    max_widths = list(hidden) if max_widths is None else [int(m) for m in max_widths]
    if len(max_widths) != len(hidden):
        raise ValueError("one max width per hidden layer is required")
    for w, m in zip(hidden, max_widths):
        if w > m:
            raise CapacityError(f"initial width {w} exceeds max width {m}")
    rng = _rng(seed)
    weights = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = xavier_bound(fan_in + 1, fan_out)
        W = np.zeros((fan_out, fan_in + 1))
        W[:, :-1] = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        weights.append(W)
    return DenseNet(weights, max_widths)


def forward(net: DenseNet, X) -> ForwardTrace:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != net.widths[0]:
        raise ShapeError(f"input has shape {X.shape}, network expects {net.widths[0]} rows")
    Z, H = [None], [X]
    last = len(net.weights)
    for l, W in enumerate(net.weights, start=1):
        z = W[:, :-1] @ H[-1] + W[:, -1:]
        Z.append(z)
        H.append(z if l == last else modified_relu(z))
    return ForwardTrace(Z, H)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def cross_entropy(logits: np.ndarray, labels) -> float:
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    shifted = logits - logits.max(axis=0, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    return float(-logp[labels, np.arange(labels.size)].mean())


def _check_labels(labels, n_classes: int, n: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range for {n_classes} classes")
    return labels.astype(np.int64)


def backward(net: DenseNet, trace: ForwardTrace, labels) -> Gradients:
    """Backprop of mean softmax cross-entropy through ``trace``."""
    logits = trace.logits
    n = logits.shape[1]
    labels = _check_labels(labels, logits.shape[0], n)
    loss = cross_entropy(logits, labels)
    dz = softmax(logits)
    dz[labels, np.arange(n)] -= 1.0
    dz /= n
    L = len(net.weights)
    dW: list = [None] * L
    dZ: list = [None] * (L + 1)
    for l in range(L, 0, -1):
        dZ[l] = dz
        H_prev = trace.H[l - 1]
        g = np.empty_like(net.W(l))
        g[:, :-1] = dz @ H_prev.T
        g[:, -1] = dz.sum(axis=1)
        dW[l - 1] = g
        if l > 1:
            dz = (net.W(l)[:, :-1].T @ dz) * modified_relu_grad(trace.Z[l - 1])
    return Gradients(dW, dZ, loss)


def loss_and_grads(net: DenseNet, X, labels) -> tuple[ForwardTrace, Gradients]:
    trace = forward(net, X)
    return trace, backward(net, trace, labels)


def adam_step(net: DenseNet, state: AdamState, grads) -> None:
    """One bias-corrected Adam update, in place on ``net`` and ``state``."""
    dW = grads.dW if isinstance(grads, Gradients) else grads
    if len(dW) != len(net.weights):
        raise ShapeError("gradient list does not match the network")
    for W, g in zip(net.weights, dW):
        if W.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match weight shape {W.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for W, g, m, v in zip(net.weights, dW, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        W -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def grow_layer(net: DenseNet, state: AdamState | None, l: int, fan_in, fan_out) -> None:
    """Append ``k`` neurons to hidden layer ``l`` in place.

    ``fan_in`` (``k x (M_{l-1}+1)``) becomes the bottom rows of ``W_l``;
    ``fan_out`` (``M_{l+1} x k``) is inserted into ``W_{l+1}`` just left of the
    bias column. Adam moments of the new entries start at zero.
    """
    if not 1 <= l <= net.depth:
        raise ValueError(f"layer {l} is not a hidden layer")
    fan_in = np.atleast_2d(np.asarray(fan_in, dtype=np.float64))
    fan_out = np.asarray(fan_out, dtype=np.float64)
    if fan_out.ndim == 1:
        fan_out = fan_out[:, None]
    k = fan_in.shape[0] if fan_in.size else 0
    W, W_next = net.W(l), net.W(l + 1)
    if k == 0:
        return
    if fan_in.shape != (k, W.shape[1]):
        raise ShapeError(f"fan-in block {fan_in.shape}, expected {(k, W.shape[1])}")
    if fan_out.shape != (W_next.shape[0], k):
        raise ShapeError(f"fan-out block {fan_out.shape}, expected {(W_next.shape[0], k)}")
    if W.shape[0] + k > net.max_widths[l - 1]:
        raise CapacityError(f"layer {l}: {W.shape[0]} + {k} exceeds max width {net.max_widths[l - 1]}")

    net.weights[l - 1] = np.vstack([W, fan_in])
    net.weights[l] = np.hstack([W_next[:, :-1], fan_out, W_next[:, -1:]])
    if state is not None:
        for moments in (state.m, state.v):
            moments[l - 1] = np.vstack([moments[l - 1], np.zeros((k, W.shape[1]))])
            nxt = moments[l]
            moments[l] = np.hstack([nxt[:, :-1], np.zeros((nxt.shape[0], k)), nxt[:, -1:]])


def set_neurons(net: DenseNet, l: int, idx, fan_in_rows, fan_out_cols) -> None:
    """Overwrite the fan-in rows and fan-out columns of existing neurons ``idx`` of layer ``l``."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        return
    net.W(l)[idx, :] = fan_in_rows
    net.W(l + 1)[:, idx] = fan_out_cols


def mean_row_norm(net: DenseNet, l: int) -> float:
    W = net.W(l)
    return float(np.linalg.norm(W, axis=1).mean()) if W.shape[0] else 0.0


def mean_fan_out_norm(net: DenseNet, l: int) -> float:
    cols = net.W(l + 1)[:, :-1]
    return float(np.linalg.norm(cols, axis=0).mean()) if cols.shape[1] else 0.0


def rescale_to_norm(w, target: float) -> np.ndarray:
    """Scale each row of ``w`` to Euclidean norm ``target``; zero rows stay zero."""
    w = np.asarray(w, dtype=np.float64)
    norms = np.linalg.norm(w, axis=-1, keepdims=True)
    scale = np.divide(target, norms, out=np.zeros_like(norms), where=norms > 0)
    return w * scale


def rescale_to_layer_norm(net: DenseNet, l: int, w) -> np.ndarray:
    """Scale a candidate fan-in (vector or rows) to the mean row norm of ``W_l``."""
    if net.W(l).shape[0] == 0:
        raise ValueError(f"layer {l} has no neurons to take a norm from")
    return rescale_to_norm(w, mean_row_norm(net, l))


def save_checkpoint(path, net: DenseNet, state: AdamState | None = None, rng: np.random.Generator | None = None) -> None:
    doc = {
        "widths": net.widths,
        "max_widths": net.max_widths,
        "weights": [W.ravel().tolist() for W in net.weights],
    }
    if state is not None:
        doc["adam"] = {
            "lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps, "t": state.t,
            "m": [a.ravel().tolist() for a in state.m],
            "v": [a.ravel().tolist() for a in state.v],
        }
    if rng is not None:
        doc["rng_state"] = rng.bit_generator.state
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[DenseNet, AdamState | None, np.random.Generator | None]:
    doc = json.loads(Path(path).read_text())
    widths = doc["widths"]
    shapes = [(o, i + 1) for i, o in zip(widths[:-1], widths[1:])]
    net = DenseNet([np.array(w, dtype=np.float64).reshape(s) for w, s in zip(doc["weights"], shapes)],
                   list(doc["max_widths"]))
    net.check()
    state = None
    if "adam" in doc:
        a = doc["adam"]
        state = AdamState(a["lr"], a["beta1"], a["beta2"], a["eps"], a["t"],
                          [np.array(x).reshape(s) for x, s in zip(a["m"], shapes)],
                          [np.array(x).reshape(s) for x, s in zip(a["v"], shapes)])
    rng = None
    if "rng_state" in doc:
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = doc["rng_state"]
    return net, state, rng
