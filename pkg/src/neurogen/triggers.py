"""Growth triggers: how many neurons each hidden layer should gain after a step."""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from neurogen import linalg
from neurogen.metrics import MetricKind, NotEvaluable, weight_effective_dimension

log = logging.getLogger(__name__)


class TriggerKind(str, enum.Enum):
    ACTIVATION = "activation"
    WEIGHT = "weight"
    GRADIENT = "gradient"
    PRESET_LINEAR = "preset_linear"
    PRESET_BATCHED = "preset_batched"
    STATIC = "static"

    @property
    def is_preset(self) -> bool:
        return self in (TriggerKind.PRESET_LINEAR, TriggerKind.PRESET_BATCHED)


@dataclass
class TriggerConfig:
    kind: TriggerKind = TriggerKind.ACTIVATION
    gamma_a: float = 0.97
    gamma_w: float = 0.99
    metric: MetricKind = field(default_factory=MetricKind)
    evaluation_period: int = 1
    baselines: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = TriggerKind(self.kind)
        for name in ("gamma_a", "gamma_w"):
            g = getattr(self, name)
            if not 0 < g <= 1.5:
                raise ValueError(f"{name} must be in (0, 1.5], got {g}")
        if self.evaluation_period < 1:
            raise ValueError("evaluation_period must be >= 1")


@dataclass
class GrowthEvent:
    step: int
    layer: int
    neurons_added: int
    width: int
    metric_before: float
    metric_after: float
    trigger_kind: str


class Decision(NamedTuple):
    count: int
    metric: float


def threshold_count(phi: float, baseline: float, gamma: float, width: int) -> int:
    """``max(0, floor(width * (phi - gamma * baseline)))``.

    The small offset absorbs float rounding when the product lands on an integer.
    """
    value = width * (phi - gamma * baseline)
    return max(0, math.floor(value + 1e-9))


def clamp_to_capacity(count: int, width: int, max_width: int) -> int:
    return max(0, min(count, max_width - width))


def activation_metric(buf, cfg: TriggerConfig, l: int) -> float:
    return cfg.metric(buf.activations(l))


def capture_baselines(net, buf, cfg: TriggerConfig) -> dict:
    """Record each hidden layer's metric on the untrained network as its baseline."""
    baselines = {}
    for l in net.hidden_layers():
        if cfg.kind is TriggerKind.WEIGHT:
            baselines[l] = weight_effective_dimension(net.W(l), cfg.metric.eps)
        elif cfg.kind is TriggerKind.ACTIVATION:
            if not buf.is_full(l):
                raise ValueError(f"activation buffer for layer {l} is not full")
            baselines[l] = activation_metric(buf, cfg, l)
    cfg.baselines = baselines
    return baselines


def evaluate_activation(net, buf, cfg: TriggerConfig, l: int) -> Decision:
    width = net.W(l).shape[0]
    cap = net.max_widths[l - 1]
    if width >= cap or not buf.is_full(l):
        return Decision(0, math.nan)
    try:
        phi = activation_metric(buf, cfg, l)
    except NotEvaluable as exc:
        log.info("layer %d: activation metric skipped (%s)", l, exc)
        return Decision(0, math.nan)
    count = threshold_count(phi, cfg.baselines[l], cfg.gamma_a, width)
    return Decision(clamp_to_capacity(count, width, cap), phi)


def trigger_activation(net, buf, cfg: TriggerConfig, l: int) -> int:
    return evaluate_activation(net, buf, cfg, l).count


def evaluate_weight(net, cfg: TriggerConfig, l: int) -> Decision:
    width = net.W(l).shape[0]
    cap = net.max_widths[l - 1]
    if width >= cap:
        return Decision(0, math.nan)
    phi = weight_effective_dimension(net.W(l), cfg.metric.eps)
    count = threshold_count(phi, cfg.baselines[l], cfg.gamma_w, width)
    return Decision(clamp_to_capacity(count, width, cap), phi)


def trigger_weight(net, cfg: TriggerConfig, l: int) -> int:
    return evaluate_weight(net, cfg, l).count


def auxiliary_gradient(trace, grads, l: int, bias: bool = True) -> np.ndarray:
    """``dL/dZ_{l+1} @ H_{l-1}^T``: the gradient of a zero bridge from layer ``l-1`` to ``l+1``."""
    H = trace.augmented(l - 1) if bias else trace.H[l - 1]
    return grads.dZ[l + 1] @ H.T


def existing_gradient_norm_sum(net, grads, l: int) -> float:
    """Sum over neurons of layer ``l`` of their fan-in plus fan-out gradient norms."""
    fan_in = np.linalg.norm(grads.dW[l - 1], axis=1)
    fan_out = np.linalg.norm(grads.dW[l][:, :-1], axis=0)
    return float(fan_in.sum() + fan_out.sum())


def gradient_count(G: np.ndarray, threshold: float) -> int:
    return int(np.count_nonzero(linalg.singular_values(G) > threshold))


def evaluate_gradient(net, trace, grads, l: int, cap_by_next: bool = False) -> Decision:
    width = net.W(l).shape[0]
    cap = net.max_widths[l - 1]
    if width >= cap:
        return Decision(0, math.nan)
    G = auxiliary_gradient(trace, grads, l)
    threshold = existing_gradient_norm_sum(net, grads, l)
    s = linalg.singular_values(G)
    count = int(np.count_nonzero(s > threshold))
    if cap_by_next:
        count = min(count, net.W(l + 1).shape[0])
    ratio = float(s[0] / threshold) if threshold > 0 else (math.inf if s[0] > 0 else 0.0)
    return Decision(clamp_to_capacity(count, width, cap), ratio)


def trigger_gradient(net, trace, grads, l: int, cap_by_next: bool = False) -> int:
    return evaluate_gradient(net, trace, grads, l, cap_by_next).count


def preset_schedule(kind, step: int, total_steps: int, start_width: int, final_width: int,
                    width: int | None = None, fraction: float = 0.75, installments: int = 8) -> int:
    """Neurons to add after gradient step ``step`` (1-based) under a fixed timetable.

    Growth is confined to the first ``fraction`` of ``total_steps``. Linear adds
    one neuron per step; Batched adds ``(final - start) // installments`` at each
    of ``installments`` evenly spaced steps, the remainder going to the last one.
    ``width`` (the layer's current width) clamps the result at ``final_width``.
    """
    kind = TriggerKind(kind)
    if final_width < start_width:
        raise ValueError("final width must be >= start width")
    window = int(math.floor(fraction * total_steps))
    total = final_width - start_width
    count = 0
    if kind is TriggerKind.PRESET_LINEAR:
        count = 1 if step <= min(window, total) else 0
    elif kind is TriggerKind.PRESET_BATCHED:
        if step <= window and window > 0:
            events = [max(1, (j + 1) * window // installments) for j in range(installments)]
            per = total // installments
            hits = [j for j, s in enumerate(events) if s == step]
            for j in hits:
                count += per + (total - per * installments if j == installments - 1 else 0)
    if width is not None:
        count = min(count, max(0, final_width - width))
    return count
