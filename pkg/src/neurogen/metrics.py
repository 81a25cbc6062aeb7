"""Orthogonality metrics and the rolling activation buffer that feeds them."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from neurogen import linalg


class NotEvaluable(ValueError):
    """The metric is undefined for this input (too few samples, all-zero matrix)."""


class BufferWidthError(ValueError):
    """A trace does not match the buffer's layer widths; the buffer must be rebuilt."""


class MetricName(str, enum.Enum):
    EFFECTIVE_DIMENSION = "effective_dimension"
    ORTHOGONALITY_GAP = "orthogonality_gap"


@dataclass(frozen=True)
class MetricKind:
    name: MetricName = MetricName.EFFECTIVE_DIMENSION
    eps: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "name", MetricName(self.name))
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    def __call__(self, H: np.ndarray) -> float:
        if self.name is MetricName.EFFECTIVE_DIMENSION:
            return effective_dimension(H, H.shape[1], self.eps)
        return orthogonality_gap(H)


def effective_dimension(M, n: int | None = None, eps: float = 0.01, require_wide: bool = True) -> float:
    """Fraction of singular values of ``M / sqrt(n)`` strictly above ``eps``.

    ``n`` defaults to the number of columns. When ``require_wide`` is set (the
    activation use) the matrix must have more columns than rows, otherwise
    :class:`NotEvaluable` is raised.
    """
    M = np.asarray(M, dtype=np.float64)
    rows, cols = M.shape
    n = cols if n is None else n
    if require_wide and cols <= rows:
        raise NotEvaluable(f"need more samples than rows ({cols} <= {rows})")
    s = linalg.singular_values(M / np.sqrt(n))
    return np.count_nonzero(s > eps) / rows


def weight_effective_dimension(W, eps: float = 0.01) -> float:
    """Effective dimension of a weight matrix, scaled by its column count (bias column included)."""
    W = np.asarray(W, dtype=np.float64)
    return effective_dimension(W, W.shape[1], eps, require_wide=False)


def orthogonality_gap(H) -> float:
    """``1 - || H^T H / ||H||_F^2 - I_n / n ||_F`` over the ``n`` sample columns of ``H``."""
    H = np.asarray(H, dtype=np.float64)
    sq = float(np.sum(H * H))
    if sq == 0.0:
        raise NotEvaluable("orthogonality gap of an all-zero matrix")
    n = H.shape[1]
    G = (H.T @ H) / sq
    G[np.diag_indices(n)] -= 1.0 / n
    return 1.0 - float(np.linalg.norm(G))


class ActivationBuffer:
    """Most recent ``capacity`` sample columns of the input and every hidden layer.

    Columns are kept oldest-to-newest. Each layer has its own fill count so a
    layer can be invalidated after growth and refill from later pushes; when a
    layer is full, its columns line up with the same samples in all lower layers.
    """

    def __init__(self, widths, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.widths = [int(w) for w in widths]
        self._H = [np.zeros((w, self.capacity)) for w in self.widths]
        self._Z = [None] + [np.zeros((w, self.capacity)) for w in self.widths[1:]]
        self.fill = [0] * len(self.widths)

    @classmethod
    def for_net(cls, net, capacity: int) -> ActivationBuffer:
        return cls(net.widths[:-1], capacity)

    @property
    def depth(self) -> int:
        return len(self.widths) - 1

    def push(self, trace) -> None:
        for l in range(self.depth + 1):
            if trace.H[l].shape[0] != self.widths[l]:
                raise BufferWidthError(
                    f"layer {l} has width {trace.H[l].shape[0]} but the buffer holds {self.widths[l]}")
        b = min(trace.n, self.capacity)
        for l in range(self.depth + 1):
            self._append(self._H[l], trace.H[l][:, -b:], b)
            if l:
                self._append(self._Z[l], trace.Z[l][:, -b:], b)
            self.fill[l] = min(self.capacity, self.fill[l] + b)

    @staticmethod
    def _append(buf, cols, b):
        if b < buf.shape[1]:
            buf[:, :-b] = buf[:, b:]
        buf[:, -b:] = cols

    def invalidate(self, l: int, widths) -> None:
        """Drop layers ``>= l`` and resize them to ``widths`` (the net's current widths)."""
        for j in range(l, self.depth + 1):
            self.widths[j] = int(widths[j])
            self._H[j] = np.zeros((self.widths[j], self.capacity))
            self._Z[j] = np.zeros((self.widths[j], self.capacity))
            self.fill[j] = 0

    def refresh(self, net) -> None:
        """Recompute all hidden layers from the buffered inputs with the current net."""
        from neurogen.network import forward

        self.invalidate(1, net.widths)
        if self.fill[0]:
            trace = forward(net, self.inputs())
            for l in range(1, self.depth + 1):
                self._append(self._H[l], trace.H[l], trace.n)
                self._append(self._Z[l], trace.Z[l], trace.n)
                self.fill[l] = self.fill[0]

    def is_full(self, l: int) -> bool:
        return self.fill[l] == self.capacity

    def inputs(self) -> np.ndarray:
        return self._H[0][:, self.capacity - self.fill[0]:]

    def activations(self, l: int) -> np.ndarray:
        """Buffered ``H_l`` (``H_0`` is the input), restricted to filled columns."""
        return self._H[l][:, self.capacity - self.fill[l]:]

    def preactivations(self, l: int) -> np.ndarray:
        return self._Z[l][:, self.capacity - self.fill[l]:]

    def aligned(self, l: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(H_{l-1}, Z_l, H_l)`` over the samples currently held by layer ``l``."""
        m = self.fill[l]
        start = self.capacity - m
        return self._H[l - 1][:, start:], self._Z[l][:, start:], self._H[l][:, start:]
