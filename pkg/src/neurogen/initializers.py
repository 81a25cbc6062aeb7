"""Weights for new neurons.

Orthogonality-based strategies (random, select, pre-activation, weight) and
the gradient-based comparators (GradMax, Firefly, NeST). Each returns a
:class:`NewNeurons` block that :func:`apply_growth` splices into the network.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from neurogen import kernels, linalg
from neurogen.metrics import MetricKind, MetricName
from neurogen.network import (
    DenseNet,
    grow_layer,
    mean_fan_out_norm,
    mean_row_norm,
    modified_relu,
    modified_relu_grad,
    rescale_to_norm,
    set_neurons,
    xavier_bound,
)
from neurogen.triggers import auxiliary_gradient

log = logging.getLogger(__name__)


class InitKind(str, enum.Enum):
    RANDOM = "random"
    SELECT = "select"
    PREACTIVATION = "preactivation"
    WEIGHT = "weight"
    GRADMAX = "gradmax"
    FIREFLY = "firefly"
    NEST = "nest"


class GrowthImpossible(ValueError):
    """The initializer cannot produce any neuron for this layer (e.g. empty kernel)."""


@dataclass
class NewNeurons:
    fan_in: np.ndarray
    fan_out: np.ndarray
    provenance: list = field(default_factory=list)
    parent_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    parent_fan_in: np.ndarray | None = None
    parent_fan_out: np.ndarray | None = None
    score: float = float("nan")

    @property
    def k(self) -> int:
        return self.fan_in.shape[0]


@dataclass
class CandidatePool:
    fan_in: np.ndarray
    provenance: list

    @property
    def size(self) -> int:
        return self.fan_in.shape[0]


def empty(net: DenseNet, l: int) -> NewNeurons:
    return NewNeurons(np.zeros((0, net.W(l).shape[1])), np.zeros((net.W(l + 1).shape[0], 0)))


def base_fan_in(net: DenseNet, l: int, count: int, rng) -> np.ndarray:
    """Xavier-uniform fan-in rows for layer ``l`` with zero bias."""
    fan_in = net.W(l).shape[1]
    bound = xavier_bound(fan_in, net.W(l).shape[0])
    rows = np.zeros((count, fan_in))
    rows[:, :-1] = rng.uniform(-bound, bound, size=(count, fan_in - 1))
    return rows


def _zero_fan_out(net: DenseNet, l: int, k: int) -> np.ndarray:
    return np.zeros((net.W(l + 1).shape[0], k))


def init_random(net: DenseNet, l: int, k: int, rng) -> NewNeurons:
    if k == 0:
        return empty(net, l)
    rows = rescale_to_norm(base_fan_in(net, l, k, rng), mean_row_norm(net, l))
    return NewNeurons(rows, _zero_fan_out(net, l, k), ["random"] * k)


# -- candidate scoring ---------------------------------------------------------

def _augment(H: np.ndarray) -> np.ndarray:
    return np.vstack([H, np.ones((1, H.shape[1]))])


def candidate_activations(fan_in: np.ndarray, H_prev: np.ndarray) -> np.ndarray:
    """Post-activation rows (one per candidate) over the buffered samples."""
    return modified_relu(fan_in @ _augment(H_prev))


def score_effective_dimension(H: np.ndarray, C: np.ndarray, eps: float, k: int | None = None):
    """Effective dimension of ``[H; c]`` and the singular-value sum of ``[H; c] / sqrt(n)`` per candidate row ``c``.

    Uses the thin SVD of ``H`` once; each candidate then reduces to the
    spectrum of ``diag(S^2, 0) + z z^T`` with ``z = (V^T c, ||c - V V^T c||)``.
    When ``k`` is given, singular-value sums are only computed for candidates
    that can still make the top ``k`` on effective dimension.
    """
    M, n = H.shape
    A = H / np.sqrt(n)
    Cs = C / np.sqrt(n)
    _, S, V = linalg.svd(A)
    coords = Cs @ V
    resid = Cs - coords @ V.T
    rho = np.linalg.norm(resid, axis=1)
    # ascending poles: the residual direction (0), then S^2 from smallest
    d = np.concatenate([[0.0], (S[::-1]) ** 2])
    Z = np.hstack([rho[:, None], coords[:, ::-1]])
    counts, _ = kernels.rank_one_spectra(d, Z, eps * eps, with_sums=False)
    sums = np.full(C.shape[0], -np.inf)
    need = np.ones(C.shape[0], dtype=bool)
    if k is not None and k < C.shape[0]:
        kth = np.sort(counts)[::-1][k - 1]
        need = counts >= kth
    if need.any():
        _, s = kernels.rank_one_spectra(d, Z[need], eps * eps, with_sums=True)
        sums[need] = s
    return counts / (M + 1), sums


def score_orthogonality_gap(H: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Orthogonality gap of ``[H; c]`` per candidate row, without forming ``n x n`` matrices."""
    n = H.shape[1]
    gram = H @ H.T
    base_sq = float(np.sum(gram * gram))
    cross = H @ C.T
    c_sq = np.sum(C * C, axis=1)
    total = float(np.sum(H * H)) + c_sq
    frob_sq = base_sq + 2.0 * np.sum(cross * cross, axis=0) + c_sq * c_sq
    gap_sq = np.maximum(frob_sq / total**2 - 1.0 / n, 0.0)
    return 1.0 - np.sqrt(gap_sq)


def score_candidates(H: np.ndarray, C: np.ndarray, metric: MetricKind, k: int | None = None):
    """``(primary, secondary)`` scores; higher is better on both."""
    if metric.name is MetricName.EFFECTIVE_DIMENSION:
        return score_effective_dimension(H, C, metric.eps, k)
    og = score_orthogonality_gap(H, C)
    return og, og


def top_k(primary: np.ndarray, secondary: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` best candidates by (primary, secondary), lowest index on ties."""
    order = np.lexsort((np.arange(primary.size), -secondary, -primary))
    return order[:k]


def select_from_pool(net, l: int, k: int, pool: CandidatePool, H_prev, H_l, metric: MetricKind) -> NewNeurons:
    rows = rescale_to_norm(pool.fan_in, mean_row_norm(net, l))
    C = candidate_activations(rows, H_prev)
    primary, secondary = score_candidates(H_l, C, metric, k)
    chosen = top_k(primary, secondary, k)
    return NewNeurons(rows[chosen], _zero_fan_out(net, l, k),
                      [pool.provenance[i] for i in chosen], score=float(primary[chosen[0]]))


def _buffered(buf, l: int):
    if not buf.is_full(l):
        raise ValueError(f"activation buffer for layer {l} is not full")
    return buf.aligned(l)


def init_select(net: DenseNet, buf, l: int, k: int, rng, metric: MetricKind, candidates: int = 1000) -> NewNeurons:
    if k == 0:
        return empty(net, l)
    H_prev, _, H_l = _buffered(buf, l)
    pool = CandidatePool(base_fan_in(net, l, candidates + k, rng), ["random"] * (candidates + k))
    return select_from_pool(net, l, k, pool, H_prev, H_l, metric)


def preactivation_pool(net: DenseNet, H_prev, Z_l, count: int, rng) -> CandidatePool:
    """Fan-ins whose pre-activations lie in the kernel of the existing pre-activations.

    ``w = pinv(H_prev_aug^T) @ V' @ a`` where ``V'`` holds the right ``n - M_l``
    singular vectors of ``Z_l`` and ``a`` is standard normal per candidate.
    """
    M, n = Z_l.shape
    if n <= M:
        raise GrowthImpossible(f"need more buffered samples than neurons ({n} <= {M})")
    V_kernel = linalg.svd(Z_l, full=True).V[:, M:]
    left_inv = linalg.pseudoinverse(_augment(H_prev).T)
    A = rng.standard_normal((n - M, count))
    W = (left_inv @ V_kernel) @ A
    return CandidatePool(W.T.copy(), ["preactivation"] * count)


def init_preactivation(net: DenseNet, buf, l: int, k: int, rng, metric: MetricKind, candidates: int = 1000) -> NewNeurons:
    if k == 0:
        return empty(net, l)
    H_prev, Z_l, H_l = _buffered(buf, l)
    pool = preactivation_pool(net, H_prev, Z_l, candidates + k, rng)
    return select_from_pool(net, l, k, pool, H_prev, H_l, metric)


def weight_kernel(net: DenseNet, l: int) -> np.ndarray:
    W = net.W(l)
    s = linalg.singular_values(W)
    tol = max(W.shape) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    return linalg.kernel_basis(W, tol)


def init_weight(net: DenseNet, l: int, k: int, rng) -> NewNeurons:
    """Random base fan-ins projected onto the kernel of ``W_l``.

    At most ``dim ker W_l`` neurons are produced per call.
    """
    if k == 0:
        return empty(net, l)
    B = weight_kernel(net, l)
    if B.shape[1] == 0:
        raise GrowthImpossible(f"W_{l} has full column rank; its kernel is empty")
    if k > B.shape[1]:
        log.info("layer %d: clamping %d weight-kernel neurons to kernel dimension %d", l, k, B.shape[1])
        k = B.shape[1]
    rows = base_fan_in(net, l, k, rng)
    rows = linalg.project_onto_columns(rows.T, B).T
    rows = rescale_to_norm(rows, mean_row_norm(net, l))
    return NewNeurons(rows, _zero_fan_out(net, l, k), ["weight"] * k)


# -- gradient-based comparators ------------------------------------------------

def init_gradmax(net: DenseNet, trace, grads, l: int, k: int) -> NewNeurons:
    """Zero fan-in; fan-out columns are the top-``k`` left singular vectors of the auxiliary gradient."""
    limit = net.W(l + 1).shape[0]
    if k > limit:
        raise ValueError(f"GradMax can add at most {limit} neurons to layer {l}, asked for {k}")
    if k == 0:
        return empty(net, l)
    G = auxiliary_gradient(trace, grads, l)
    U, S, _ = linalg.svd(G)
    fan_out = U[:, :k] * mean_fan_out_norm(net, l)
    fan_in = np.zeros((k, net.W(l).shape[1]))
    return NewNeurons(fan_in, fan_out, ["gradmax"] * k, score=float(S[0]))


def candidate_gradient_norms(trace, grads, l: int, fan_in: np.ndarray, fan_out: np.ndarray) -> np.ndarray:
    """Loss-gradient norm of each candidate's own weights, at the current point.

    Candidate ``j`` has fan-in row ``fan_in[j]`` and fan-out column
    ``fan_out[:, j]``; ``dL/dZ_{l+1}`` is taken from the cached backward pass.
    """
    H_aug = trace.augmented(l - 1)
    dZ_next = grads.dZ[l + 1]
    Zc = fan_in @ H_aug
    Hc = modified_relu(Zc)
    d_out = dZ_next @ Hc.T
    dzc = (fan_out.T @ dZ_next) * modified_relu_grad(Zc)
    d_in = dzc @ H_aug.T
    return np.sqrt(np.sum(d_in * d_in, axis=1) + np.sum(d_out * d_out, axis=0))


def _uniform_directions(rng, shape, norm: float) -> np.ndarray:
    return rescale_to_norm(rng.uniform(-1.0, 1.0, size=shape), norm)


@dataclass
class FireflyPool:
    fan_in: np.ndarray
    fan_out: np.ndarray
    parents: np.ndarray
    delta: np.ndarray

    @property
    def n_split(self) -> int:
        return self.parents.size


def firefly_pool(net: DenseNet, l: int, size: int, rng, eps_firefly: float = 1e-4) -> FireflyPool:
    """Split candidates (one per sampled parent, up to half the pool) followed by fresh ones.

    A split candidate copies a parent, perturbs the fan-ins of the copy and
    the parent by ``+delta``/``-delta`` and halves the parent's fan-out between
    them. Fresh candidates get a random rescaled fan-in and a small random fan-out.
    """
    W, W_next = net.W(l), net.W(l + 1)
    M = W.shape[0]
    n_split = min(M, size // 2)
    parents = np.sort(rng.choice(M, size=n_split, replace=False)) if n_split < M else np.arange(M)
    row_norm = mean_row_norm(net, l)
    delta = _uniform_directions(rng, (n_split, W.shape[1]), eps_firefly * row_norm)
    n_fresh = size - n_split
    fresh_in = rescale_to_norm(base_fan_in(net, l, n_fresh, rng), row_norm)
    fresh_out = _uniform_directions(rng, (n_fresh, W_next.shape[0]), eps_firefly * mean_fan_out_norm(net, l)).T
    return FireflyPool(
        np.vstack([W[parents] + delta, fresh_in]),
        np.hstack([0.5 * W_next[:, parents], fresh_out]),
        parents,
        delta,
    )


def init_firefly(net: DenseNet, trace, grads, l: int, k: int, rng, eps_firefly: float = 1e-4,
                 candidates: int = 1000) -> NewNeurons:
    """Keep the ``k`` pool candidates with the largest gradient norm; chosen splits adjust their parents."""
    if k == 0:
        return empty(net, l)
    pool = firefly_pool(net, l, candidates + k, rng, eps_firefly)
    norms = candidate_gradient_norms(trace, grads, l, pool.fan_in, pool.fan_out)
    chosen = top_k(norms, norms, k)
    split_chosen = chosen[chosen < pool.n_split]
    p_idx = pool.parents[split_chosen]
    provenance = [f"split({pool.parents[c]})" if c < pool.n_split else "random" for c in chosen]
    return NewNeurons(
        pool.fan_in[chosen], pool.fan_out[:, chosen], provenance,
        parent_idx=p_idx,
        parent_fan_in=net.W(l)[p_idx] - pool.delta[split_chosen],
        parent_fan_out=0.5 * net.W(l + 1)[:, p_idx],
        score=float(norms[chosen[0]]),
    )


def init_nest(net: DenseNet, trace, grads, l: int, k: int, rng, quantile: float = 0.4,
              rescale: bool = True) -> NewNeurons:
    """Sparse neurons bridging the strongest auxiliary-gradient connections.

    Entries of ``G = dL/dZ_{l+1} H_{l-1}^T`` in the top ``quantile`` by
    magnitude form the support; a new neuron's fan-in from source ``j`` is the
    root sum of squares of column ``j`` over the support and its fan-out to
    target ``i`` that of row ``i``, each with an independent random sign.
    """
    if k == 0:
        return empty(net, l)
    G = auxiliary_gradient(trace, grads, l, bias=False)
    mag = np.abs(G)
    tau = np.quantile(mag, 1.0 - quantile)
    support = np.where(mag >= tau, G * G, 0.0)
    col = np.sqrt(support.sum(axis=0))
    row = np.sqrt(support.sum(axis=1))
    if not col.any():
        log.info("layer %d: auxiliary gradient is zero, NeST neurons are all-zero", l)
    signs_in = rng.choice([-1.0, 1.0], size=(k, col.size))
    signs_out = rng.choice([-1.0, 1.0], size=(row.size, k))
    fan_in = np.zeros((k, net.W(l).shape[1]))
    fan_in[:, :-1] = signs_in * col
    fan_out = signs_out * row[:, None]
    if rescale:
        fan_in = rescale_to_norm(fan_in, mean_row_norm(net, l))
        fan_out = rescale_to_norm(fan_out.T, mean_fan_out_norm(net, l)).T
    return NewNeurons(fan_in, fan_out, ["nest"] * k, score=float(mag.max()))


def apply_growth(net: DenseNet, state, l: int, new: NewNeurons) -> None:
    """Apply parent adjustments (Firefly splits) and append the new neurons."""
    if new.parent_idx.size:
        set_neurons(net, l, new.parent_idx, new.parent_fan_in, new.parent_fan_out)
    grow_layer(net, state, l, new.fan_in, new.fan_out)
