"""Graph label propagation over support + query, confidence scoring and balanced picking."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

logger = logging.getLogger(__name__)

DEGREE_EPS = 1e-12


class IsolatedNodeWarning(RuntimeWarning):
    pass


@dataclass
class SimilarityGraph:
    """Sparsified symmetric affinity matrix; rows are support items then query items.

    ``weights`` stays attached to the expression graph so callers can
    differentiate through it.
    """

    weights: Tensor
    k_nn: int

    @property
    def W(self) -> np.ndarray:
        return self.weights.value

    @property
    def size(self) -> int:
        return self.weights.shape[0]


@dataclass
class PropagationResult:
    scores: np.ndarray       # (T, N) query rows of the propagated label matrix
    confidence: np.ndarray   # (T,)
    pseudo_label: np.ndarray  # (T,)


@dataclass
class PickedSet:
    indices: np.ndarray  # query indices
    labels: np.ndarray   # their pseudo labels
    per_class: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def k(self) -> int:
        return int(self.per_class[0]) if len(self.per_class) else 0

    def __len__(self) -> int:
        return len(self.indices)


def label_matrix(support_y: np.ndarray, n_query: int, n_way: int) -> np.ndarray:
    """One-hot rows for support items followed by zero rows for the queries."""
    Y = np.zeros((len(support_y) + n_query, n_way))
    Y[np.arange(len(support_y)), support_y] = 1.0
    return Y


def knn_mask(raw: np.ndarray, k_nn: int) -> np.ndarray:
    """0/1 mask keeping each row's ``k_nn`` largest off-diagonal entries.

    Ties go to the lower column index.
    """
    M = raw.shape[0]
    k = min(k_nn, M - 1)
    keyed = raw.copy()
    np.fill_diagonal(keyed, -np.inf)
    order = np.argsort(-keyed, axis=1, kind="stable")[:, :k]
    mask = np.zeros_like(raw)
    np.put_along_axis(mask, order, 1.0, axis=1)
    return mask


def build_similarity(features, sigmas, k_nn: int = 20, squared: bool = True) -> SimilarityGraph:
    """Gaussian affinities exp(-d(f_i/s_i, f_j/s_j) / 2), kNN-sparsified and symmetrized.

    ``features`` is (M, d), ``sigmas`` is (M,). With ``squared=False`` the
    plain Euclidean distance replaces the squared one.
    """
    features = dc.as_tensor(features)
    sigmas = dc.as_tensor(sigmas)
    M = features.shape[0]
    if M < 2:
        raise ValueError("need at least two nodes")
    if k_nn < 1:
        raise ValueError("k_nn must be >= 1")
    if sigmas.shape != (M,):
        raise dc.ShapeError("build_similarity", features.shape, sigmas.shape)
    if np.any(sigmas.value <= 0):
        raise ValueError("length scales must be positive")
    scaled = dc.div(features, dc.reshape(sigmas, (M, 1)))
    dist = dc.pairwise_sqdist(scaled)
    if not squared:
        dist = dc.power(dc.add(dist, np.eye(M) + 1e-12), 0.5)
    raw = dc.exp(dc.scale(dist, -0.5))
    mask = knn_mask(raw.value, k_nn)
    kept = dc.mul(raw, mask)
    W = dc.maximum(kept, dc.transpose(kept))
    return SimilarityGraph(W, k_nn)


def normalize_laplacian(graph: SimilarityGraph | Tensor) -> Tensor:
    """S = D^-1/2 W D^-1/2 with D the row sums of W.

    A node with zero degree gets D_ii = 1e-12 and an IsolatedNodeWarning.
    """
    W = graph.weights if isinstance(graph, SimilarityGraph) else dc.as_tensor(graph)
    deg = dc.sum_(W, axis=1)
    isolated = np.flatnonzero(deg.value <= 0)
    if len(isolated):
        warnings.warn(f"isolated nodes {isolated.tolist()}: degree replaced by {DEGREE_EPS}",
                      IsolatedNodeWarning, stacklevel=2)
        fix = np.zeros(deg.shape)
        fix[isolated] = DEGREE_EPS
        deg = dc.add(deg, fix)
    d = dc.power(deg, -0.5)
    M = d.shape[0]
    return dc.mul(dc.mul(W, dc.reshape(d, (M, 1))), dc.reshape(d, (1, M)))


def propagate(S, Y: np.ndarray, alpha_prop: float = 0.99) -> np.ndarray:
    """Closed form F* = (I - alpha S)^-1 Y via an LU solve."""
    if not 0.0 < alpha_prop < 1.0:
        raise ValueError("alpha_prop must lie in (0, 1)")
    S = S.value if isinstance(S, Tensor) else np.asarray(S, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1] or Y.shape[0] != S.shape[0]:
        raise dc.ShapeError("propagate", S.shape, Y.shape)
    A = np.eye(S.shape[0]) - alpha_prop * S
    F = np.linalg.solve(A, Y)
    if not np.all(np.isfinite(F)):
        raise FloatingPointError("label propagation solve produced non-finite values")
    return F


def propagate_step(S, Y: np.ndarray, alpha_prop: float) -> Tensor:
    """One differentiable propagation step alpha*S*Y + (1 - alpha)*Y."""
    return dc.add(dc.scale(dc.matmul(S, Y), alpha_prop), (1.0 - alpha_prop) * np.asarray(Y))


def label_and_score(fstar: np.ndarray, n_support: int) -> PropagationResult:
    """Pseudo labels (row argmax, ties to the lowest class) and confidences of the query rows.

    Confidence is the largest entry of the row after shifting it to start at
    zero and normalizing it to sum to one; a constant row scores 1/N.
    """
    fstar = np.asarray(fstar, dtype=np.float64)
    if fstar.shape[0] < n_support:
        raise ValueError("fewer rows than support items")
    scores = fstar[n_support:]
    if not np.all(np.isfinite(scores)):
        raise FloatingPointError("non-finite propagation scores")
    N = scores.shape[1]
    pseudo = scores.argmax(axis=1)
    shifted = scores - scores.min(axis=1, keepdims=True)
    total = shifted.sum(axis=1)
    conf = np.full(len(scores), 1.0 / N)
    ok = total > 0
    conf[ok] = shifted[ok].max(axis=1) / total[ok]
    return PropagationResult(scores=scores, confidence=conf, pseudo_label=pseudo)


def adaptive_pick(result: PropagationResult, n: int, cap: int | None = None) -> PickedSet:
    """Pick the same number of top-confidence items from every class.

    That number is the smallest per-class pseudo-label count, further limited
    by ``cap`` when given. Ties in confidence go to the lower query index.
    """
    labels = np.asarray(result.pseudo_label)
    conf = np.asarray(result.confidence)
    counts = np.bincount(labels, minlength=n)[:n] if len(labels) else np.zeros(n, dtype=np.int64)
    k = int(counts.min()) if n else 0
    if cap is not None:
        k = min(k, cap)
    chosen = []
    for c in range(n):
        members = np.flatnonzero(labels == c)
        order = np.lexsort((members, -conf[members]))
        chosen.append(members[order[:k]])
    idx = np.concatenate(chosen).astype(np.int64) if chosen else np.zeros(0, dtype=np.int64)
    return PickedSet(indices=idx, labels=labels[idx], per_class=np.full(n, k, dtype=np.int64))


def pseudo_label_query(features, sigmas, support_y: np.ndarray, n_way: int,
                       k_nn: int = 20, alpha_prop: float = 0.99,
                       squared: bool = True) -> PropagationResult:
    """Full pipeline: graph, normalization, closed-form propagation, scoring."""
    graph = build_similarity(features, sigmas, k_nn, squared=squared)
    S = normalize_laplacian(graph)
    n_query = graph.size - len(support_y)
    F = propagate(S, label_matrix(support_y, n_query, n_way), alpha_prop)
    return label_and_score(F, len(support_y))
