"""Independent reference implementations used to check the fast paths."""

import itertools

import numpy as np


def iterative_propagation(S: np.ndarray, Y: np.ndarray, alpha: float,
                          tol: float = 1e-15, max_iter: int = 200_000) -> np.ndarray:
    """Fixed point of F <- alpha S F + (1 - alpha) Y, started from Y."""
    F = Y.astype(np.float64).copy()
    for _ in range(max_iter):
        nxt = alpha * (S @ F) + (1 - alpha) * Y
        if np.max(np.abs(nxt - F)) < tol:
            return nxt
        F = nxt
    return F


def spectral_radius(S: np.ndarray, iters: int = 5000, seed: int = 0) -> float:
    """Largest |eigenvalue| of a symmetric matrix by power iteration on S @ S."""
    v = np.random.default_rng(seed).standard_normal(S.shape[0])
    A = S @ S
    lam = 0.0
    for _ in range(iters):
        w = A @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0
        v = w / norm
        lam = float(v @ A @ v)
    return float(np.sqrt(max(lam, 0.0)))


def brute_force_pick(labels: np.ndarray, conf: np.ndarray, n: int) -> set[int]:
    """Enumerate every k-subset per class, keep the best one.

    Best means the highest sorted-descending confidence profile, then the
    lexicographically smallest index tuple.
    """
    counts = [int(np.sum(labels == c)) for c in range(n)]
    k = min(counts) if counts else 0
    chosen: set[int] = set()
    for c in range(n):
        members = [i for i in range(len(labels)) if labels[i] == c]
        best_key, best = None, ()
        for combo in itertools.combinations(members, k):
            profile = tuple(sorted((-conf[i] for i in combo)))
            key = (profile, combo)
            if best_key is None or key < best_key:
                best_key, best = key, combo
        chosen.update(best)
    return chosen


def brute_argmax(row) -> int:
    best = 0
    for j in range(1, len(row)):
        if row[j] > row[best]:
            best = j
    return best
