"""Dense numeric kernel: softmax/sparsemax, top-k, exact backward passes, RNG.

Everything is float64 and operates on plain numpy arrays. Vector ops accept
either a single vector or a 2-D array of row vectors and act on the last
axis. Each differentiable forward has a matching ``*_backward`` that
implements the exact analytic gradient; ``grad_check`` validates any of them
against central finite differences.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ContractError


def check_finite(x: np.ndarray, name: str = "input") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ContractError(f"{name} is empty")
    if not np.all(np.isfinite(x)):
        raise ContractError(f"{name} contains NaN or Inf")
    return x


def softmax(z: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis: exp(z - max z) / sum."""
    z = check_finite(z, "softmax input")
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Gradient through softmax given its output y and upstream dy."""
    inner = np.sum(dy * y, axis=-1, keepdims=True)
    return y * (dy - inner)


def sparsemax(z: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row of z onto the probability simplex.

    Closed form: sort descending, find the largest k with
    1 + k*z_(k) > cumsum(z)_(k), set tau = (cumsum(z)_(k) - 1) / k and
    return max(z - tau, 0). Off-support entries are exactly zero.
    """
    z = check_finite(z, "sparsemax input")
    orig_shape = z.shape
    rows = z.reshape(-1, orig_shape[-1])
    n = rows.shape[1]
    srt = -np.sort(-rows, axis=1)
    cums = np.cumsum(srt, axis=1)
    ks = np.arange(1, n + 1, dtype=np.float64)
    support = 1.0 + ks * srt > cums
    k_z = np.count_nonzero(support, axis=1)
    tau = (cums[np.arange(rows.shape[0]), k_z - 1] - 1.0) / k_z
    out = np.maximum(rows - tau[:, None], 0.0)
    return out.reshape(orig_shape)


def sparsemax_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Gradient through sparsemax given its output y and upstream dy.

    Jacobian of the simplex projection: identity minus uniform averaging,
    restricted to the support set {i : y_i > 0}.
    """
    support = y > 0.0
    nnz = np.count_nonzero(support, axis=-1, keepdims=True)
    masked = np.where(support, dy, 0.0)
    mean = np.sum(masked, axis=-1, keepdims=True) / nnz
    return np.where(support, dy - mean, 0.0)


def topk(z: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries, descending by value, ties to lower index."""
    z = check_finite(z, "topk input")
    if z.ndim != 1:
        raise ContractError("topk expects a 1-D vector")
    if not 1 <= k <= z.shape[0]:
        raise ContractError(f"k={k} out of range for length-{z.shape[0]} vector")
    order = np.argsort(-z, kind="stable")
    return order[:k]


def topk_rows(z: np.ndarray, k: int) -> np.ndarray:
    """Row-wise topk for a 2-D array; same ordering contract as topk."""
    z = check_finite(z, "topk input")
    if not 1 <= k <= z.shape[-1]:
        raise ContractError(f"k={k} out of range for width-{z.shape[-1]} rows")
    order = np.argsort(-z, axis=-1, kind="stable")
    return order[..., :k]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * (x > 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def affine(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    y = x @ w
    if b is not None:
        y = y + b
    return y


def affine_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray):
    """Returns (dx, dw, db) for y = x @ w + b with x of shape (..., din)."""
    dx = dy @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    return dx, dw, db


def cross_entropy(logits: np.ndarray, target: int) -> float:
    """-log softmax(logits)[target], computed stably."""
    logits = check_finite(logits, "cross_entropy logits")
    shifted = logits - np.max(logits)
    return float(np.log(np.sum(np.exp(shifted))) - shifted[target])


def cross_entropy_backward(logits: np.ndarray, target: int) -> np.ndarray:
    g = softmax(logits)
    g[target] -= 1.0
    return g


def grad_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params: np.ndarray,
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a flat float64 vector to (scalar value, analytic gradient).
    Error per coordinate is |a - n| / (|a| + |n| + 1e-8).
    """
    params = np.asarray(params, dtype=np.float64).ravel()
    _, analytic = f(params)
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    if analytic.shape != params.shape:
        raise ContractError("analytic gradient shape does not match params")
    numeric = np.empty_like(params)
    for i in range(params.size):
        bumped = params.copy()
        bumped[i] += eps
        f_plus, _ = f(bumped)
        bumped[i] -= 2.0 * eps
        f_minus, _ = f(bumped)
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ContractError(f"non-finite function value at coordinate {i}")
        numeric[i] = (f_plus - f_minus) / (2.0 * eps)
    denom = np.abs(analytic) + np.abs(numeric) + 1e-8
    return float(np.max(np.abs(analytic - numeric) / denom))


class Rng:
    """Deterministic splittable generator (numpy PCG64 over a SeedSequence).

    Identical seeds yield identical streams across runs and platforms.
    ``split`` derives independent child generators; every randomized
    procedure in the package records the seed it was given.
    """

    algorithm = "pcg64"

    def __init__(self, seed: int, _seq: np.random.SeedSequence | None = None):
        self.seed = int(seed)
        self._seq = _seq if _seq is not None else np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    def split(self, n: int) -> list["Rng"]:
        return [Rng(self.seed, _seq=child) for child in self._seq.spawn(n)]

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high=high, size=size)

    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        return self._gen.normal(loc=loc, scale=scale, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low=low, high=high, size=size)

    def random(self, size=None):
        return self._gen.random(size=size)

    def choice(self, a, size=None, replace=True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)

    def permutation(self, x) -> np.ndarray:
        return self._gen.permutation(x)

    def shuffle(self, x) -> None:
        self._gen.shuffle(x)
