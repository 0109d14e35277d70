"""Brute-force reference implementations.

Everything here trades speed for independence: no code is shared with
the fast paths being checked, caps keep runtimes sane, and outputs are
deterministic (enumeration order is fixed, ties resolve to the first
candidate in that order).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .calib_model import Dataset, MlpModel, calibrate, end_loss, weight_gradients
from .errors import DimensionMismatch, InvalidSize, TooLarge
from .hessian import fisher_block_oracle
from .linalg import Matrix, ensure_matrix, ensure_vector
from .scalar_quant import WeightedPoints

EXHAUSTIVE_CAP = 1_000_000
FISHER_WEIGHT_CAP = 5_000


@dataclass
class ExhaustiveResult:
    """Global optimum of the assignment-and-codebook quadratic."""

    assign: np.ndarray  # length d, slot per weight
    codebook: np.ndarray  # length m, slot order (not sorted)
    objective: float
    n_enumerated: int


def exhaustive_lnq(H_damped: Matrix, w: np.ndarray, m: int) -> ExhaustiveResult:
    """Globally optimal quantization of one channel by enumeration.

    Walks all m**d assignments in lexicographic order; for each, the
    optimal codebook restricted to the occupied slots solves the normal
    equations (P^T H P) c = P^T H w directly (deliberately a different
    route than the factored least-squares used by the fast path).
    Strict improvement keeps the lexicographically smallest optimum.

    Raises TooLarge when m**d exceeds 1e6.
    """
    H = ensure_matrix(H_damped, "H_damped")
    w = ensure_vector(w, "w")
    d = w.shape[0]
    if H.shape != (d, d):
        raise DimensionMismatch("H and w disagree on dimension")
    if m < 1:
        raise InvalidSize(f"need m >= 1, got {m}")
    total = m ** d
    if total > EXHAUSTIVE_CAP:
        raise TooLarge(f"{m}**{d} = {total} exceeds cap {EXHAUSTIVE_CAP}")
    Hw = H @ w
    best_obj = np.inf
    best_assign = None
    best_codebook = None
    count = 0
    for assign in itertools.product(range(m), repeat=d):
        count += 1
        a = np.array(assign, dtype=np.int64)
        used = np.unique(a)
        P = np.zeros((d, used.shape[0]))
        for col, q in enumerate(used):
            P[a == q, col] = 1.0
        M = P.T @ H @ P
        rhs = P.T @ Hw
        c_sub = np.linalg.solve(M, rhs)
        resid = w - P @ c_sub
        obj = float(resid @ H @ resid)
        if obj < best_obj:
            best_obj = obj
            best_assign = a
            cb = np.zeros(m)
            cb[used] = c_sub
            best_codebook = cb
    return ExhaustiveResult(
        assign=best_assign,
        codebook=best_codebook,
        objective=best_obj,
        n_enumerated=count,
    )


def full_fisher_quadratic(
    model: MlpModel, data: Dataset, w_hat_layers: list[Matrix]
) -> float:
    """sum over layers and channels of n * delta^T F_j delta.

    F_j is built sample by sample through fisher_block_oracle, so this
    is the slow independent end of the grouped-Hessian identity.
    Raises TooLarge above 5000 total weights.
    """
    weights = sum(W.size for W in model.layers)
    if weights > FISHER_WEIGHT_CAP:
        raise TooLarge(f"{weights} weights exceed cap {FISHER_WEIGHT_CAP}")
    if len(w_hat_layers) != model.n_layers:
        raise DimensionMismatch("one quantized matrix per layer required")
    calib = calibrate(model, data)
    n = data.n
    total = 0.0
    for l, (W, Wh) in enumerate(zip(model.layers, w_hat_layers)):
        if Wh.shape != W.shape:
            raise DimensionMismatch(f"layer {l}: {Wh.shape} vs {W.shape}")
        for j in range(W.shape[1]):
            F = fisher_block_oracle(calib[l], j, n)
            delta = Wh[:, j] - W[:, j]
            total += n * float(delta @ F @ delta)
    return total


def fd_gradient_check(
    model: MlpModel, data: Dataset, samples: int = 20, h: float = 1e-5
) -> float:
    """Max relative error of backprop weight gradients vs central
    finite differences of end_loss at `samples` random weight positions
    (fixed internal seed, so repeated calls agree).

    The error is |fd - analytic| / max(|fd|, |analytic|, 1e-4); the
    absolute floor keeps vanishing gradient entries from inflating the
    ratio past what double-precision differencing can resolve.
    """
    if samples < 1:
        raise InvalidSize("need samples >= 1")
    grads = weight_gradients(model, data)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(samples):
        l = int(rng.integers(model.n_layers))
        W = model.layers[l]
        i = int(rng.integers(W.shape[0]))
        j = int(rng.integers(W.shape[1]))
        analytic = float(grads[l][i, j])
        probe = model.copy()
        probe.layers[l][i, j] = W[i, j] + h
        up = end_loss(probe, data)
        probe.layers[l][i, j] = W[i, j] - h
        down = end_loss(probe, data)
        fd = (up - down) / (2.0 * h)
        err = abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-4)
        worst = max(worst, err)
    return worst


def kmeans_partition_oracle(pts: WeightedPoints, m: int) -> float:
    """Optimal weighted 1-D k-means objective by enumerating every
    contiguous partition of the sorted points into min(m, n) segments.

    Costs are computed per segment from scratch (no prefix sums), so
    this shares nothing with the dynamic program it checks. Intended
    for n <= 10 or so.
    """
    if m < 1:
        raise InvalidSize(f"need m >= 1, got {m}")
    x = np.sort(pts.x)
    order = np.argsort(pts.x, kind="stable")
    w = pts.wgt[order]
    n = x.shape[0]
    k = min(m, n)

    def seg_cost(i: int, j: int) -> float:
        xs, ws = x[i:j], w[i:j]
        sw = float(np.sum(ws))
        if sw <= 0.0:
            return 0.0
        mu = float(np.sum(ws * xs)) / sw
        return float(np.sum(ws * (xs - mu) ** 2))

    best = np.inf
    for splits in itertools.combinations(range(1, n), k - 1):
        edges = (0,) + splits + (n,)
        cost = sum(seg_cost(edges[q], edges[q + 1]) for q in range(k))
        best = min(best, cost)
    return float(best)


def least_squares_normal_oracle(A: Matrix, b: np.ndarray) -> np.ndarray:
    """Solve A x ~ b through explicit normal equations. Only valid for
    full-column-rank A; used to cross-check the factored solver."""
    A = ensure_matrix(A, "A")
    b = ensure_vector(b, "b")
    return np.linalg.solve(A.T @ A, A.T @ b)
