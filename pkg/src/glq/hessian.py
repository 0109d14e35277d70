"""Layer-wise proxy Hessians from calibration data.

For a layer with input X (n x d_in) and per-sample output gradients
G (n x d_out), the empirical Fisher block of output channel j satisfies

    n * F_j = X^T Diag(G[:, j]^2) X.

The guided proxy groups output channels into g consecutive blocks
J_1..J_g and shares one Hessian per block, built from the within-block
average of squared gradients:

    s_k[i] = mean_{j in J_k} (grad_scale * G[i, j])^2
    Hbar_k = X^T Diag(s_k) X + lambda_k I,
    lambda_k = damping_rel * mean(diag(X^T Diag(s_k) X)).

``grad_scale`` (default 1e3) guards against underflow in the squared
gradients of a well-trained model; scaling all gradients by s multiplies
Hbar_k and lambda_k by s^2 and therefore changes no quantization
decision downstream. The plain (loss-agnostic) Hessian is X^T X + l I
with a single group covering every channel.

Each Hbar_k is assembled as B^T B with B = Diag(sqrt(s_k)) X, so it is
positive semidefinite by construction; the relative damping makes it
positive definite whenever X has a nonzero row.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calib_model import LayerCalibration, MlpModel
from .errors import EmptyCalibration, InvalidSize, PartitionMismatch
from .linalg import Matrix, ensure_matrix

DEFAULT_GRAD_SCALE = 1e3
DEFAULT_DAMPING_REL = 1e-7


@dataclass(frozen=True)
class ChannelPartition:
    """Disjoint cover of output channels 0..d_out-1 by consecutive groups."""

    d_out: int
    groups: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        seen = [j for grp in self.groups for j in grp]
        if sorted(seen) != list(range(self.d_out)):
            raise PartitionMismatch(
                f"groups must cover 0..{self.d_out - 1} exactly once"
            )
        if any(len(grp) == 0 for grp in self.groups):
            raise PartitionMismatch("empty group")

    @property
    def g(self) -> int:
        return len(self.groups)

    @staticmethod
    def consecutive(d_out: int, g: int) -> "ChannelPartition":
        """g consecutive blocks; the first d_out % g blocks get one extra
        channel when g does not divide d_out."""
        if not 1 <= g <= d_out:
            raise InvalidSize(f"need 1 <= g <= d_out, got g={g}, d_out={d_out}")
        base, extra = divmod(d_out, g)
        groups = []
        start = 0
        for k in range(g):
            size = base + (1 if k < extra else 0)
            groups.append(tuple(range(start, start + size)))
            start += size
        return ChannelPartition(d_out=d_out, groups=tuple(groups))


@dataclass
class SquaredGradAverages:
    """Per-sample, per-group mean squared (scaled) gradients, n x g."""

    s: Matrix
    grad_scale: float


@dataclass
class HessianSet:
    """Damped proxy Hessians for one layer, one matrix per channel group.

    ``hessians[k]`` already includes its diagonal shift ``lambdas[k]``;
    ``damping_rel`` records the relative rule that produced the shifts.
    """

    layer_idx: int
    partition: ChannelPartition
    hessians: list[Matrix]
    lambdas: list[float]
    grad_scale: float
    damping_rel: float
    kind: str  # "plain" or "guided"

    def __post_init__(self) -> None:
        if self.kind not in ("plain", "guided"):
            raise ValueError(f"unknown hessian kind {self.kind!r}")
        if len(self.hessians) != self.partition.g or len(self.lambdas) != self.partition.g:
            raise PartitionMismatch("one hessian and one lambda per group required")

    def group_for_channel(self, j: int) -> int:
        for k, grp in enumerate(self.partition.groups):
            if j in grp:
                return k
        raise PartitionMismatch(f"channel {j} not covered")


def _check_calib(calib: LayerCalibration) -> tuple[Matrix, Matrix]:
    X = ensure_matrix(calib.X, "X")
    G = ensure_matrix(calib.gradZ, "gradZ")
    if X.shape[0] == 0:
        raise EmptyCalibration("calibration has zero samples")
    if G.shape[0] != X.shape[0]:
        raise EmptyCalibration("X and gradZ disagree on sample count")
    return X, G


def _damped(M: Matrix, damping_rel: float) -> tuple[Matrix, float]:
    lam = damping_rel * float(np.mean(np.diag(M)))
    return M + lam * np.eye(M.shape[0]), lam


def plain_hessian(
    calib: LayerCalibration,
    layer_idx: int = 0,
    damping_rel: float = DEFAULT_DAMPING_REL,
) -> HessianSet:
    """X^T X + damping_rel * mean(diag) * I, one group over all channels."""
    X, G = _check_calib(calib)
    M = X.T @ X
    M = 0.5 * (M + M.T)
    H, lam = _damped(M, damping_rel)
    part = ChannelPartition.consecutive(G.shape[1], 1)
    return HessianSet(
        layer_idx=layer_idx,
        partition=part,
        hessians=[H],
        lambdas=[lam],
        grad_scale=1.0,
        damping_rel=damping_rel,
        kind="plain",
    )


def squared_grad_averages(
    calib: LayerCalibration,
    partition: ChannelPartition,
    grad_scale: float = DEFAULT_GRAD_SCALE,
) -> SquaredGradAverages:
    """s[i, k] = mean over j in J_k of (grad_scale * gradZ[i, j])^2."""
    X, G = _check_calib(calib)
    if partition.d_out != G.shape[1]:
        raise PartitionMismatch(
            f"partition covers {partition.d_out} channels, layer has {G.shape[1]}"
        )
    if grad_scale <= 0.0:
        raise ValueError(f"grad_scale must be > 0, got {grad_scale}")
    sq = (grad_scale * G) ** 2
    cols = [np.mean(sq[:, list(grp)], axis=1) for grp in partition.groups]
    return SquaredGradAverages(s=np.stack(cols, axis=1), grad_scale=grad_scale)


def guided_hessians(
    calib: LayerCalibration,
    partition: ChannelPartition,
    layer_idx: int = 0,
    grad_scale: float = DEFAULT_GRAD_SCALE,
    damping_rel: float = DEFAULT_DAMPING_REL,
) -> HessianSet:
    """One damped Hbar_k per channel group (see module docstring)."""
    X, _ = _check_calib(calib)
    avgs = squared_grad_averages(calib, partition, grad_scale)
    hessians, lambdas = [], []
    for k in range(partition.g):
        B = X * np.sqrt(avgs.s[:, k])[:, None]
        M = B.T @ B
        M = 0.5 * (M + M.T)
        H, lam = _damped(M, damping_rel)
        hessians.append(H)
        lambdas.append(lam)
    return HessianSet(
        layer_idx=layer_idx,
        partition=partition,
        hessians=hessians,
        lambdas=lambdas,
        grad_scale=grad_scale,
        damping_rel=damping_rel,
        kind="guided",
    )


def fisher_block_oracle(calib: LayerCalibration, j: int, n: int) -> Matrix:
    """Empirical Fisher of channel j by explicit outer products.

    F_j = (1/n) sum_i g_i g_i^T with g_i = gradZ[i, j] * X[i, :]. Built
    sample by sample on purpose so it stays an independent cross-check
    for the Diag-identity path used everywhere else.
    """
    X, G = _check_calib(calib)
    if not 0 <= j < G.shape[1]:
        raise PartitionMismatch(f"channel {j} out of range")
    if n < 1:
        raise InvalidSize(f"need n >= 1, got {n}")
    d = X.shape[1]
    F = np.zeros((d, d))
    for i in range(X.shape[0]):
        gi = G[i, j] * X[i, :]
        F += np.outer(gi, gi)
    return F / n


def fisher_diag(calib: LayerCalibration) -> Matrix:
    """Diagonal empirical Fisher per weight, d_in x d_out.

    Entry (i, j) = (1/n) sum_s (gradZ[s, j] * X[s, i])^2. Used as the
    per-weight sensitivity for the weighted k-means baseline.
    """
    X, G = _check_calib(calib)
    n = X.shape[0]
    return ((X ** 2).T @ (G ** 2)) / n


def model_hash(model: MlpModel) -> str:
    """Content hash of a model: header plus layer bytes, order fixed."""
    h = hashlib.sha256()
    header = json.dumps(
        {"activation": model.activation, "loss": model.loss,
         "dims": model.dims},
        sort_keys=True,
    ).encode()
    h.update(header)
    for W in model.layers:
        h.update(np.ascontiguousarray(W, dtype="<f8").tobytes())
    return h.hexdigest()


def hessian_cache_key(
    model_digest: str,
    dataset_seed: int,
    layer_idx: int,
    g: int,
    grad_scale: float,
    damping_rel: float,
    kind: str,
) -> str:
    """Deterministic cache key for one layer's HessianSet."""
    payload = json.dumps(
        {
            "model": model_digest,
            "dataset_seed": dataset_seed,
            "layer": layer_idx,
            "g": g,
            "grad_scale": repr(float(grad_scale)),
            "damping_rel": repr(float(damping_rel)),
            "kind": kind,
        },
        sort_keys=True,
    ).encode()
    return hashlib.sha256(payload).hexdigest()[:24]


class HessianCache:
    """Disk cache of HessianSets under ``root/<key>/``.

    Each entry holds ``hess.L<layer>.G<k>.gqt`` tensor files plus a
    ``manifest.json`` recording the partition, grad scale, damping rule
    and per-file content hashes. A reload is bit-exact.
    """

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)

    def _dir(self, key: str) -> Path:
        return self.root / key

    def load(self, key: str) -> HessianSet | None:
        from .tensorio import read_tensor

        d = self._dir(key)
        man = d / "manifest.json"
        if not man.exists():
            return None
        meta = json.loads(man.read_text())
        part = ChannelPartition(
            d_out=meta["d_out"],
            groups=tuple(tuple(grp) for grp in meta["groups"]),
        )
        hessians = [
            read_tensor(d / f"hess.L{meta['layer_idx']}.G{k}.gqt")
            for k in range(part.g)
        ]
        return HessianSet(
            layer_idx=meta["layer_idx"],
            partition=part,
            hessians=hessians,
            lambdas=[float(x) for x in meta["lambdas"]],
            grad_scale=meta["grad_scale"],
            damping_rel=meta["damping_rel"],
            kind=meta["kind"],
        )

    def store(self, key: str, hset: HessianSet) -> Path:
        from .tensorio import file_sha256, write_json_atomic, write_tensor

        d = self._dir(key)
        d.mkdir(parents=True, exist_ok=True)
        files = {}
        for k, H in enumerate(hset.hessians):
            name = f"hess.L{hset.layer_idx}.G{k}.gqt"
            write_tensor(d / name, H)
            files[name] = file_sha256(d / name)
        meta = {
            "layer_idx": hset.layer_idx,
            "d_out": hset.partition.d_out,
            "groups": [list(grp) for grp in hset.partition.groups],
            "lambdas": [float(x) for x in hset.lambdas],
            "grad_scale": hset.grad_scale,
            "damping_rel": hset.damping_rel,
            "kind": hset.kind,
            "files": files,
        }
        write_json_atomic(d / "manifest.json", meta)
        return d
