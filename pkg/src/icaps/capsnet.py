"""Capsule primitives: squash, routing by agreement, margin and reconstruction losses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from icaps import ops
from icaps.nn import Conv2d, Module, parameter
from icaps.ops import ShapeError
from icaps.tensor import Tensor, as_tensor


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """Shrink ``s`` along ``axis`` to norm ``|s|^2 / (1 + |s|^2)``, keeping its direction."""
    sq = ops.sum(s * s, axis, keepdims=True)
    n = ops.norm(s, axis, keepdims=True)
    return s * (n / (1.0 + sq))


def _squash_np(s: np.ndarray) -> np.ndarray:
    sq = np.sum(s * s, axis=-1, keepdims=True)
    return s * (np.sqrt(sq) / (1.0 + sq))


def _softmax_np(b: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(b - b.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class ClassCapsuleOutput:
    """Class capsules ``[batch, k, L]`` plus the coupling matrices used to route them."""

    capsules: Tensor
    couplings: list[np.ndarray] = field(default_factory=list)

    @property
    def norms(self) -> Tensor:
        return ops.norm(self.capsules, axis=-1)

    def predictions(self) -> np.ndarray:
        return np.linalg.norm(self.capsules.data, axis=-1).argmax(axis=1)


def predict_vectors(primary: Tensor, weight: Tensor) -> Tensor:
    """Per-pair predictions ``W_ij u_i``: ``[B, N, d] x [N, k, L, d] -> [B, N, k, L]``."""
    u = ops.reshape(primary, (primary.shape[0], primary.shape[1], 1, 1, primary.shape[2]))
    return ops.sum(weight * u, axis=-1)


def dynamic_routing(primary: Tensor, weight: Tensor, iterations: int = 3) -> ClassCapsuleOutput:
    """Route primary capsules ``[B, N, d]`` (or ``[N, d]``) to class capsules by agreement.

    Routing logits start at zero.  Only the last iteration is differentiated:
    the couplings it uses are treated as constants.
    """
    if iterations < 1:
        raise ValueError("routing needs at least one iteration")
    primary = as_tensor(primary)
    single = primary.ndim == 2
    if single:
        primary = ops.reshape(primary, (1,) + primary.shape)
    n_pc, k, dim, d_pc = weight.shape
    if primary.shape[1:] != (n_pc, d_pc):
        raise ShapeError(f"primary capsules {primary.shape} do not match weights {weight.shape}")

    u_hat = predict_vectors(primary, weight)
    u_const = u_hat.data
    logits = np.zeros(u_const.shape[:3], dtype=u_const.dtype)
    couplings = []
    for it in range(iterations):
        coupling = _softmax_np(logits, axis=2)
        couplings.append(coupling)
        if it == iterations - 1:
            s = ops.sum(Tensor(coupling[..., None]) * u_hat, axis=1)
            v = squash(s)
        else:
            v_np = _squash_np((coupling[..., None] * u_const).sum(axis=1))
            logits = logits + (u_const * v_np[:, None]).sum(axis=-1)
    if single:
        v = ops.reshape(v, v.shape[1:])
        couplings = [c[0] for c in couplings]
    return ClassCapsuleOutput(v, couplings)


class PrimaryCapsules(Module):
    """Convolution whose output channels are grouped into squashed capsules."""

    def __init__(self, rng, c_in: int, n_types: int, dim: int, kernel: int, stride: int):
        self.n_types, self.dim = n_types, dim
        self.conv = Conv2d(rng, c_in, n_types * dim, kernel, stride)

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv(x)
        n, _, hh, ww = h.shape
        h = ops.reshape(h, (n, self.n_types, self.dim, hh * ww))
        h = ops.transpose(h, (0, 1, 3, 2))
        return squash(ops.reshape(h, (n, self.n_types * hh * ww, self.dim)))


class ClassCapsules(Module):
    """Routed class-capsule layer; ``weight`` is ``[N_pc, k, L, d_pc]``."""

    def __init__(self, rng, n_primary: int, d_primary: int, k: int, dim: int, iterations: int = 3):
        if iterations < 1:
            raise ValueError("routing_iterations must be >= 1")
        self.iterations = iterations
        self.weight = parameter(rng.normal(0.0, 0.1, size=(n_primary, k, dim, d_primary)))

    def forward(self, primary: Tensor) -> ClassCapsuleOutput:
        return dynamic_routing(primary, self.weight, self.iterations)


@dataclass
class MarginLossParams:
    m_plus: float = 0.9
    m_minus: float = 0.1
    downweight: float = 0.5
    weight: float = 1.0

    def __post_init__(self):
        if not 0 < self.m_minus < self.m_plus < 1:
            raise ValueError("margin thresholds need 0 < m_minus < m_plus < 1")


def _one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"class index out of range [0, {k}): {labels}")
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels] = 1.0
    return out


def margin_loss(capsules, labels, params: MarginLossParams | None = None) -> Tensor:
    """Batch-mean capsule margin loss on class capsules ``[B, k, L]`` (or ``[k, L]``)."""
    params = params or MarginLossParams()
    capsules = as_tensor(capsules)
    if capsules.ndim == 2:
        capsules = ops.reshape(capsules, (1,) + capsules.shape)
    norms = ops.norm(capsules, axis=-1)
    t = Tensor(_one_hot(labels, capsules.shape[1]))
    if t.shape[0] != norms.shape[0]:
        raise ShapeError(f"{t.shape[0]} labels for a batch of {norms.shape[0]}")
    present = ops.relu(params.m_plus - norms) ** 2
    absent = ops.relu(norms - params.m_minus) ** 2
    per_sample = ops.sum(t * present + params.downweight * (1.0 - t) * absent, axis=1)
    return params.weight * ops.mean(per_sample)


def reconstruction_loss(x_hat, x, weight: float = 1.0) -> Tensor:
    """``weight`` times the batch mean of the squared Frobenius distance.

    Both arguments are batches; the leading axis is averaged over.
    """
    x_hat, x = as_tensor(x_hat), as_tensor(x)
    if x_hat.shape != x.shape:
        raise ShapeError(f"reconstruction {x_hat.shape} vs target {x.shape}")
    d = x_hat - x
    per_sample = ops.sum(ops.reshape(d * d, (d.shape[0], -1)), axis=1)
    return weight * ops.mean(per_sample)
