"""Loss terms of the disentangled capsule model, as pure functions of network outputs.

Every loss is averaged over the batch and multiplied by its weight.  The
margin and reconstruction losses live in :mod:`icaps.capsnet`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from icaps import ops
from icaps.capsnet import _one_hot
from icaps.components import ResidualPosterior
from icaps.ops import ShapeError
from icaps.tensor import Tensor, as_tensor, grad


@dataclass
class SwapBundle:
    """Real pair ``(x_i, x_j)``, their latents, and the four generated images.

    ``x_ci_rj`` is ``G(c_i, r_j)`` and so on; ``y_i`` / ``y_j`` are the labels.
    """

    x_i: Tensor
    x_j: Tensor
    y_i: np.ndarray
    y_j: np.ndarray
    c_i: Tensor
    c_j: Tensor
    r_i: Tensor
    r_j: Tensor
    x_ci_ri: Tensor
    x_cj_rj: Tensor
    x_ci_rj: Tensor
    x_cj_ri: Tensor

    def swapped(self) -> "SwapBundle":
        """The same bundle seen from the other side of the pair."""
        return SwapBundle(
            self.x_j, self.x_i, self.y_j, self.y_i, self.c_j, self.c_i, self.r_j, self.r_i,
            self.x_cj_rj, self.x_ci_ri, self.x_cj_ri, self.x_ci_rj,
        )


def _signed_logits(logits: Tensor, labels, k: int) -> Tensor:
    # <1 - y, z> - <y, z>, averaged over the batch
    sign = Tensor(1.0 - 2.0 * _one_hot(labels, k))
    if sign.shape != logits.shape:
        raise ShapeError(f"logits {logits.shape} do not match {sign.shape[0]} labels")
    return ops.mean(ops.sum(sign * logits, axis=1))


def _cross_entropy(logits: Tensor, labels, k: int) -> Tensor:
    onehot = Tensor(_one_hot(labels, k))
    if onehot.shape != logits.shape:
        raise ShapeError(f"logits {logits.shape} do not match {onehot.shape[0]} labels")
    return -ops.mean(ops.sum(onehot * ops.log_softmax(logits, axis=-1), axis=1))


def loss_cg(
    logits_x, y_x, logits_ci_ri, logits_ci_rj, y_i, weight: float = 1.0, form: str = "signed"
) -> Tensor:
    """Classifier loss on real images and on both images generated from ``c_i``.

    ``form="signed"`` is the literal signed logit dot product, which is
    unbounded below; ``form="xent"`` uses softmax cross-entropy instead.  The
    generated images are labelled with ``y_i``.  Each family is batch-averaged,
    then summed.
    """
    logits_x, logits_ci_ri, logits_ci_rj = map(as_tensor, (logits_x, logits_ci_ri, logits_ci_rj))
    k = logits_x.shape[-1]
    term = {"signed": _signed_logits, "xent": _cross_entropy}.get(form)
    if term is None:
        raise ValueError(f"unknown classifier loss form {form!r}")
    total = term(logits_x, y_x, k) + term(logits_ci_ri, y_i, k) + term(logits_ci_rj, y_i, k)
    return weight * total


def _mean_sq_dist(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"shapes differ: {a.shape} vs {b.shape}")
    d = a - b
    if d.ndim == 1:
        return ops.sum(d * d)
    return ops.mean(ops.sum(ops.reshape(d * d, (d.shape[0], -1)), axis=1))


def loss_cs(logits_ci_ri, logits_ci_rj, weight: float = 1.0) -> Tensor:
    """Class similarity: images sharing ``c`` should get identical logits."""
    return weight * _mean_sq_dist(logits_ci_ri, logits_ci_rj)


def loss_rs(r_i, r_of_swap, weight: float = 1.0) -> Tensor:
    """Residual similarity between ``E(x_i)`` and ``E(G(c_j, r_i))``."""
    return weight * _mean_sq_dist(r_i, r_of_swap)


def loss_concept(c_i, c_j, weight: float = 1.0) -> Tensor:
    """Negative smallest per-dimension gap between the two class means of ``c``.

    Ties go to the lowest dimension index; the gradient flows through that
    dimension only.
    """
    c_i, c_j = as_tensor(c_i), as_tensor(c_j)
    if c_i.shape[0] == 0 or c_j.shape[0] == 0:
        raise ValueError("loss_concept needs non-empty batches")
    if c_i.shape[1:] != c_j.shape[1:]:
        raise ShapeError(f"concept shapes differ: {c_i.shape} vs {c_j.shape}")
    gaps = ops.abs(ops.mean(c_i, axis=0) - ops.mean(c_j, axis=0))
    l = int(np.argmin(gaps.data))
    return -weight * gaps[l]


def loss_cr(probs, changed, weight: float = 1.0) -> Tensor:
    """Cross-entropy of the contrastive discriminator against the changed index."""
    probs = as_tensor(probs)
    if probs.ndim == 1:
        probs = ops.reshape(probs, (1, -1))
    changed = np.asarray(changed, dtype=np.int64).reshape(-1)
    n, dims = probs.shape
    if changed.shape[0] != n:
        raise ShapeError(f"{changed.shape[0]} indices for a batch of {n}")
    if changed.min() < 0 or changed.max() >= dims:
        raise ValueError(f"changed index out of range [0, {dims})")
    picked = probs[np.arange(n), changed]
    return -weight * ops.mean(ops.log(ops.clip(picked, 1e-12, 1.0)))


def loss_gan(scores_real, scores_fake, weight_g: float = 1.0, weight_dg: float = 1.0):
    """WGAN losses ``(L_G, L_DG)`` from critic scores."""
    real, fake = ops.mean(as_tensor(scores_real)), ops.mean(as_tensor(scores_fake))
    return -weight_g * fake, weight_dg * (fake - real)


def input_gradient_norms(critic: Callable[[Tensor], Tensor], x, create_graph: bool = True) -> Tensor:
    """Per-sample ``||d critic(x) / d x||_2``, differentiable in the critic's parameters."""
    x = Tensor(as_tensor(x).data, requires_grad=True)
    scores = critic(x)
    (gx,) = grad(ops.sum(scores), [x], create_graph=create_graph)
    return ops.norm(ops.reshape(gx, (gx.shape[0], -1)), axis=1)


def loss_lgp(critic: Callable[[Tensor], Tensor], x_hat, weight: float = 10.0) -> Tensor:
    """One-sided Lipschitz penalty ``E (||grad|| - 1)_+^2`` at the generated samples."""
    norms = input_gradient_norms(critic, x_hat)
    return weight * ops.mean(ops.relu(norms - 1.0) ** 2)


def loss_kl(post: ResidualPosterior, weight: float = 0.01) -> Tensor:
    """KL divergence of the diagonal Gaussian posterior from N(0, I), batch-averaged."""
    mu, logvar = as_tensor(post.mu), as_tensor(post.logvar)
    per = 0.5 * (ops.exp(logvar) + mu * mu - 1.0 - logvar)
    if per.ndim == 1:
        return weight * ops.sum(per)
    return weight * ops.mean(ops.sum(per, axis=1))
