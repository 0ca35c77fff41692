"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from icaps.tensor import Tensor, backward, precision


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    coords: list[int] = field(default_factory=list)
    analytic: list[float] = field(default_factory=list)
    numeric: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tol)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    """|a - b| / max(|a|, |b|, floor); the floor keeps near-zero gradients from dominating."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-3,
    tol: float = 1e-3,
    n_coords: int = 20,
    seed: int = 0,
) -> GradCheckReport:
    """Compare the backward-pass gradient of scalar ``f`` at ``x`` with central differences.

    Runs in float64 so the comparison is not dominated by float32 rounding.
    ``n_coords`` coordinates are drawn at random (all of them if ``x`` is smaller).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    flat_n = base.size
    coords = (
        np.arange(flat_n)
        if flat_n <= n_coords
        else np.sort(rng.choice(flat_n, size=n_coords, replace=False))
    )
    with precision(np.float64):
        xt = Tensor(base.copy(), requires_grad=True)
        out = f(xt)
        if out.size != 1:
            raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
        backward(out)
        analytic_full = xt.grad if xt.grad is not None else np.zeros_like(base)
        analytic = analytic_full.reshape(-1)[coords]

        numeric = np.empty(len(coords))
        # grad mode stays on: f may differentiate internally (gradient penalties)
        for n, c in enumerate(coords):
            probe = base.copy().reshape(-1)
            probe[c] += eps
            fp = f(Tensor(probe.reshape(base.shape))).item()
            probe[c] -= 2 * eps
            fm = f(Tensor(probe.reshape(base.shape))).item()
            numeric[n] = (fp - fm) / (2 * eps)

    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        err = float("inf")
    else:
        err = float(relative_error(analytic, numeric).max()) if len(coords) else 0.0
    return GradCheckReport(
        max_rel_error=err,
        tol=tol,
        coords=[int(c) for c in coords],
        analytic=[float(v) for v in analytic],
        numeric=[float(v) for v in numeric],
    )
