"""Per-sample benefit gating and assembly of the training objective.

The decision value M marks rows where the fused representation already beats
the raw behavioral one at pointing to the target item. Those rows are frozen
out of the fused-path gradient (forward values are untouched), so adaptation
continues only where the semantic knowledge is not yet helping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, ZeroNormError


class ContradictionError(Exception):
    pass


def _row_cosines(a: np.ndarray, b: np.ndarray, what: str) -> np.ndarray:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na < 1e-12) or np.any(nb < 1e-12):
        raise ZeroNormError(f"indicator: zero-norm vector in {what}")
    return (a * b).sum(axis=1) / (na * nb)


def indicator(h_aligned: Tensor, h_rs: Tensor, v_t: Tensor) -> np.ndarray:
    """Per-row decision M in {0,1}: 1 iff the fused state is strictly closer
    (by cosine) to the target than the behavioral state.

    Computed on forward values only; no gradient flows through the
    comparison. Ties give 0 ("not yet beneficial, keep adapting").
    """
    cos_aligned = _row_cosines(h_aligned.data, v_t.data, "h_aligned/v_t")
    cos_rs = _row_cosines(h_rs.data, v_t.data, "h_RS/v_t")
    return (cos_aligned > cos_rs).astype(np.float64)


def gradient_mask(h_aligned: Tensor, m: np.ndarray,
                  frozen_forward: np.ndarray | None = None) -> Tensor:
    """sg(M * h) + (1 - M) * h: identical forward values for every M, zero
    upstream adjoint on rows with M = 1.

    ``frozen_forward`` substitutes a constant copy of the stopped branch
    (its base-point values). Finite-difference probes of an objective
    containing a gradient cut must hold that branch constant, since the cut
    makes the forward value move where the analytic adjoint correctly does
    not; at the base point the substitution is value- and gradient-exact.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 1 or m.shape[0] != h_aligned.shape[0]:
        raise ContradictionError(
            f"mask shape {m.shape} does not match batch {h_aligned.shape}")
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ContradictionError("mask values must be exactly 0 or 1")
    col = m[:, None]
    if frozen_forward is None:
        frozen = dc.stop_gradient(dc.mul(h_aligned, Tensor(col)))
    else:
        frozen = Tensor(frozen_forward * col)
    live = dc.mul(h_aligned, Tensor(1.0 - col))
    return dc.add(frozen, live)


@dataclass
class LossBundle:
    l_r: Tensor
    l_aux: Tensor
    l_ortho: Tensor
    l_q: Tensor
    alpha: float
    beta: float
    gamma: float
    l_total: Tensor

    def values(self) -> dict[str, float]:
        return {
            "l_r": self.l_r.item(),
            "l_aux": self.l_aux.item(),
            "l_ortho": self.l_ortho.item(),
            "l_q": self.l_q.item(),
            "l_total": self.l_total.item(),
        }


def total_loss(l_r: Tensor, l_aux: Tensor, l_ortho: Tensor, l_q: Tensor,
               alpha: float, beta: float, gamma: float) -> LossBundle:
    """Weighted objective: l_r + alpha*l_aux + beta*l_ortho + gamma*l_q."""
    if alpha < 0 or beta < 0 or gamma < 0:
        raise ContradictionError("loss weights must be non-negative")
    total = dc.add(
        dc.add(l_r, dc.scale(l_aux, alpha)),
        dc.add(dc.scale(l_ortho, beta), dc.scale(l_q, gamma)),
    )
    return LossBundle(l_r, l_aux, l_ortho, l_q, alpha, beta, gamma, total)
