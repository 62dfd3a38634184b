"""
Expected-loss penalty of multiplicative weight masks.

With ΔM = M − E[M], expanding L(W ⊙ M) around W̄ = W ⊙ E[M] to second order
and taking expectations leaves ½·tr(H·diag(W)·Σ_ΔM·diag(W)), which for
independent mask elements is ½·Σ Var(m)·W_i²·∂²L/∂W_i². The Monte Carlo side
measures E[L(W ⊙ M)] − L(W̄) directly.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from infrastructure.errors import ContractError, DimensionError
from infrastructure.logger import log
from services.autodiff import finite_diff_grad, hessian_diag
from services.regularizers.masks import MaskSpec, expected_mask_value, mask_variance, sample_mask
from services.tensor_core import RngStream

MIN_MC_SAMPLES = 1000


@dataclass
class PenaltyEstimate:
    mc_gap: float
    closed_form: Optional[float]
    n_samples: int
    std_err: float
    n_excluded: int = 0

    @property
    def z_score(self) -> float:
        """(mc_gap − closed_form) in standard errors."""
        if self.closed_form is None:
            return float("nan")
        if self.std_err == 0:
            return 0.0 if self.mc_gap == self.closed_form else float("inf")
        return (self.mc_gap - self.closed_form) / self.std_err


def mc_expected_loss_gap(loss_fn, W, spec: MaskSpec, n_samples: int, stream: RngStream,
                         with_closed_form: bool = True, control_variate: bool = False) -> PenaltyEstimate:
    """
    Monte Carlo estimate of E[L(W ⊙ M)] − L(W ⊙ E[M]) over `n_samples` fresh masks.
    Non-finite loss draws are dropped and counted in `n_excluded`.

    With `control_variate`, the first-order term ∇L·(W ⊙ ΔM), whose expectation is
    zero, is subtracted from every draw. The estimate stays unbiased; only its
    variance shrinks.
    """
    if n_samples < MIN_MC_SAMPLES:
        raise ContractError(f"n_samples must be at least {MIN_MC_SAMPLES}, got {n_samples}")
    W = np.asarray(W, dtype=np.float64)
    centre = W * expected_mask_value(spec)
    base = float(loss_fn(centre))

    masks = sample_mask(spec, (n_samples,) + W.shape, stream)
    draws = np.array([loss_fn(W * m) for m in masks], dtype=np.float64)
    if control_variate:
        grad = finite_diff_grad(loss_fn, centre)
        deltas = masks - expected_mask_value(spec)
        draws = draws - np.sum((grad * W)[None] * deltas, axis=tuple(range(1, deltas.ndim)))
    finite = np.isfinite(draws)
    n_excluded = int((~finite).sum())
    if n_excluded:
        log.warning(f"[PENALTY] {n_excluded} of {n_samples} loss draws were non-finite and excluded")
    draws = draws[finite]

    gaps = draws - base
    std_err = float(gaps.std(ddof=1) / np.sqrt(gaps.size)) if gaps.size > 1 else 0.0
    closed = None
    if with_closed_form:
        closed = closed_form_penalty(W, hessian_diag(loss_fn, centre), spec)
    return PenaltyEstimate(float(gaps.mean()), closed, int(gaps.size), std_err, n_excluded)


def closed_form_penalty(W, hess_diag, spec: MaskSpec) -> float:
    """½ Σ Var(m)·W_i²·H_ii with Var(m) = p(1−p), σ², or t·σ² (partial mixture)."""
    W, hess_diag = np.asarray(W, dtype=np.float64), np.asarray(hess_diag, dtype=np.float64)
    if W.shape != hess_diag.shape:
        raise DimensionError(f"Weights {W.shape} and Hessian diagonal {hess_diag.shape} differ")
    return float(0.5 * mask_variance(spec) * np.sum(W * W * hess_diag))


def general_trace_penalty(W, hessian, mask_cov) -> float:
    """½·tr(H·diag(W)·Σ·diag(W)) for flattened weights."""
    w = np.asarray(W, dtype=np.float64).reshape(-1)
    H, S = np.asarray(hessian, dtype=np.float64), np.asarray(mask_cov, dtype=np.float64)
    n = w.size
    if H.shape != (n, n) or S.shape != (n, n):
        raise DimensionError(f"Hessian {H.shape} and covariance {S.shape} must both be {(n, n)}")
    if not np.allclose(H, H.T):
        raise ContractError("Hessian must be symmetric")
    if np.linalg.eigvalsh((S + S.T) / 2).min() < -1e-12:
        raise ContractError("Mask covariance must be positive semidefinite")
    D = np.diag(w)
    return float(0.5 * np.trace(H @ D @ S @ D))
