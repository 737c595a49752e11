"""Detector distillation losses and their analytic gradients.

Two components, both over the 65-channel cell tensors of teacher and
student:

  * cell-averaged KL divergence between the per-cell softmax
    distributions, gradient (u - s) / M in student logit space;
  * probabilistic knowledge transfer over the set of cells, matching the
    teacher's pairwise cosine-similarity conditional distribution with the
    student's, gradient chain-ruled through the similarity kernel, the L2
    normalization and the softmax.

All logs are natural. A 1e-12 floor guards logs and normalizations on
degenerate inputs; it never activates on finite random data.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rng
from .errors import DataError
from .heads import DETECTOR_CHANNELS, log_softmax, softmax

EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """alpha scales the descriptor matching term, pkt_weight the PKT term."""

    alpha: float = 1.0
    pkt_weight: float = 1.0

    def __post_init__(self):
        if self.alpha < 0.0 or self.pkt_weight < 0.0:
            raise DataError(
                f"loss weights must be >= 0, got alpha={self.alpha} pkt_weight={self.pkt_weight}"
            )


@dataclass
class LossValueGrad:
    """Scalar loss plus its gradient in student logit space."""

    value: float
    grad: np.ndarray
    parts: dict = field(default_factory=dict)


def _check_pair(teacher: np.ndarray, student: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(teacher, dtype=np.float64)
    u = np.asarray(student, dtype=np.float64)
    if t.shape != u.shape:
        raise DataError(f"teacher shape {t.shape} != student shape {u.shape}")
    if t.ndim != 3 or t.shape[2] != DETECTOR_CHANNELS:
        raise DataError(
            f"logit tensors must be Hc x Wc x {DETECTOR_CHANNELS}, got {t.shape}"
        )
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(u))):
        raise DataError("logit tensors contain non-finite values")
    return t, u


def kl_loss_grad(teacher: np.ndarray, student: np.ndarray) -> LossValueGrad:
    """Cell-averaged KL(teacher softmax || student softmax) with gradient.

    value = (1/M) sum_cells sum_k s_k (ln s_k - ln u_k) over the M cells;
    the gradient with respect to student logits is (u - s) / M per cell.
    """
    t, x_u = _check_pair(teacher, student)
    m = t.shape[0] * t.shape[1]
    log_s = log_softmax(t, axis=-1)
    log_u = log_softmax(x_u, axis=-1)
    s = np.exp(log_s)
    u = np.exp(log_u)
    value = float(np.sum(s * (log_s - log_u)) / m)
    grad = (u - s) / m
    return LossValueGrad(value=value, grad=grad)


def _unit_rows(logits_flat: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Softmax rows, their norms, and the L2-normalized rows."""
    p = softmax(logits_flat, axis=-1)
    norms = np.linalg.norm(p, axis=-1)
    y = p / np.maximum(norms, EPS)[:, None]
    return p, norms, y


def _conditionals(y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Similarity kernel K, row sums Z over j != i, and s_{j|i} = K/Z."""
    k = (y @ y.T + 1.0) / 2.0
    np.fill_diagonal(k, 0.0)
    z = k.sum(axis=1)
    cond = k / np.maximum(z, EPS)[:, None]
    np.fill_diagonal(cond, 0.0)
    return k, z, cond


def pkt_loss_grad(
    teacher: np.ndarray,
    student: np.ndarray,
    cell_subsample: Optional[int] = None,
    seed: int = 0,
) -> LossValueGrad:
    """Pairwise-similarity distribution matching loss with analytic gradient.

    Per cell the 65-channel softmax vector is L2-normalized; the kernel
    K(a,b) = (cos(a,b) + 1)/2 defines conditionals s_{j|i} = K_ij / sum_{k!=i}
    K_ik for teacher and student, and the loss is
    sum_i sum_{j!=i} s_{j|i} ln(s_{j|i} / u_{j|i}).

    With cell_subsample set and fewer than the total cell count, a seeded
    uniform subset of cells is used (the same subset for both tensors);
    gradients outside the subset are zero.
    """
    t, x_u = _check_pair(teacher, student)
    hc, wc = t.shape[:2]
    m_total = hc * wc
    if m_total < 2:
        raise DataError(f"pairwise loss needs at least 2 cells, got {m_total}")
    t_flat = t.reshape(m_total, DETECTOR_CHANNELS)
    u_flat = x_u.reshape(m_total, DETECTOR_CHANNELS)

    if cell_subsample is not None and 0 < cell_subsample < m_total:
        if cell_subsample < 2:
            raise DataError("cell_subsample must be >= 2")
        idx = rng.Stream(seed).sample_indices(m_total, cell_subsample)
    else:
        idx = np.arange(m_total)

    _, _, y_s = _unit_rows(t_flat[idx])
    p_u, norms_u, y_u = _unit_rows(u_flat[idx])
    _, _, s_cond = _conditionals(y_s)
    k_u, z_u, u_cond = _conditionals(y_u)

    m = len(idx)
    off = ~np.eye(m, dtype=bool)
    ratio = np.maximum(s_cond, EPS) / np.maximum(u_cond, EPS)
    value = float(np.sum(np.where(off, s_cond * np.log(ratio), 0.0)))

    # dV/dK_u[i,j] = 1/Z_i - s_{j|i}/K_u[i,j] for j != i
    g = np.where(
        off,
        1.0 / np.maximum(z_u, EPS)[:, None] - s_cond / np.maximum(k_u, EPS),
        0.0,
    )
    dy = 0.5 * (g + g.T) @ y_u
    # back through y = p/|p|: remove the radial component, divide by |p|
    radial = np.sum(dy * y_u, axis=-1, keepdims=True)
    dp = (dy - radial * y_u) / np.maximum(norms_u, EPS)[:, None]
    # softmax vjp
    dx = p_u * (dp - np.sum(p_u * dp, axis=-1, keepdims=True))

    grad = np.zeros_like(u_flat)
    grad[idx] = dx
    return LossValueGrad(value=value, grad=grad.reshape(t.shape))


def lp_loss(
    teacher: np.ndarray,
    student: np.ndarray,
    weights: LossWeights,
    cell_subsample: Optional[int] = None,
    seed: int = 0,
) -> LossValueGrad:
    """Detector distillation loss: KL term plus pkt_weight times the PKT term."""
    kl = kl_loss_grad(teacher, student)
    pkt = pkt_loss_grad(teacher, student, cell_subsample=cell_subsample, seed=seed)
    value = kl.value + weights.pkt_weight * pkt.value
    grad = kl.grad + weights.pkt_weight * pkt.grad
    return LossValueGrad(
        value=value, grad=grad, parts={"kl": kl.value, "pkt": pkt.value}
    )


@dataclass
class TotalLoss:
    """Joint objective value and per-tensor gradients."""

    value: float
    logit_grad: np.ndarray
    desc_grads: dict


def total_loss(
    lp: LossValueGrad, ld_value: float, ld_grads: dict, weights: LossWeights
) -> TotalLoss:
    """L = L_p + alpha * L_d with gradients aggregated per parameter tensor."""
    scaled = {name: weights.alpha * g for name, g in ld_grads.items()}
    return TotalLoss(
        value=lp.value + weights.alpha * float(ld_value),
        logit_grad=lp.grad,
        desc_grads=scaled,
    )
