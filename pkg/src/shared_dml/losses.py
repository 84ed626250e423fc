"""Ranking losses and the correlation objective.

The scalar functions take single embeddings and mirror the textbook formulas.
The ``*_terms`` functions are their batched counterparts returning per-triplet
values together with analytic (sub)gradients; ``model`` backpropagates those.
At every hinge kink the subgradient is taken to be 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError

LOSS_KINDS = ("triplet", "margin")
COMBINE_MODES = ("discr_only", "shared_only", "single", "dual", "dual_decor")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "triplet"
    alpha: float = 0.2
    beta: float = 0.6
    learn_beta: bool = False
    gamma: float = 0.0

    def validate(self) -> None:
        if self.kind not in LOSS_KINDS:
            raise ConfigError("kind", f"must be one of {LOSS_KINDS}")
        if not self.alpha >= 0:
            raise ConfigError("alpha", "must be >= 0")
        if not self.gamma >= 0:
            raise ConfigError("gamma", "must be >= 0")
        if self.kind == "margin" and not self.beta > 0:
            raise ConfigError("beta", "must be > 0 for the margin loss")


def _check_same_shape(*vectors):
    shape = np.shape(vectors[0])
    for v in vectors[1:]:
        if np.shape(v) != shape:
            raise DimensionError(f"shape mismatch: {shape} vs {np.shape(v)}")


def triplet_loss(e_a, e_p, e_n, alpha: float) -> float:
    e_a, e_p, e_n = (np.asarray(v, dtype=np.float64) for v in (e_a, e_p, e_n))
    _check_same_shape(e_a, e_p, e_n)
    d_ap = np.sum((e_a - e_p) ** 2)
    d_an = np.sum((e_a - e_n) ** 2)
    return float(max(0.0, d_ap - d_an + alpha))


def margin_loss(e_a, e_p, e_n, alpha: float, beta: float) -> float:
    e_a, e_p, e_n = (np.asarray(v, dtype=np.float64) for v in (e_a, e_p, e_n))
    _check_same_shape(e_a, e_p, e_n)
    d_ap = np.linalg.norm(e_a - e_p)
    d_an = np.linalg.norm(e_a - e_n)
    return float(max(0.0, d_ap - beta + alpha) + max(0.0, beta - d_an + alpha))


def correlation(phi_vec, p_vec) -> float:
    """Mean over dimensions of the squared elementwise product."""
    phi_vec = np.asarray(phi_vec, dtype=np.float64)
    p_vec = np.asarray(p_vec, dtype=np.float64)
    _check_same_shape(phi_vec, p_vec)
    return float(np.mean((phi_vec * p_vec) ** 2))


def triplet_terms(A, P, N, alpha):
    """Batched triplet loss.

    Returns ``(losses, dA, dP, dN)`` where the gradients are of each row's
    own loss with respect to its three embeddings.
    """
    diff_ap = A - P
    diff_an = A - N
    losses = np.sum(diff_ap**2, axis=1) - np.sum(diff_an**2, axis=1) + alpha
    active = (losses > 0)[:, None]
    losses = np.maximum(losses, 0.0)
    dA = np.where(active, 2.0 * (N - P), 0.0)
    dP = np.where(active, -2.0 * diff_ap, 0.0)
    dN = np.where(active, 2.0 * diff_an, 0.0)
    return losses, dA, dP, dN


def margin_terms(A, P, N, alpha, beta):
    """Batched margin loss; returns ``(losses, dA, dP, dN, dbeta)``."""
    diff_ap = A - P
    diff_an = A - N
    d_ap = np.linalg.norm(diff_ap, axis=1)
    d_an = np.linalg.norm(diff_an, axis=1)
    pos_hinge = d_ap - beta + alpha
    neg_hinge = beta - d_an + alpha
    pos_on = pos_hinge > 0
    neg_on = neg_hinge > 0
    losses = np.maximum(pos_hinge, 0.0) + np.maximum(neg_hinge, 0.0)

    # unit directions; zero where the distance vanishes (subgradient 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        u_ap = np.where(d_ap[:, None] > 0, diff_ap / d_ap[:, None], 0.0)
        u_an = np.where(d_an[:, None] > 0, diff_an / d_an[:, None], 0.0)
    g_ap = np.where(pos_on[:, None], u_ap, 0.0)
    g_an = np.where(neg_on[:, None], -u_an, 0.0)
    dA = g_ap + g_an
    dP = -g_ap
    dN = -g_an
    dbeta = neg_on.astype(np.float64) - pos_on.astype(np.float64)
    return losses, dA, dP, dN, dbeta


def correlation_terms(Phi, Proj):
    """Row-wise correlation ``r_i`` with gradients wrt both inputs."""
    D = Phi.shape[1]
    prod = Phi * Proj
    r = np.sum(prod**2, axis=1) / D
    dPhi = 2.0 * prod * Proj / D
    dProj = 2.0 * prod * Phi / D
    return r, dPhi, dProj


def combined_loss(
    mode: str,
    discr: float = 0.0,
    inter: float = 0.0,
    r: float = 0.0,
    gamma: float = 0.0,
) -> float:
    """Total objective for one training configuration.

    ``discr``/``inter`` are the ranking losses on discriminative and
    inter-class triplets.  Only ``dual_decor`` subtracts the decorrelation
    term; the reversal of its gradient happens in ``model.backward``.
    """
    if mode not in COMBINE_MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if gamma < 0:
        raise ConfigError("gamma", "must be >= 0")
    if mode != "dual_decor" and gamma != 0 and r != 0:
        raise ValueError(f"mode {mode!r} has no decorrelation term (needs two encoders)")
    if mode == "discr_only":
        return discr
    if mode == "shared_only":
        return inter
    if mode in ("single", "dual"):
        return discr + inter
    return discr + inter - gamma * r
