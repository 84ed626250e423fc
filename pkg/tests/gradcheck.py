"""Central finite-difference oracle for the hand-written backward pass."""

import dataclasses

import numpy as np

from shared_dml import model as M

STEP = 1e-5


def random_case(rng, n=7, n_triplets=9):
    """Small random network, batch and triplet table with weights off the init scale."""
    dims = M.ModelDims(
        ambient=int(rng.integers(2, 6)),
        feature=int(rng.integers(3, 8)),
        embed=int(rng.integers(3, 6)),
        embed_star=int(rng.integers(3, 6)),
        reg_hidden=int(rng.integers(2, 7)),
        f_hidden=tuple(int(h) for h in rng.integers(2, 9, size=rng.integers(0, 3))),
    )
    params = M.init_params(dims, int(rng.integers(2**31)))
    for name, v in params.tensors.items():
        v += 0.3 * rng.standard_normal(v.shape)
    X = rng.standard_normal((n, dims.ambient))
    triplets = rng.integers(0, n, size=(n_triplets, 3))
    return params, X, triplets


def _loss(params, X, triplets, head, cfg, decorrelate, flip_decor):
    tape = M.forward_loss(params, X, triplets, head, cfg, decorrelate)
    if flip_decor:
        return tape.ranking + cfg.gamma * tape.r
    return tape.loss


def numeric_grads(params, X, triplets, head, cfg, decorrelate, flip_decor=False):
    """Central differences of ``ranking - gamma*r`` (or ``+ gamma*r`` when flipped)."""
    out = {}
    for name, value in params.tensors.items():
        g = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            probe = params.copy()
            probe.tensors[name][idx] += STEP
            up = _loss(probe, X, triplets, head, cfg, decorrelate, flip_decor)
            probe.tensors[name][idx] -= 2 * STEP
            down = _loss(probe, X, triplets, head, cfg, decorrelate, flip_decor)
            g[idx] = (up - down) / (2 * STEP)
        out[name] = g
    return out


def relative_error(analytic, numeric) -> float:
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-6)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def near_kink(params, X, triplets, head, cfg, tol=1e-3) -> bool:
    """True when some hinge is within ``tol`` of switching."""
    if head is None or not len(triplets):
        return False
    E = M.embed_inputs(params, X, head)
    a, p, n = E[triplets[:, 0]], E[triplets[:, 1]], E[triplets[:, 2]]
    if cfg.kind == "triplet":
        h = [np.sum((a - p) ** 2, 1) - np.sum((a - n) ** 2, 1) + cfg.alpha]
    else:
        beta = params.beta[head]
        h = [
            np.linalg.norm(a - p, axis=1) - beta + cfg.alpha,
            beta - np.linalg.norm(a - n, axis=1) + cfg.alpha,
            np.linalg.norm(a - p, axis=1),
        ]
    return any(np.any(np.abs(v) < tol) for v in h)


def encoder_side(name: str) -> bool:
    return M.is_encoder_tensor(name)


def with_beta(cfg, **changes):
    return dataclasses.replace(cfg, **changes)
