"""Mini-batch construction and triplet assembly.

Triplets are expressed as positions into the current batch (a batch may hold
the same dataset index twice when a class is smaller than ``m``);
``TripletSet.dataset_indices`` maps them back.

Every pick consumes exactly one uniform draw from the generator, whatever the
strategy, so two strategies run from the same generator state make the same
positive choices and differ only where their rules differ.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SamplingError

logger = logging.getLogger(__name__)

NEGATIVE_STRATEGIES = ("random", "semihard", "distance_weighted")
SHARED_STRATEGIES = ("interclass", "interclass_minap", "unconstrained", "group", "group_std")
ORIGINS = ("discriminative", "interclass", "interclass_minap", "group", "unconstrained")


@dataclass(frozen=True)
class SamplerConfig:
    negative_strategy: str = "distance_weighted"
    shared_strategy: str = "interclass"
    clamp_low: float = 0.5
    # largest probability any single candidate may receive after normalization
    weight_cap: float = 0.9

    def validate(self) -> None:
        if self.negative_strategy not in NEGATIVE_STRATEGIES:
            raise ConfigError("negative_strategy", f"must be one of {NEGATIVE_STRATEGIES}")
        if self.shared_strategy not in SHARED_STRATEGIES:
            raise ConfigError("shared_strategy", f"must be one of {SHARED_STRATEGIES}")
        if not 0 < self.clamp_low < 2:
            raise ConfigError("clamp_low", "must lie in (0, 2)")
        if not self.weight_cap > 0:
            raise ConfigError("weight_cap", "must be > 0")


@dataclass(frozen=True)
class Batch:
    indices: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.indices)


@dataclass
class TripletSet:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    origin: str
    degenerate: bool = False

    def __len__(self):
        return len(self.anchor)

    def as_array(self) -> np.ndarray:
        return np.stack([self.anchor, self.positive, self.negative], axis=1).reshape(-1, 3)

    def dataset_indices(self, batch: Batch) -> np.ndarray:
        return batch.indices[self.as_array()]

    @classmethod
    def empty(cls, origin: str) -> "TripletSet":
        none = np.zeros(0, dtype=np.int64)
        return cls(none, none.copy(), none.copy(), origin, degenerate=True)


def build_batch(labels, b: int, m: int, rng: np.random.Generator) -> Batch:
    """Draw ``m`` samples from uniformly chosen classes until ``b`` are collected."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise SamplingError("cannot draw a batch from an empty dataset")
    if not b >= m >= 1:
        raise ValueError("need b >= m >= 1")
    classes = np.unique(labels)
    members = {c: np.flatnonzero(labels == c) for c in classes}
    chosen = []
    while len(chosen) < b:
        for c in rng.permutation(classes):
            take = min(m, b - len(chosen))
            pool = members[c]
            chosen.extend(rng.choice(pool, size=take, replace=len(pool) < take))
            if len(chosen) == b:
                break
    indices = np.array(chosen, dtype=np.int64)
    return Batch(indices, labels[indices])


def log_q_density(d, D: int):
    d = np.asarray(d, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return (D - 2) * np.log(d) + (D - 3) / 2.0 * np.log(1.0 - 0.25 * d * d)


def q_density(d: float, D: int) -> float:
    """Unnormalized density of pairwise distances between uniform points on the sphere."""
    if D < 3:
        raise ValueError("q_density needs D >= 3")
    if not 0.0 <= d <= 2.0:
        raise ValueError(f"distance {d} outside [0, 2]")
    return float(d ** (D - 2) * (1.0 - 0.25 * d * d) ** ((D - 3) / 2.0))


def _cap(probs: np.ndarray, cap: float) -> np.ndarray:
    n = len(probs)
    if cap >= 1.0 or n == 1:
        return probs
    if cap * n <= 1.0:
        return np.full(n, 1.0 / n)
    probs = probs.copy()
    capped = np.zeros(n, dtype=bool)
    while True:
        over = probs > cap
        if not over.any():
            return probs
        capped |= over
        excess = float(np.sum(probs[over] - cap))
        probs[over] = cap
        free = ~capped
        mass = probs[free].sum()
        if mass > 0:
            probs[free] += excess * probs[free] / mass
        else:
            probs[free] += excess / free.sum()


def distance_weights(dists, D: int, clamp_low: float = 0.5, weight_cap: float = 0.9) -> np.ndarray:
    """Pick probabilities proportional to 1/q(d), with d clamped from below."""
    d = np.clip(np.asarray(dists, dtype=np.float64), clamp_low, 2.0 - 1e-6)
    log_w = -log_q_density(d, D)
    log_w -= log_w.max()
    w = np.exp(log_w)
    return _cap(w / w.sum(), weight_cap)


def _pick(probs: np.ndarray, u: float) -> int:
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, u * cdf[-1], side="right"), len(probs) - 1))


def _uniform(n: int, u: float) -> int:
    return min(int(u * n), n - 1)


def distance_weighted_pick(anchor_emb, candidate_embs, D: int, cfg: SamplerConfig, rng) -> int:
    candidate_embs = np.atleast_2d(candidate_embs)
    if candidate_embs.shape[0] == 0:
        raise SamplingError("no candidates to pick from")
    u = rng.random()
    if candidate_embs.shape[0] == 1:
        return 0
    d = np.linalg.norm(candidate_embs - anchor_emb, axis=1)
    return _pick(distance_weights(d, D, cfg.clamp_low, cfg.weight_cap), u)


def semihard_negative(anchor_emb, positive_emb, negative_embs) -> int:
    negative_embs = np.atleast_2d(negative_embs)
    if negative_embs.shape[0] == 0:
        raise SamplingError("no negatives to pick from")
    d_ap = np.linalg.norm(anchor_emb - positive_emb)
    d_an = np.linalg.norm(negative_embs - anchor_emb, axis=1)
    harder = np.flatnonzero(d_an > d_ap)
    if harder.size:
        return int(harder[np.argmin(d_an[harder])])
    return int(np.argmax(d_an))


def _choose_negative(E, a: int, p: int, cands: np.ndarray, cfg: SamplerConfig, rng) -> int:
    if cfg.negative_strategy == "random":
        return int(cands[_uniform(len(cands), rng.random())])
    if cfg.negative_strategy == "semihard":
        rng.random()
        return int(cands[semihard_negative(E[a], E[p], E[cands])])
    return int(cands[distance_weighted_pick(E[a], E[cands], E.shape[1], cfg, rng)])


def _label_triplets(labels, E, cfg, rng, origin) -> TripletSet:
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        logger.warning("%s triplets: batch holds a single label, no triplets drawn", origin)
        return TripletSet.empty(origin)
    positions = np.arange(len(labels))
    out = []
    for a in positions:
        same = positions[(labels == labels[a]) & (positions != a)]
        if same.size == 0:
            continue
        p = int(same[_uniform(same.size, rng.random())])
        cands = positions[labels != labels[a]]
        out.append((a, p, _choose_negative(E, a, p, cands, cfg, rng)))
    return _to_set(out, origin)


def _to_set(rows, origin) -> TripletSet:
    if not rows:
        return TripletSet.empty(origin)
    arr = np.array(rows, dtype=np.int64)
    return TripletSet(arr[:, 0], arr[:, 1], arr[:, 2], origin)


def sample_discriminative_triplets(batch: Batch, embeddings, cfg: SamplerConfig, rng) -> TripletSet:
    """One triplet per anchor: same-class positive, other-class negative."""
    return _label_triplets(batch.labels, np.asarray(embeddings), cfg, rng, "discriminative")


def sample_group_triplets(batch: Batch, grouping, embeddings, cfg: SamplerConfig, rng) -> TripletSet:
    """Like the discriminative sampler, but surrogate groups replace classes."""
    assignment = grouping.assignment if hasattr(grouping, "assignment") else np.asarray(grouping)
    groups = assignment[batch.indices]
    return _label_triplets(groups, np.asarray(embeddings), cfg, rng, "group")


def sample_interclass_triplets(batch: Batch, embeddings, cfg: SamplerConfig, rng) -> TripletSet:
    """Triplets whose anchor, positive and negative come from three different classes.

    ``cfg.shared_strategy`` selects the variant: ``interclass`` samples
    positive and negative by inverse distance density, ``interclass_minap``
    takes the nearest other-class sample as positive and ``unconstrained``
    draws both uniformly without looking at labels.
    """
    E = np.asarray(embeddings)
    labels = batch.labels
    n = len(labels)
    positions = np.arange(n)
    strategy = cfg.shared_strategy

    if strategy == "unconstrained":
        if n < 3:
            raise SamplingError("unconstrained triplets need at least 3 batch members")
        out = []
        for a in positions:
            others = positions[positions != a]
            p = int(others[_uniform(others.size, rng.random())])
            rest = others[others != p]
            out.append((a, p, int(rest[_uniform(rest.size, rng.random())])))
        return _to_set(out, "unconstrained")

    if strategy not in ("interclass", "interclass_minap"):
        raise ValueError(f"{strategy!r} is not an inter-class strategy")
    if np.unique(labels).size < 3:
        raise SamplingError("inter-class triplets need at least 3 classes in the batch")
    D = E.shape[1]
    out = []
    for a in positions:
        pos_cands = positions[labels != labels[a]]
        if strategy == "interclass_minap":
            rng.random()
            d = np.linalg.norm(E[pos_cands] - E[a], axis=1)
            p = int(pos_cands[np.argmin(d)])
        else:
            p = int(pos_cands[distance_weighted_pick(E[a], E[pos_cands], D, cfg, rng)])
        neg_cands = positions[(labels != labels[a]) & (labels != labels[p])]
        n_idx = int(neg_cands[distance_weighted_pick(E[a], E[neg_cands], D, cfg, rng)])
        out.append((a, p, n_idx))
    return _to_set(out, strategy)
