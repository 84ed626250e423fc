"""Retrieval and clustering metrics over embedded datasets.

Nearest-neighbour ties are broken by ascending sample index everywhere, so
results are reproducible bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .grouping import kmeans

REPRESENTATIONS = ("phi", "phi_star", "concat", "features_f", "phi_reinit")


@dataclass
class MetricsReport:
    epoch: int
    split: str
    representation: str
    recall_at: dict = field(default_factory=dict)
    nmi: float = None
    extra: dict = field(default_factory=dict)

    def rows(self):
        """Flatten to ``(epoch, split, representation, metric, value)`` tuples."""
        out = [
            (self.epoch, self.split, self.representation, f"recall@{k}", v)
            for k, v in sorted(self.recall_at.items())
        ]
        if self.nmi is not None:
            out.append((self.epoch, self.split, self.representation, "nmi", self.nmi))
        for name, v in sorted(self.extra.items()):
            out.append((self.epoch, self.split, self.representation, name, v))
        return out


def pairwise_distances(embeddings) -> np.ndarray:
    E = np.asarray(embeddings, dtype=np.float64)
    if E.ndim != 2 or len(E) < 2:
        raise DimensionError("need at least two embeddings of equal dimension")
    sq = np.sum(E * E, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (E @ E.T)
    d2 = 0.5 * (d2 + d2.T)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(np.maximum(d2, 0.0))


def _first_hit_rank(dist: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Rank of each query's nearest same-label neighbour, ordering by (distance, index).

    ``n`` (past every rank) when the query has no same-label partner.
    """
    n = len(labels)
    idx = np.arange(n)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    d_same = np.where(same, dist, np.inf)
    j_star = np.argmin(d_same, axis=1)  # lowest index among equal minima
    d_star = d_same[idx, j_star]
    other = ~same
    np.fill_diagonal(other, False)
    before = (dist < d_star[:, None]) | ((dist == d_star[:, None]) & (idx[None, :] < j_star[:, None]))
    rank = np.sum(other & before, axis=1)
    return np.where(np.isfinite(d_star), rank, n)


def recall_at_ks(embeddings, labels, ks) -> dict:
    labels = np.asarray(labels)
    n = len(labels)
    if n < 2:
        raise ValueError("recall needs at least two samples")
    ks = sorted(set(int(k) for k in ks))
    if ks[0] < 1 or ks[-1] >= n:
        raise ValueError(f"K must lie in [1, {n - 1}]")
    rank = _first_hit_rank(pairwise_distances(embeddings), labels)
    return {k: float(np.mean(rank < k)) for k in ks}


def recall_at_k(embeddings, labels, K: int) -> float:
    return recall_at_ks(embeddings, labels, [K])[K]


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def nmi(cluster_ids, labels) -> float:
    """Mutual information normalized by the geometric mean of both entropies."""
    cluster_ids = np.asarray(cluster_ids)
    labels = np.asarray(labels)
    if cluster_ids.shape != labels.shape:
        raise DimensionError("cluster_ids and labels differ in length")
    if cluster_ids.size == 0:
        raise ValueError("nmi needs at least one sample")
    _, ci = np.unique(cluster_ids, return_inverse=True)
    _, li = np.unique(labels, return_inverse=True)
    table = np.zeros((ci.max() + 1, li.max() + 1))
    np.add.at(table, (ci, li), 1.0)
    h_c = _entropy(table.sum(axis=1))
    h_l = _entropy(table.sum(axis=0))
    if h_c == 0.0 or h_l == 0.0:
        return 0.0
    n = table.sum()
    joint = table[table > 0] / n
    outer = (table.sum(axis=1)[:, None] * table.sum(axis=0)[None, :])[table > 0] / (n * n)
    mi = float(np.sum(joint * np.log(joint / outer)))
    return min(1.0, max(0.0, mi / math.sqrt(h_c * h_l)))


def cluster_nmi(embeddings, labels, restarts: int = 10, seed: int = 0) -> float:
    """NMI of the best-objective K-means run (K = number of classes present)."""
    labels = np.asarray(labels)
    L = np.unique(labels).size
    best = None
    for i in range(restarts):
        g = kmeans(embeddings, L, rng=np.random.default_rng([seed, i]))
        if best is None or g.objective < best.objective:
            best = g
    return nmi(best.assignment, labels)


def concat_embeddings(phi_vec, phi_star_vec) -> np.ndarray:
    return np.concatenate([np.asarray(phi_vec), np.asarray(phi_star_vec)], axis=-1)


def generalization_gap(train_recall1: float, test_recall1: float) -> float:
    """Test minus train; negative values mean the model overfits."""
    return test_recall1 - train_recall1


def cross_class_neighbors(embeddings, labels, query: int, K: int) -> np.ndarray:
    E = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    cands = np.flatnonzero(labels != labels[query])
    if cands.size < K:
        raise ValueError(f"only {cands.size} samples outside the query's class, need {K}")
    d = np.linalg.norm(E[cands] - E[query], axis=1)
    return cands[np.argsort(d, kind="stable")[:K]]


def representation(params, X, name: str, reinit_seed: int = 0) -> np.ndarray:
    from .model import embed, forward_features, reinit_encoder

    F = forward_features(params, X)
    if name == "features_f":
        return F
    if name == "phi":
        return embed(params, F, "class")
    if name == "phi_star":
        return embed(params, F, "shared")
    if name == "concat":
        return concat_embeddings(embed(params, F, "class"), embed(params, F, "shared"))
    if name == "phi_reinit":
        return embed(reinit_encoder(params, "class", reinit_seed), F, "class")
    raise ValueError(f"unknown representation {name!r}")


def evaluate(
    params,
    ds,
    split: str,
    representations,
    epoch: int = 0,
    ks=(1,),
    nmi_restarts: int = 0,
    shared_recall: bool = False,
    seed: int = 0,
) -> list:
    """One ``MetricsReport`` per representation on dataset ``ds``.

    ``nmi_restarts=0`` skips the clustering metric.  ``shared_recall`` adds
    Recall@1 measured against the hidden shared factor instead of the class.
    """
    reports = []
    for name in representations:
        E = representation(params, ds.features, name, reinit_seed=seed)
        report = MetricsReport(epoch, split, name, recall_at_ks(E, ds.labels, ks))
        if nmi_restarts:
            report.nmi = cluster_nmi(E, ds.labels, nmi_restarts, seed)
        if shared_recall and ds.shared_factors is not None:
            report.extra["shared_recall@1"] = recall_at_k(E, ds.shared_factors, 1)
        reports.append(report)
    return reports
