"""Surrogate groups from K-means over (optionally class-standardized) features."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

EPS = 1e-8


@dataclass
class Grouping:
    assignment: np.ndarray
    centroids: np.ndarray
    L: int
    standardized: bool = False
    class_stats: Optional[dict] = None
    objective_history: list = field(default_factory=list)

    @property
    def objective(self) -> float:
        return self.objective_history[-1]


def class_standardize(features, labels, eps: float = EPS):
    """Remove each class's mean and scale by its population standard deviation.

    Returns the standardized features and ``{class: (mean, std)}``.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    out = np.empty_like(features)
    stats = {}
    for c in np.unique(labels):
        rows = labels == c
        mu = features[rows].mean(axis=0)
        sigma = features[rows].std(axis=0)
        out[rows] = (features[rows] - mu) / np.maximum(sigma, eps)
        stats[int(c)] = (mu, sigma)
    return out, stats


def _sq_dists(X, C):
    return np.maximum(
        np.sum(X * X, axis=1)[:, None] - 2.0 * X @ C.T + np.sum(C * C, axis=1)[None, :], 0.0
    )


def _farthest_point_seeds(X, L, rng):
    first = int(rng.integers(len(X)))
    seeds = [first]
    closest = np.sum((X - X[first]) ** 2, axis=1)
    for _ in range(1, L):
        nxt = int(np.argmax(closest))
        seeds.append(nxt)
        closest = np.minimum(closest, np.sum((X - X[nxt]) ** 2, axis=1))
    return X[seeds].copy()


def kmeans(features, L: int, max_iters: int = 100, rng=None) -> Grouping:
    """Lloyd's algorithm seeded by greedy farthest-point selection."""
    X = np.asarray(features, dtype=np.float64)
    n = len(X)
    if not 1 <= L <= n:
        raise ValueError(f"need 1 <= L <= n_samples, got L={L}, n={n}")
    rng = rng if rng is not None else np.random.default_rng(0)
    centroids = _farthest_point_seeds(X, L, rng)
    assignment = None
    history = []
    for _ in range(max(1, max_iters)):
        d2 = _sq_dists(X, centroids)
        new_assignment = np.argmin(d2, axis=1)
        # re-seed empty clusters from the points worst served so far
        sizes = np.bincount(new_assignment, minlength=L)
        for k in np.flatnonzero(sizes == 0):
            cost = d2[np.arange(n), new_assignment]
            cost[sizes[new_assignment] < 2] = -1.0
            worst = int(np.argmax(cost))
            sizes[new_assignment[worst]] -= 1
            sizes[k] = 1
            centroids[k] = X[worst]
            d2[:, k] = np.sum((X - X[worst]) ** 2, axis=1)
            new_assignment[worst] = k
        history.append(float(np.sum(d2[np.arange(n), new_assignment])))
        if assignment is not None and np.array_equal(assignment, new_assignment):
            break
        assignment = new_assignment
        for k in range(L):
            centroids[k] = X[assignment == k].mean(axis=0)
    # objective of the final centroids
    history.append(float(np.sum((X - centroids[assignment]) ** 2)))
    return Grouping(assignment, centroids, L, objective_history=history)


def unique_classes_per_group(grouping, labels) -> float:
    """Mean number of distinct class labels per non-empty group."""
    assignment = grouping.assignment if hasattr(grouping, "assignment") else np.asarray(grouping)
    labels = np.asarray(labels)
    counts = [np.unique(labels[assignment == g]).size for g in np.unique(assignment)]
    return float(np.mean(counts))


def recompute_groups(params, train_ds, L: int, use_std: bool, rng, max_iters: int = 100) -> Grouping:
    from .model import forward_features

    feats = forward_features(params, train_ds.features)
    stats = None
    if use_std:
        feats, stats = class_standardize(feats, train_ds.labels)
    grouping = kmeans(feats, L, max_iters, rng)
    grouping.standardized = use_std
    grouping.class_stats = stats
    return grouping


def save_grouping(grouping: Grouping, path) -> None:
    lines = ["sample_index,group_id"]
    lines += [f"{i},{int(g)}" for i, g in enumerate(grouping.assignment)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
