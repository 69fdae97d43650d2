"""Stage 3: cut-statistics scoring on a K-nearest-neighbor graph of patient
embeddings, and budgeted selection of the most label-consistent patients."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)


@dataclass
class SubsetConfig:
    k: int = 20
    budget: float = 100.0  # percent of the non-abstained patients kept

    def validate(self):
        if self.k < 1:
            raise ConfigError("must be >= 1", key="subset.k")
        if not 0 < self.budget <= 100:
            raise ConfigError("must lie in (0, 100]", key="subset.budget")
        return self


@dataclass
class NeighborGraph:
    """Directed K-NN graph: row i lists node i's out-neighbors and edge weights."""

    neighbors: np.ndarray  # n x k int
    weights: np.ndarray  # n x k, 1 / (1 + distance)

    @property
    def n_nodes(self):
        return self.neighbors.shape[0]


@dataclass
class CutScores:
    J: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    z: np.ndarray


def knn_graph(z, K: int) -> NeighborGraph:
    """Exact L2 neighbors; distance ties go to the lower index.

    With ``len(z) <= K`` every node links to all ``len(z) - 1`` others.
    """
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    if n < 2:
        raise DataError(f"need at least 2 nodes for a neighbor graph, got {n}")
    k = min(K, n - 1)
    if k < K:
        log.warning("only %d nodes; using %d neighbors instead of %d", n, k, K)
    dist = cdist(z, z)
    np.fill_diagonal(dist, np.inf)
    # stable sort keeps index order among equal distances
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    d = np.take_along_axis(dist, order, axis=1)
    return NeighborGraph(order, 1.0 / (1.0 + d))


def class_priors(labels) -> dict:
    """Empirical frequency of each class among the given pseudo-labels."""
    labels = np.asarray(labels)
    return {c: float(np.mean(labels == c)) for c in (0, 1)}


def cut_statistics(graph: NeighborGraph, labels, priors=None) -> CutScores:
    """Per-node cut weight J, its null mean and std, and the z-score.

    Under the null each neighbor's label differs from node i's with
    probability ``1 - P(y_i)``. Where sigma is 0, z is 0 if J equals mu and
    +inf otherwise.
    """
    labels = np.asarray(labels)
    if labels.shape[0] != graph.n_nodes:
        raise DataError(f"{labels.shape[0]} labels for {graph.n_nodes} nodes")
    priors = class_priors(labels) if priors is None else priors
    p_own = np.array([priors[int(c)] for c in labels], dtype=np.float64)
    w = graph.weights
    differ = labels[graph.neighbors] != labels[:, None]
    J = (w * differ).sum(axis=1)
    mu = (1.0 - p_own) * w.sum(axis=1)
    sigma = np.sqrt(p_own * (1.0 - p_own) * (w * w).sum(axis=1))
    z = np.empty_like(J)
    pos = sigma > 0
    z[pos] = (J[pos] - mu[pos]) / sigma[pos]
    z[~pos] = np.where(J[~pos] == mu[~pos], 0.0, np.inf)
    return CutScores(J, mu, sigma, z)


def budget_size(n: int, b: float) -> int:
    return max(1, int((b * n) // 100))


def select_subset(scores: CutScores, b: float) -> np.ndarray:
    """Indices of the ``max(1, floor(b% of n))`` smallest z; ties to the lower index."""
    if not 0 < b <= 100:
        raise ConfigError(f"budget must lie in (0, 100], got {b}", key="subset.budget")
    z = np.asarray(scores.z)
    order = np.argsort(z, kind="stable")
    return np.sort(order[: budget_size(len(z), b)])


def write_cut_tsv(path, sample_ids, scores: CutScores, selected) -> None:
    flag = np.zeros(len(sample_ids), dtype=np.int64)
    flag[np.asarray(selected, dtype=np.int64)] = 1
    lines = ["sample_id\tJ\tmu\tsigma\tz\tselected"]
    for i, sid in enumerate(sample_ids):
        lines.append("\t".join([sid, repr(float(scores.J[i])), repr(float(scores.mu[i])),
                                repr(float(scores.sigma[i])), repr(float(scores.z[i])), str(flag[i])]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_cut_tsv(path):
    """(sample_ids, CutScores, selected mask)."""
    rows = [l.split("\t") for l in Path(path).read_text(encoding="utf-8").splitlines()[1:] if l]
    ids = [r[0] for r in rows]
    cols = np.array([[float(v) for v in r[1:5]] for r in rows], dtype=np.float64).reshape(-1, 4)
    sel = np.array([int(r[5]) for r in rows], dtype=bool)
    return ids, CutScores(cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3]), sel
