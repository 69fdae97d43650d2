"""Stage 2: label functions trained on disjoint cell-line chunks, thresholded
votes with abstention, and vote aggregation into patient pseudo-labels."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import chunk_partition
from .errors import ChunkError, ConfigError
from .nn import BinaryClassifier

ABSTAIN = -1


@dataclass
class WeakSupConfig:
    chunks: int = 5
    t_plus: float = 0.7
    t_minus: float = 0.3
    aggregator: str = "majority"  # or "median"
    epochs: int = 200
    lr: float = 1e-3
    hidden: tuple = (64, 32)
    seed: int = 0

    def validate(self):
        if self.chunks < 1:
            raise ConfigError("must be >= 1", key="weaksup.chunks")
        if not 0 < self.t_minus < self.t_plus < 1:
            raise ConfigError(f"need 0 < t_minus < t_plus < 1, got t_minus={self.t_minus}, "
                              f"t_plus={self.t_plus}", key="weaksup.t_minus")
        if self.aggregator not in ("majority", "median"):
            raise ConfigError(f"unknown aggregator {self.aggregator!r}", key="weaksup.aggregator")
        if self.epochs < 1 or self.lr <= 0:
            raise ConfigError("epochs and lr must be positive", key="weaksup.epochs")
        return self


@dataclass
class LabelFunction:
    classifier: BinaryClassifier
    chunk: int
    members: np.ndarray  # row indices into the labeled subset used for training

    def predict_proba(self, z):
        return self.classifier.predict_proba(z)


@dataclass
class PseudoLabelSet:
    indices: np.ndarray  # rows of the patient matrix that received a label
    labels: np.ndarray

    def __len__(self):
        return len(self.indices)


def train_label_functions(z_cell, labels, O, cfg: WeakSupConfig, seed=None) -> list:
    """One classifier per chunk of the cells labeled for this drug.

    Cells labeled -1 are dropped before chunking. A chunk holding a single
    class raises ``ChunkError``; callers may retry with another seed.
    """
    z_cell = np.asarray(z_cell, dtype=np.float64)
    labels = np.asarray(labels)
    seed = cfg.seed if seed is None else seed
    labeled = np.flatnonzero(labels >= 0)
    chunks = chunk_partition(len(labeled), O, seed)
    for i, c in enumerate(chunks):
        if len(np.unique(labels[labeled[c]])) < 2:
            raise ChunkError(f"chunk {i} contains a single class", chunk=i)
    lfs = []
    for i, c in enumerate(chunks):
        rows = labeled[c]
        clf = BinaryClassifier(z_cell.shape[1], hidden=cfg.hidden, seed=seed * 1009 + i,
                               name=f"label_function[{i}]")
        clf.fit(z_cell[rows], labels[rows], epochs=cfg.epochs, lr=cfg.lr)
        lfs.append(LabelFunction(clf, i, rows))
    return lfs


def label_function_probs(lfs, z_patient) -> np.ndarray:
    """patients x O matrix of responder probabilities, columns in chunk order."""
    return np.column_stack([lf.predict_proba(z_patient) for lf in lfs])


def vote(probabilities, t_plus, t_minus) -> np.ndarray:
    """1 above ``t_plus``, 0 below ``t_minus``, otherwise abstain (-1)."""
    p = np.asarray(probabilities, dtype=np.float64)
    out = np.full(p.shape, ABSTAIN, dtype=np.int64)
    out[p > t_plus] = 1
    out[p < t_minus] = 0
    return out


def majority_vote(votes) -> PseudoLabelSet:
    """Label 1 iff ones outnumber zeros among non-abstained votes; ties go to 0.

    Rows where every function abstained are dropped.
    """
    votes = np.atleast_2d(np.asarray(votes))
    ones = (votes == 1).sum(axis=1)
    zeros = (votes == 0).sum(axis=1)
    keep = np.flatnonzero(ones + zeros > 0)
    return PseudoLabelSet(keep, (ones[keep] > zeros[keep]).astype(np.int64))


def median_aggregate(probabilities, t_plus, t_minus) -> PseudoLabelSet:
    """Threshold the per-patient median probability; the abstain band drops the row."""
    p = np.atleast_2d(np.asarray(probabilities, dtype=np.float64))
    med = np.median(p, axis=1)
    v = vote(med, t_plus, t_minus)
    keep = np.flatnonzero(v != ABSTAIN)
    return PseudoLabelSet(keep, v[keep])


def aggregate(probabilities, cfg: WeakSupConfig):
    """(votes, pseudo-labels) under the configured aggregator."""
    votes = vote(probabilities, cfg.t_plus, cfg.t_minus)
    if cfg.aggregator == "median":
        return votes, median_aggregate(probabilities, cfg.t_plus, cfg.t_minus)
    return votes, majority_vote(votes)


def write_votes_tsv(path, sample_ids, votes, pseudo: PseudoLabelSet) -> None:
    """sample_id, vote_1..vote_O, final_label (-1 where the row was dropped)."""
    votes = np.atleast_2d(votes)
    final = np.full(len(sample_ids), ABSTAIN, dtype=np.int64)
    final[pseudo.indices] = pseudo.labels
    header = ["sample_id"] + [f"vote_{i + 1}" for i in range(votes.shape[1])] + ["final_label"]
    lines = ["\t".join(header)]
    for sid, row, f in zip(sample_ids, votes, final):
        lines.append("\t".join([sid] + [str(int(v)) for v in row] + [str(int(f))]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_votes_tsv(path):
    """Inverse of ``write_votes_tsv``: (sample_ids, votes, PseudoLabelSet)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    ids, votes, final = [], [], []
    for line in lines[1:]:
        if not line:
            continue
        f = line.split("\t")
        ids.append(f[0])
        votes.append([int(v) for v in f[1:-1]])
        final.append(int(f[-1]))
    final = np.array(final, dtype=np.int64)
    keep = np.flatnonzero(final != ABSTAIN)
    return ids, np.array(votes, dtype=np.int64), PseudoLabelSet(keep, final[keep])
