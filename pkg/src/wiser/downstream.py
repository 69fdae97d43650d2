"""Stage 4: drug-response classifier and evaluation metrics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DataError, MetricError
from .nn import BinaryClassifier


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied positive/negative pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs both classes")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision with step interpolation; equal scores form one threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricError("AUPRC needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y)
    # last index of every group of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_at = tp[ends]
    precision = tp_at / (ends + 1.0)
    recall_gain = np.diff(np.r_[0, tp_at]) / n_pos
    return float(np.sum(recall_gain * precision))


def train_classifier(z_cell, cell_labels, z_patient_subset=None, pseudo_labels=None,
                     hidden=(64, 32), epochs=300, lr=1e-3, seed=0, drug="drug") -> BinaryClassifier:
    """Fit on labeled cells (label -1 rows dropped) plus the pseudo-labeled patient subset."""
    z_cell = np.asarray(z_cell, dtype=np.float64)
    cell_labels = np.asarray(cell_labels)
    keep = cell_labels >= 0
    x = z_cell[keep]
    y = cell_labels[keep]
    if z_patient_subset is not None and len(z_patient_subset):
        x = np.vstack([x, np.asarray(z_patient_subset, dtype=np.float64)])
        y = np.concatenate([y, np.asarray(pseudo_labels)])
    if len(np.unique(y)) < 2:
        raise DataError(f"drug {drug!r}: training set has a single class")
    clf = BinaryClassifier(z_cell.shape[1], hidden=hidden, seed=seed, name=f"classifier[{drug}]")
    clf.fit(x, y, epochs=epochs, lr=lr)
    return clf


def predict(clf: BinaryClassifier, z) -> np.ndarray:
    return clf.predict_proba(np.asarray(z, dtype=np.float64))


# -- reporting -----------------------------------------------------------------

@dataclass
class FoldMetrics:
    fold: int
    auroc: float
    auprc: float
    val_auroc: float = float("nan")  # held-out cells of this fold; NaN when k = 1
    n_train_cells: int = 0
    n_pseudo: int = 0
    n_subset: int = 0


def _stats(values):
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std())


@dataclass
class DrugReport:
    drug: str
    folds: list
    ablations: dict
    reference: "DrugReport | None" = None  # same folds trained without weak supervision

    def summary(self) -> dict:
        out = {}
        for name in ("auroc", "auprc", "val_auroc"):
            out[f"{name}_mean"], out[f"{name}_std"] = _stats([getattr(f, name) for f in self.folds])
        return out

    def to_dict(self) -> dict:
        d = {"fold_metrics": [{k: _json_float(v) for k, v in asdict(f).items()} for f in self.folds]}
        d.update({k: _json_float(v) for k, v in self.summary().items()})
        d["ablations"] = dict(self.ablations)
        if self.reference is not None:
            ref = self.reference.to_dict()
            ref.pop("ablations")
            d["no_ws_reference"] = ref
        return d


@dataclass
class EvalReport:
    drugs: list = field(default_factory=list)  # DrugReport, in configured drug order

    def __getitem__(self, drug) -> DrugReport:
        for r in self.drugs:
            if r.drug == drug:
                return r
        raise KeyError(drug)

    def to_dict(self) -> dict:
        return {r.drug: r.to_dict() for r in self.drugs}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False, allow_nan=False) + "\n"


def _json_float(v):
    if isinstance(v, (float, np.floating)):
        return float(v) if np.isfinite(v) else None
    return v


def fold_metrics(fold, clf, z_eval, y_eval, z_val=None, y_val=None, **counts) -> FoldMetrics:
    """Score one fold's classifier on the labeled patients and, if given, its held-out cells."""
    p = predict(clf, z_eval)
    val = float("nan")
    if z_val is not None and len(z_val) and len(np.unique(y_val)) == 2:
        val = auroc(predict(clf, z_val), y_val)
    return FoldMetrics(fold, auroc(p, y_eval), auprc(p, y_eval), val, **counts)


def evaluate_pipeline(cfg, ablations=None) -> EvalReport:
    """Run every stage the report needs (reusing finished artifacts) and return it."""
    from .pipeline import Pipeline

    if ablations is not None:
        cfg = cfg.with_overrides(ablate=tuple(ablations))
    return Pipeline(cfg).report()
