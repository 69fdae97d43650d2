"""Expression/response matrices: TSV I/O, labeling rules, splits, synthetic data."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError

log = logging.getLogger(__name__)

MISSING = "NA"


class Domain(str, enum.Enum):
    CELL_LINE = "cell_line"
    PATIENT = "patient"


@dataclass
class ExpressionMatrix:
    values: np.ndarray
    genes: list
    sample_ids: list
    domain: Domain

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.domain = Domain(self.domain)
        if self.values.shape != (len(self.sample_ids), len(self.genes)):
            raise DataError(f"values shape {self.values.shape} does not match "
                            f"{len(self.sample_ids)} samples x {len(self.genes)} genes")
        if not np.all(np.isfinite(self.values)):
            raise DataError("expression contains NaN or Inf values")
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise DataError("duplicate sample ids")

    @property
    def n_samples(self):
        return self.values.shape[0]

    @property
    def n_genes(self):
        return self.values.shape[1]


@dataclass
class ResponseMatrix:
    """Tri-state labels: 1 responder, 0 non-responder, -1 unknown."""

    labels: np.ndarray
    drugs: list
    sample_ids: list

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.drugs:
            raise DataError("response matrix has no drugs")
        if len(set(self.drugs)) != len(self.drugs):
            raise DataError("duplicate drug names")
        if self.labels.shape != (len(self.sample_ids), len(self.drugs)):
            raise DataError(f"labels shape {self.labels.shape} does not match "
                            f"{len(self.sample_ids)} samples x {len(self.drugs)} drugs")
        bad = ~np.isin(self.labels, (-1, 0, 1))
        if bad.any():
            raise DataError(f"labels outside {{-1, 0, 1}}: {sorted(set(self.labels[bad].tolist()))}")

    def column(self, drug) -> np.ndarray:
        return self.labels[:, self.drugs.index(drug)]

    def aligned_to(self, sample_ids) -> "ResponseMatrix":
        """Reorder rows to ``sample_ids``; samples absent here become -1."""
        index = {s: i for i, s in enumerate(self.sample_ids)}
        out = np.full((len(sample_ids), len(self.drugs)), -1, dtype=np.int64)
        for row, s in enumerate(sample_ids):
            i = index.get(s)
            if i is not None:
                out[row] = self.labels[i]
        return ResponseMatrix(out, list(self.drugs), list(sample_ids))


@dataclass
class ScoreMatrix:
    """Real-valued per-(sample, drug) scores; NaN marks a missing value."""

    values: np.ndarray
    drugs: list
    sample_ids: list


# -- TSV I/O -------------------------------------------------------------------

def _read_table(path):
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise DataError(f"{path}: empty file")
    header = lines[0].split("\t")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        rows.append((lineno, fields))
    if rows and len(header) == len(rows[0][1]):
        # tolerate a leading index-column label in the header
        header = header[1:]
    ids, cells = [], []
    for lineno, fields in rows:
        if len(fields) != len(header) + 1:
            raise ParseError(f"expected {len(header) + 1} fields, got {len(fields)}",
                             line=lineno, path=path)
        ids.append(fields[0])
        cells.append((lineno, fields[1:]))
    return header, ids, cells


def _parse_float(tok, lineno, path, allow_missing):
    if tok == MISSING:
        if allow_missing:
            return np.nan
        raise DataError(f"{path}:{lineno}: missing value not allowed in expression data")
    try:
        val = float(tok)
    except ValueError:
        raise ParseError(f"cannot parse {tok!r} as a number", line=lineno, path=path) from None
    if np.isnan(val):
        raise DataError(f"{path}:{lineno}: NaN value")
    return val


def load_expression(path, domain) -> ExpressionMatrix:
    genes, ids, cells = _read_table(path)
    if not ids:
        raise DataError(f"{path}: no samples")
    values = np.array([[_parse_float(t, ln, path, False) for t in toks] for ln, toks in cells],
                      dtype=np.float64).reshape(len(ids), len(genes))
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: non-finite expression value")
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate sample ids")
    return ExpressionMatrix(values, genes, ids, domain)


def load_scores(path) -> ScoreMatrix:
    drugs, ids, cells = _read_table(path)
    if not ids:
        raise DataError(f"{path}: no samples")
    values = np.array([[_parse_float(t, ln, path, True) for t in toks] for ln, toks in cells],
                      dtype=np.float64).reshape(len(ids), len(drugs))
    return ScoreMatrix(values, drugs, ids)


def load_response(path) -> ResponseMatrix:
    """Label file: entries 1, 0, -1 or NA (missing)."""
    sm = load_scores(path)
    vals = np.where(np.isnan(sm.values), -1.0, sm.values)
    if not np.all(np.isin(vals, (-1.0, 0.0, 1.0))):
        raise DataError(f"{path}: labels must be 1, 0, -1 or {MISSING}")
    return ResponseMatrix(vals.astype(np.int64), sm.drugs, sm.sample_ids)


def _fmt(v) -> str:
    return repr(float(v))


def save_expression(path, em: ExpressionMatrix) -> None:
    lines = ["\t".join(em.genes)]
    for sid, row in zip(em.sample_ids, em.values):
        lines.append("\t".join([sid] + [_fmt(v) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_response(path, rm: ResponseMatrix) -> None:
    lines = ["\t".join(rm.drugs)]
    for sid, row in zip(rm.sample_ids, rm.labels):
        lines.append("\t".join([sid] + [MISSING if v == -1 else str(int(v)) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_scores(path, sm: ScoreMatrix) -> None:
    lines = ["\t".join(sm.drugs)]
    for sid, row in zip(sm.sample_ids, sm.values):
        lines.append("\t".join([sid] + [MISSING if np.isnan(v) else _fmt(v) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- labeling rules ----------------------------------------------------------

def audrc_to_labels(scores: ScoreMatrix) -> ResponseMatrix:
    """Per drug, z-score the observed AUDRC values: z < 0 -> 1, z >= 0 -> 0, missing -> -1."""
    vals = np.asarray(scores.values, dtype=np.float64)
    labels = np.full(vals.shape, -1, dtype=np.int64)
    for j, drug in enumerate(scores.drugs):
        col = vals[:, j]
        obs = ~np.isnan(col)
        if obs.sum() < 2:
            raise DataError(f"drug {drug!r}: fewer than 2 observed AUDRC scores")
        mu = col[obs].mean()
        sd = col[obs].std()
        if sd == 0:
            raise DataError(f"drug {drug!r}: constant AUDRC column")
        z = (col[obs] - mu) / sd
        labels[obs, j] = (z < 0).astype(np.int64)
    return ResponseMatrix(labels, list(scores.drugs), list(scores.sample_ids))


def relapse_to_labels(relapse: ScoreMatrix) -> ResponseMatrix:
    """Per drug: above the median -> 1, at or below -> 0, missing -> -1."""
    vals = np.asarray(relapse.values, dtype=np.float64)
    labels = np.full(vals.shape, -1, dtype=np.int64)
    for j, drug in enumerate(relapse.drugs):
        col = vals[:, j]
        obs = ~np.isnan(col)
        if not obs.any():
            continue
        med = np.median(col[obs])
        labels[obs, j] = (col[obs] > med).astype(np.int64)
    return ResponseMatrix(labels, list(relapse.drugs), list(relapse.sample_ids))


# -- splits --------------------------------------------------------------------

@dataclass
class FoldSplit:
    k: int
    assignments: np.ndarray

    def train_test(self, fold):
        test = np.flatnonzero(self.assignments == fold)
        train = np.flatnonzero(self.assignments != fold)
        return train, test


def stratified_kfold(labels, k: int, seed: int) -> FoldSplit:
    """Shuffle each class, then deal it round-robin over the folds.

    The deal continues where the previous class stopped so fold sizes stay
    balanced too.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ConfigError("stratified_kfold needs both classes present")
    counts = [int((labels == c).sum()) for c in classes]
    if k < 1 or k > min(counts):
        raise ConfigError(f"k={k} exceeds the smallest class count {min(counts)}", key="run.folds")
    rng = np.random.default_rng(seed)
    assign = np.empty(len(labels), dtype=np.int64)
    offset = 0
    for c in classes:
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        assign[idx] = (offset + np.arange(len(idx))) % k
        offset = (offset + len(idx)) % k
    return FoldSplit(k, assign)


def chunk_partition(sample_count: int, O: int, seed: int) -> list:
    """Random split of ``range(sample_count)`` into ``O`` near-equal chunks."""
    if O < 1 or O > sample_count:
        raise ConfigError(f"cannot split {sample_count} samples into {O} chunks", key="weaksup.chunks")
    perm = np.random.default_rng(seed).permutation(sample_count)
    return [np.sort(c) for c in np.array_split(perm, O)]


# -- synthetic two-domain data -------------------------------------------------------

@dataclass
class SynthConfig:
    latent_dim: int = 8
    genes: int = 100
    n_cell: int = 300
    n_patient: int = 1500
    n_drugs: int = 4
    domain_shift_scale: float = 1.0
    noise_scale: float = 0.1
    missing_rate: float = 0.1
    seed: int = 0

    def validate(self):
        for name in ("latent_dim", "genes", "n_cell", "n_patient", "n_drugs"):
            if getattr(self, name) < 1:
                raise ConfigError("must be positive", key=f"synth.{name}")
        for name in ("domain_shift_scale", "noise_scale"):
            if getattr(self, name) < 0:
                raise ConfigError("must be >= 0", key=f"synth.{name}")
        if not 0 <= self.missing_rate < 1:
            raise ConfigError("must be in [0, 1)", key="synth.missing_rate")
        return self


@dataclass
class SyntheticDataset:
    cell: ExpressionMatrix
    patient: ExpressionMatrix
    cell_response: ResponseMatrix
    patient_truth: ResponseMatrix
    cell_latent: np.ndarray = field(repr=False)
    patient_latent: np.ndarray = field(repr=False)
    drug_weights: np.ndarray = field(repr=False)
    probe_auroc: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.cell, self.patient, self.cell_response, self.patient_truth))


def _median_labels(scores):
    return (scores > np.median(scores, axis=0, keepdims=True)).astype(np.int64)


def synth_generate(cfg: SynthConfig) -> SyntheticDataset:
    """Two domains sharing one latent drug-response mechanism.

    Expression is a linear image of Gaussian latent factors. Patients get an
    extra per-gene affine map ``x -> x * m + c`` (a location/scale batch
    effect) with ``log m ~ N(0, (s/2)^2)`` and ``c ~ N(0, s^2)`` before noise.
    Drug labels threshold per-drug linear latent scores at the within-domain
    median.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    L, G = cfg.latent_dim, cfg.genes
    loading = rng.normal(size=(L, G)) / np.sqrt(L)
    drug_w = rng.normal(size=(L, cfg.n_drugs))
    shift_scale = np.exp(0.5 * cfg.domain_shift_scale * rng.normal(size=(1, G)))
    shift_off = cfg.domain_shift_scale * rng.normal(size=(1, G))

    h_c = rng.normal(size=(cfg.n_cell, L))
    h_t = rng.normal(size=(cfg.n_patient, L))
    x_c = h_c @ loading + cfg.noise_scale * rng.normal(size=(cfg.n_cell, G))
    x_t = (h_t @ loading) * shift_scale + shift_off + cfg.noise_scale * rng.normal(size=(cfg.n_patient, G))

    y_c = _median_labels(h_c @ drug_w)
    y_t = _median_labels(h_t @ drug_w)
    if cfg.missing_rate > 0:
        y_c = np.where(rng.random(y_c.shape) < cfg.missing_rate, -1, y_c)

    genes = [f"g{i:04d}" for i in range(G)]
    drugs = [f"drug{j}" for j in range(cfg.n_drugs)]
    cid = [f"cell{i:05d}" for i in range(cfg.n_cell)]
    pid = [f"patient{i:05d}" for i in range(cfg.n_patient)]
    ds = SyntheticDataset(
        cell=ExpressionMatrix(x_c, genes, cid, Domain.CELL_LINE),
        patient=ExpressionMatrix(x_t, genes, pid, Domain.PATIENT),
        cell_response=ResponseMatrix(y_c, drugs, cid),
        patient_truth=ResponseMatrix(y_t, list(drugs), pid),
        cell_latent=h_c,
        patient_latent=h_t,
        drug_weights=drug_w,
    )
    ds.probe_auroc = latent_probe_auroc(h_t, y_t, drugs)
    low = {d: a for d, a in ds.probe_auroc.items() if a <= 0.95}
    if low:
        log.warning("latent probe AUROC below 0.95 for %s", low)
    return ds


def latent_probe_auroc(latent, labels, drugs) -> dict:
    """Least-squares linear probe on the latent factors, scored on its own labels."""
    from .downstream import auroc

    design = np.hstack([latent, np.ones((latent.shape[0], 1))])
    out = {}
    for j, drug in enumerate(drugs):
        y = labels[:, j]
        obs = y >= 0
        if len(np.unique(y[obs])) < 2:
            continue
        coef, *_ = np.linalg.lstsq(design[obs], 2.0 * y[obs] - 1.0, rcond=None)
        out[drug] = auroc(design[obs] @ coef, y[obs])
    return out


def holdout_patient_labels(truth: ResponseMatrix, fraction: float, seed: int) -> ResponseMatrix:
    """Keep ground truth for a random ``fraction`` of patients; the rest become -1."""
    rng = np.random.default_rng(seed)
    n = len(truth.sample_ids)
    keep = np.zeros(n, dtype=bool)
    keep[rng.permutation(n)[: int(round(fraction * n))]] = True
    labels = np.where(keep[:, None], truth.labels, -1)
    return ResponseMatrix(labels, list(truth.drugs), list(truth.sample_ids))
