"""Stage orchestration with content-addressed artifacts.

Each stage writes into ``<output_dir>/<stage>-<key>/`` where ``key`` hashes
the stage's own settings together with its parent stage's key, so changing an
upstream setting never reuses stale downstream artifacts and unchanged stages
are reused as-is. A stage directory only appears once it is complete.

Order: data -> repr -> ws (weak labels) -> subset -> clf -> eval. Weak labels,
subsets and classifiers are computed per drug and per cell-line fold, using
only the fold's training cells. Patients with a label for a drug form that
drug's evaluation cohort and never receive pseudo-labels for it.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import shutil
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig
from .cutselect import cut_statistics, knn_graph, read_cut_tsv, select_subset, write_cut_tsv
from .data import (Domain, ExpressionMatrix, audrc_to_labels, holdout_patient_labels, load_expression,
                   load_response, load_scores, relapse_to_labels, save_expression, save_response,
                   stratified_kfold, synth_generate)
from .downstream import DrugReport, EvalReport, fold_metrics, train_classifier
from .errors import ChunkError, DataError, PipelineError
from .nn import BinaryClassifier
from .reprlearn import TrainData, WiserModel, encode_dataset, train_representation
from .weaksup import (aggregate, label_function_probs, read_votes_tsv, train_label_functions,
                      write_votes_tsv)

log = logging.getLogger(__name__)

STAGES = ("gen-data", "train-repr", "weak-label", "select-subset", "train-clf", "evaluate")
_DIR_PREFIX = {"gen-data": "data", "train-repr": "repr", "weak-label": "ws",
               "select-subset": "subset", "train-clf": "clf", "evaluate": "eval"}
_PARENT = {"train-repr": "gen-data", "weak-label": "train-repr", "select-subset": "weak-label",
           "train-clf": "select-subset", "evaluate": "train-clf"}


def derive_seed(global_seed: int, *path) -> int:
    """Independent 32-bit sub-seed for a named purpose, e.g. ("clf", drug, fold)."""
    key = tuple(zlib.crc32(str(p).encode("utf-8")) for p in path)
    return int(np.random.SeedSequence(global_seed, spawn_key=key).generate_state(1)[0])


def _digest(obj) -> str:
    text = json.dumps(obj, sort_keys=True, default=_jsonable)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _jsonable(o):
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot hash {type(o).__name__}")


def _file_sha(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class Dataset:
    cell: ExpressionMatrix
    patient: ExpressionMatrix
    cell_labels: object  # ResponseMatrix aligned to cell rows (all drugs; codebook size)
    patient_labels: object  # ResponseMatrix aligned to patient rows (evaluation cohort)


@dataclass
class Embedded:
    z_cell: np.ndarray
    z_patient: np.ndarray


class Pipeline:
    """All stages for one RunConfig; artifacts live under ``cfg.run.output_dir``."""

    def __init__(self, cfg: RunConfig, force=False):
        self.cfg = cfg
        self.root = Path(cfg.run.output_dir)
        self.force = force
        self.seed = cfg.run.seed
        self._keys = {}
        self._data = None
        self._emb = None

    # -- keys & directories -------------------------------------------------

    @property
    def ablate(self):
        return set(self.cfg.run.ablate)

    @property
    def no_ws(self):
        return "no-ws" in self.ablate

    def train_config(self):
        return dataclasses.replace(self.cfg.train, use_cns="no-cns" not in self.ablate,
                                   use_embed="no-embed" not in self.ablate,
                                   seed=derive_seed(self.seed, "repr"))

    def key(self, stage) -> str:
        if stage in self._keys:
            return self._keys[stage]
        c = self.cfg
        if stage == "gen-data":
            if c.data.source == "synthetic":
                own = {"synth": dataclasses.replace(c.synth, seed=derive_seed(self.seed, "synth")),
                       "eval_fraction": c.data.eval_fraction, "holdout": derive_seed(self.seed, "holdout")}
            else:
                own = {"files": {n: _file_sha(getattr(c.data, n)) for n in
                                 ("cell_expression", "patient_expression", "cell_response", "patient_response")},
                       "kinds": (c.data.cell_response_kind, c.data.patient_response_kind)}
        elif stage == "train-repr":
            own = {"train": self.train_config()}
        elif stage == "weak-label":
            own = {"weaksup": c.weaksup, "folds": c.run.folds, "drugs": self.drugs_for_key(),
                   "seed": self.seed, "max_rechunk": c.run.max_rechunk}
        elif stage == "select-subset":
            own = {"subset": c.subset}
        elif stage == "train-clf":
            own = {"epochs": c.run.clf_epochs, "lr": c.run.clf_lr, "folds": c.run.folds,
                   "drugs": self.drugs_for_key(), "seed": self.seed, "no_ws": self.no_ws,
                   "compare_no_ws": c.run.compare_no_ws}
        elif stage == "evaluate":
            own = {}
        else:
            raise PipelineError(f"unknown stage {stage!r}")
        parent = _PARENT.get(stage)
        if stage == "train-clf" and self.no_ws:
            parent = "train-repr"  # stages 2-3 are skipped entirely
        payload = {"stage": stage, "own": own, "parent": self.key(parent) if parent else None}
        self._keys[stage] = _digest(payload)[:12]
        return self._keys[stage]

    def drugs_for_key(self):
        return list(self.cfg.run.drugs)

    def stage_dir(self, stage) -> Path:
        return self.root / f"{_DIR_PREFIX[stage]}-{self.key(stage)}"

    def is_done(self, stage) -> bool:
        return (self.stage_dir(stage) / "manifest.json").is_file()

    def _require(self, stage, needed):
        if not self.is_done(needed):
            raise PipelineError(f"missing {needed} artifacts (expected {self.stage_dir(needed)}); "
                                f"run '{needed}' first", stage=stage)

    def _begin(self, stage) -> Path:
        tmp = self.root / f".{_DIR_PREFIX[stage]}-{self.key(stage)}.tmp{os.getpid()}"
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        return tmp

    def _commit(self, stage, tmp: Path, manifest: dict) -> Path:
        manifest = dict(manifest, stage=stage, key=self.key(stage))
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        final = self.stage_dir(stage)
        if final.exists():
            shutil.rmtree(final)
        tmp.rename(final)
        return final

    # -- data ---------------------------------------------------------------

    def gen_data(self) -> Path:
        stage = "gen-data"
        if self.is_done(stage) and not self.force:
            return self.stage_dir(stage)
        c = self.cfg
        tmp = self._begin(stage)
        manifest = {"source": c.data.source}
        if c.data.source == "synthetic":
            synth = dataclasses.replace(c.synth, seed=derive_seed(self.seed, "synth"))
            ds = synth_generate(synth)
            cell, patient, cell_resp, truth = ds
            patient_resp = holdout_patient_labels(truth, c.data.eval_fraction, derive_seed(self.seed, "holdout"))
            save_response(tmp / "patient_truth.tsv", truth)
            manifest["latent_probe_auroc"] = ds.probe_auroc
        else:
            cell = load_expression(c.data.cell_expression, Domain.CELL_LINE)
            patient = load_expression(c.data.patient_expression, Domain.PATIENT)
            if c.data.cell_response_kind == "audrc":
                cell_resp = audrc_to_labels(load_scores(c.data.cell_response))
            else:
                cell_resp = load_response(c.data.cell_response)
            if c.data.patient_response_kind == "relapse":
                patient_resp = relapse_to_labels(load_scores(c.data.patient_response))
            else:
                patient_resp = load_response(c.data.patient_response)
            patient = _match_genes(cell, patient)
        save_expression(tmp / "cell_expression.tsv", cell)
        save_expression(tmp / "patient_expression.tsv", patient)
        save_response(tmp / "cell_response.tsv", cell_resp.aligned_to(cell.sample_ids))
        save_response(tmp / "patient_response.tsv", patient_resp.aligned_to(patient.sample_ids))
        manifest.update(n_cell=cell.n_samples, n_patient=patient.n_samples, n_genes=cell.n_genes,
                        drugs=list(cell_resp.drugs))
        return self._commit(stage, tmp, manifest)

    def dataset(self) -> Dataset:
        if self._data is None:
            if not self.is_done("gen-data"):
                self.gen_data()
            d = self.stage_dir("gen-data")
            cell = load_expression(d / "cell_expression.tsv", Domain.CELL_LINE)
            patient = load_expression(d / "patient_expression.tsv", Domain.PATIENT)
            cell_resp = load_response(d / "cell_response.tsv").aligned_to(cell.sample_ids)
            patient_resp = load_response(d / "patient_response.tsv").aligned_to(patient.sample_ids)
            self._data = Dataset(cell, patient, cell_resp, patient_resp)
        return self._data

    def drugs(self) -> list:
        data = self.dataset()
        wanted = list(self.cfg.run.drugs) or list(data.cell_labels.drugs)
        for d in wanted:
            if d not in data.cell_labels.drugs:
                raise DataError(f"drug {d!r} not in the cell-line response file")
            if d not in data.patient_labels.drugs:
                raise DataError(f"drug {d!r} not in the patient response file")
        return wanted

    # -- stage 1 --------------------------------------------------------------

    def train_repr(self) -> Path:
        stage = "train-repr"
        if self.is_done(stage) and not self.force:
            return self.stage_dir(stage)
        data = self.dataset()
        tcfg = self.train_config().validate()
        model = WiserModel(data.cell.n_genes, len(data.cell_labels.drugs), tcfg, seed=tcfg.seed)
        rng = np.random.default_rng(derive_seed(self.seed, "repr", "batches"))
        state = train_representation(
            model, TrainData(data.cell.values, data.cell_labels.labels, data.patient.values), tcfg, rng)
        tmp = self._begin(stage)
        checkpoint.save(tmp / "model.wisr", model.state_dict())
        lines = ["phase\tepoch\tloss\tgenerator_loss"]
        lines += [f"pretrain\t{i}\t{v!r}\tNA" for i, v in enumerate(state.pretrain_trace)]
        lines += [f"adversarial\t{i}\t{c!r}\t{g!r}" for i, (c, g) in enumerate(state.adv_trace)]
        (tmp / "trace.tsv").write_text("\n".join(lines) + "\n")
        return self._commit(stage, tmp, {
            "batch_steps": state.batch_steps, "critic_updates": state.critic_updates,
            "generator_updates": state.generator_updates, "codebook_drugs": list(data.cell_labels.drugs)})

    def model(self) -> WiserModel:
        return WiserModel.from_state_dict(checkpoint.load(self.stage_dir("train-repr") / "model.wisr"))

    def embedded(self) -> Embedded:
        if self._emb is None:
            model = self.model()
            data = self.dataset()
            self._emb = Embedded(encode_dataset(model, data.cell.values).Z,
                                 encode_dataset(model, data.patient.values).Z)
        return self._emb

    # -- folds ------------------------------------------------------------------

    def folds(self, drug):
        """[(fold, train_rows, val_rows)] over cells labeled for ``drug``."""
        y = self.dataset().cell_labels.column(drug)
        labeled = np.flatnonzero(y >= 0)
        k = self.cfg.run.folds
        if k == 1:
            return [(0, labeled, labeled[:0])]
        split = stratified_kfold(y[labeled], k, derive_seed(self.seed, "folds", drug))
        return [(f, labeled[tr], labeled[te]) for f, (tr, te) in
                ((f, split.train_test(f)) for f in range(k))]

    def pool(self, drug) -> np.ndarray:
        """Patients without an evaluation label for ``drug``: the weak-supervision pool."""
        return np.flatnonzero(self.dataset().patient_labels.column(drug) < 0)

    def cohort(self, drug) -> np.ndarray:
        return np.flatnonzero(self.dataset().patient_labels.column(drug) >= 0)

    # -- stage 2 --------------------------------------------------------------

    def weak_label(self) -> Path:
        stage = "weak-label"
        if self.no_ws:
            log.info("weak-label skipped (no-ws ablation)")
            return None
        if self.is_done(stage) and not self.force:
            return self.stage_dir(stage)
        self._require(stage, "train-repr")
        emb = self.embedded()
        data = self.dataset()
        wcfg = self.cfg.weaksup.validate()
        tmp = self._begin(stage)
        manifest = {"folds": {}}
        for drug in self.drugs():
            pool = self.pool(drug)
            if len(pool) == 0:
                raise DataError(f"drug {drug!r}: every patient is in the evaluation cohort, "
                                f"so none is left to pseudo-label (use --ablate no-ws)")
            y = data.cell_labels.column(drug)
            (tmp / drug).mkdir()
            for fold, train, _ in self.folds(drug):
                labels = np.full(len(y), -1)
                labels[train] = y[train]
                lfs, attempt = self._label_functions(emb.z_cell, labels, wcfg, drug, fold)
                probs = label_function_probs(lfs, emb.z_patient[pool])
                votes, pseudo = aggregate(probs, wcfg)
                ids = [data.patient.sample_ids[i] for i in pool]
                write_votes_tsv(tmp / drug / f"fold{fold}.votes.tsv", ids, votes, pseudo)
                manifest["folds"][f"{drug}/{fold}"] = {"rechunks": attempt, "pool": len(pool),
                                                       "pseudo_labeled": len(pseudo)}
        return self._commit(stage, tmp, manifest)

    def _label_functions(self, z_cell, labels, wcfg, drug, fold):
        last = None
        for attempt in range(self.cfg.run.max_rechunk):
            seed = derive_seed(self.seed, "ws", drug, fold, attempt)
            try:
                return train_label_functions(z_cell, labels, wcfg.chunks, wcfg, seed=seed), attempt
            except ChunkError as exc:
                last = exc
                log.info("drug %s fold %d: %s; re-chunking", drug, fold, exc)
        raise DataError(f"drug {drug!r} fold {fold}: no single-class-free chunking in "
                        f"{self.cfg.run.max_rechunk} attempts ({last})")

    # -- stage 3 --------------------------------------------------------------

    def select_subset(self) -> Path:
        stage = "select-subset"
        if self.no_ws:
            log.info("select-subset skipped (no-ws ablation)")
            return None
        if self.is_done(stage) and not self.force:
            return self.stage_dir(stage)
        self._require(stage, "weak-label")
        emb = self.embedded()
        scfg = self.cfg.subset.validate()
        ws_dir = self.stage_dir("weak-label")
        tmp = self._begin(stage)
        manifest = {"folds": {}}
        index = {s: i for i, s in enumerate(self.dataset().patient.sample_ids)}
        for drug in self.drugs():
            (tmp / drug).mkdir()
            for fold, _, _ in self.folds(drug):
                ids, _, pseudo = read_votes_tsv(ws_dir / drug / f"fold{fold}.votes.tsv")
                v_ids = [ids[i] for i in pseudo.indices]
                rows = np.array([index[s] for s in v_ids], dtype=np.int64)
                out = tmp / drug / f"fold{fold}.cut.tsv"
                if len(rows) < 2:
                    # a graph needs two nodes; keep what little there is
                    _write_trivial_cut(out, v_ids)
                    kept = len(rows)
                else:
                    scores = cut_statistics(knn_graph(emb.z_patient[rows], scfg.k), pseudo.labels)
                    sel = select_subset(scores, scfg.budget)
                    write_cut_tsv(out, v_ids, scores, sel)
                    kept = len(sel)
                manifest["folds"][f"{drug}/{fold}"] = {"non_abstained": len(rows), "selected": kept}
        return self._commit(stage, tmp, manifest)

    def subset(self, drug, fold):
        """(patient rows, pseudo-labels) of the selected subset."""
        index = {s: i for i, s in enumerate(self.dataset().patient.sample_ids)}
        ids, _, pseudo = read_votes_tsv(self.stage_dir("weak-label") / drug / f"fold{fold}.votes.tsv")
        label_of = {ids[i]: int(l) for i, l in zip(pseudo.indices, pseudo.labels)}
        cut_ids, _, selected = read_cut_tsv(self.stage_dir("select-subset") / drug / f"fold{fold}.cut.tsv")
        chosen = [s for s, f in zip(cut_ids, selected) if f]
        return (np.array([index[s] for s in chosen], dtype=np.int64),
                np.array([label_of[s] for s in chosen], dtype=np.int64))

    # -- stage 4 --------------------------------------------------------------

    def train_clf(self) -> Path:
        stage = "train-clf"
        if self.is_done(stage) and not self.force:
            return self.stage_dir(stage)
        self._require(stage, "train-repr" if self.no_ws else "select-subset")
        emb = self.embedded()
        data = self.dataset()
        c = self.cfg.run
        tmp = self._begin(stage)
        manifest = {"folds": {}}
        for drug in self.drugs():
            y = data.cell_labels.column(drug)
            (tmp / drug).mkdir()
            for fold, train, _ in self.folds(drug):
                seed = derive_seed(self.seed, "clf", drug, fold)
                fit = dict(epochs=c.clf_epochs, lr=c.clf_lr, seed=seed, drug=drug)
                info = {"train_cells": len(train)}
                if self.no_ws or c.compare_no_ws:
                    clf = train_classifier(emb.z_cell[train], y[train], **fit)
                    name = "fold{}.wisr" if self.no_ws else "fold{}.nows.wisr"
                    checkpoint.save(tmp / drug / name.format(fold), clf.state_dict())
                if not self.no_ws:
                    rows, pl = self.subset(drug, fold)
                    clf = train_classifier(emb.z_cell[train], y[train], emb.z_patient[rows], pl, **fit)
                    checkpoint.save(tmp / drug / f"fold{fold}.wisr", clf.state_dict())
                    info["subset"] = len(rows)
                manifest["folds"][f"{drug}/{fold}"] = info
        return self._commit(stage, tmp, manifest)

    def _load_clf(self, drug, fold, no_ws=False) -> BinaryClassifier:
        name = f"fold{fold}.nows.wisr" if no_ws else f"fold{fold}.wisr"
        return BinaryClassifier.from_state_dict(checkpoint.load(self.stage_dir("train-clf") / drug / name),
                                                name=f"classifier[{drug}]")

    def evaluate(self) -> Path:
        stage = "evaluate"
        if self.is_done(stage) and not self.force:
            return self.stage_dir(stage)
        self._require(stage, "train-clf")
        report = self._build_report()
        tmp = self._begin(stage)
        (tmp / "report.json").write_text(report.to_json())
        return self._commit(stage, tmp, {"drugs": [r.drug for r in report.drugs]})

    def _build_report(self) -> EvalReport:
        emb = self.embedded()
        data = self.dataset()
        ablations = {"no_ws": self.no_ws, "no_cns": "no-cns" in self.ablate,
                     "no_embed": "no-embed" in self.ablate, "budget": self.cfg.subset.budget}
        clf_manifest = json.loads((self.stage_dir("train-clf") / "manifest.json").read_text())
        ws_manifest = {}
        if not self.no_ws:
            ws_manifest = json.loads((self.stage_dir("weak-label") / "manifest.json").read_text())["folds"]
        report = EvalReport()
        for drug in self.drugs():
            cohort = self.cohort(drug)
            y_eval = data.patient_labels.column(drug)[cohort]
            if len(np.unique(y_eval)) < 2:
                raise DataError(f"drug {drug!r}: evaluation cohort needs both classes "
                                f"({len(cohort)} labeled patients)")
            y = data.cell_labels.column(drug)
            main, ref = [], []
            for fold, train, val in self.folds(drug):
                info = clf_manifest["folds"][f"{drug}/{fold}"]
                counts = dict(n_train_cells=len(train),
                              n_pseudo=ws_manifest.get(f"{drug}/{fold}", {}).get("pseudo_labeled", 0),
                              n_subset=info.get("subset", 0))
                args = (emb.z_patient[cohort], y_eval, emb.z_cell[val], y[val])
                main.append(fold_metrics(fold, self._load_clf(drug, fold), *args, **counts))
                if not self.no_ws and self.cfg.run.compare_no_ws:
                    ref.append(fold_metrics(fold, self._load_clf(drug, fold, no_ws=True), *args,
                                            n_train_cells=len(train)))
            reference = DrugReport(drug, ref, ablations) if ref else None
            report.drugs.append(DrugReport(drug, main, ablations, reference))
        return report

    def report(self) -> EvalReport:
        """Run whatever is missing, then return the evaluation report."""
        self.run("run-all")
        return load_report(self.stage_dir("evaluate") / "report.json")

    # -- dispatch ---------------------------------------------------------------

    def run(self, stage) -> list:
        """Execute one stage (or ``run-all``); returns the artifact directories produced."""
        steps = {"gen-data": self.gen_data, "train-repr": self.train_repr, "weak-label": self.weak_label,
                 "select-subset": self.select_subset, "train-clf": self.train_clf, "evaluate": self.evaluate}
        if stage == "run-all":
            out = [steps[s]() for s in STAGES]
        elif stage in steps:
            out = [steps[stage]()]
        else:
            raise PipelineError(f"unknown stage {stage!r}; choose from {', '.join(STAGES + ('run-all',))}")
        return [p for p in out if p is not None]


def _match_genes(cell: ExpressionMatrix, patient: ExpressionMatrix) -> ExpressionMatrix:
    if list(patient.genes) == list(cell.genes):
        return patient
    if set(patient.genes) != set(cell.genes):
        missing = sorted(set(cell.genes) ^ set(patient.genes))[:5]
        raise DataError(f"cell-line and patient gene sets differ (e.g. {missing})")
    order = [patient.genes.index(g) for g in cell.genes]
    return ExpressionMatrix(patient.values[:, order], list(cell.genes), list(patient.sample_ids), patient.domain)


def _write_trivial_cut(path, ids):
    lines = ["sample_id\tJ\tmu\tsigma\tz\tselected"] + [f"{s}\t0.0\t0.0\t0.0\t0.0\t1" for s in ids]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_report(path) -> EvalReport:
    """Rebuild an EvalReport from its JSON document."""
    from .downstream import FoldMetrics

    def folds(items):
        return [FoldMetrics(**{k: (float("nan") if v is None else v) for k, v in f.items()}) for f in items]

    doc = json.loads(Path(path).read_text())
    report = EvalReport()
    for drug, d in doc.items():
        ref = None
        if "no_ws_reference" in d:
            ref = DrugReport(drug, folds(d["no_ws_reference"]["fold_metrics"]), d["ablations"])
        report.drugs.append(DrugReport(drug, folds(d["fold_metrics"]), d["ablations"], ref))
    return report


# -- grid search ---------------------------------------------------------------------

GRID_COLUMNS = ("cell", "pretrain_epochs", "adv_epochs", "inv_temp", "t_plus", "t_minus", "budget",
                "drug", "val_auroc", "auroc", "auprc", "status")


def grid_search(cfg: RunConfig):
    """Exhaustive sweep over ``cfg.grid``; best cell per drug by held-out cell AUROC.

    Patient labels are never used for selection. A failing cell is recorded
    with its error and the sweep moves on. Returns (rows, best, table_dir).
    """
    grid = cfg.filled_grid()
    if cfg.run.folds < 2:
        raise PipelineError("grid search selects on held-out cell folds; set run.folds >= 2",
                            stage="grid-search")
    rows = []
    for i, over in enumerate(grid.cells()):
        base = dict(cell=i, **over)
        try:
            report = Pipeline(cfg.with_overrides(**over)).report()
            for r in report.drugs:
                s = r.summary()
                rows.append(dict(base, drug=r.drug, val_auroc=s["val_auroc_mean"], auroc=s["auroc_mean"],
                                 auprc=s["auprc_mean"], status="ok"))
        except Exception as exc:  # noqa: BLE001 - every failure is recorded, the sweep continues
            log.warning("grid cell %d failed: %s", i, exc)
            rows.append(dict(base, drug="*", val_auroc=float("nan"), auroc=float("nan"),
                             auprc=float("nan"), status=f"error: {type(exc).__name__}: {exc}"))
    best = best_per_drug(rows)
    out = Path(cfg.run.output_dir) / f"grid-{_digest({'grid': grid, 'base': cfg})[:12]}"
    out.mkdir(parents=True, exist_ok=True)
    write_grid_table(out / "table.tsv", rows)
    write_grid_table(out / "best.tsv", list(best.values()))
    return rows, best, out


def best_per_drug(rows) -> dict:
    """Highest finite val_auroc per drug; the earliest cell wins ties."""
    best = {}
    for r in rows:
        if r["status"] != "ok" or not np.isfinite(r["val_auroc"]):
            continue
        cur = best.get(r["drug"])
        if cur is None or r["val_auroc"] > cur["val_auroc"]:
            best[r["drug"]] = r
    return best


def write_grid_table(path, rows) -> None:
    def fmt(v):
        if isinstance(v, float):
            return repr(v) if np.isfinite(v) else "NA"
        return str(v).replace("\t", " ").replace("\n", " ")

    lines = ["\t".join(GRID_COLUMNS)] + ["\t".join(fmt(r[c]) for c in GRID_COLUMNS) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
