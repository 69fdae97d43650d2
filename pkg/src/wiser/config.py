"""Run configuration: a flat ``section.key = value`` text format.

Blank lines and ``#`` comments are ignored. Every key belongs to one of the
sections below; unknown or repeated keys are rejected with their line number.
Sub-seeds are not configurable: everything derives from ``run.seed``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .cutselect import SubsetConfig
from .data import SynthConfig
from .errors import ConfigError
from .reprlearn import TrainConfig
from .weaksup import WeakSupConfig

ABLATIONS = ("no-ws", "no-cns", "no-embed")


@dataclass
class DataConfig:
    source: str = "synthetic"  # or "files"
    cell_expression: str = ""
    patient_expression: str = ""
    cell_response: str = ""
    cell_response_kind: str = "labels"  # labels | audrc
    patient_response: str = ""
    patient_response_kind: str = "labels"  # labels | relapse
    eval_fraction: float = 0.2  # synthetic only: patients whose labels are kept for evaluation

    def validate(self):
        if self.source not in ("synthetic", "files"):
            raise ConfigError(f"unknown data source {self.source!r}", key="data.source")
        if self.cell_response_kind not in ("labels", "audrc"):
            raise ConfigError(f"unknown kind {self.cell_response_kind!r}", key="data.cell_response_kind")
        if self.patient_response_kind not in ("labels", "relapse"):
            raise ConfigError(f"unknown kind {self.patient_response_kind!r}", key="data.patient_response_kind")
        if not 0 < self.eval_fraction < 1:
            raise ConfigError("must lie in (0, 1)", key="data.eval_fraction")
        if self.source == "files":
            for name in ("cell_expression", "patient_expression", "cell_response", "patient_response"):
                path = getattr(self, name)
                if not path:
                    raise ConfigError("required when data.source = files", key=f"data.{name}")
                if not Path(path).is_file():
                    raise ConfigError(f"no such file: {path}", key=f"data.{name}")
        return self


@dataclass
class RunSection:
    output_dir: str = "wiser-out"
    seed: int = 0
    drugs: tuple = ()  # empty means every drug in the response file
    folds: int = 5
    ablate: tuple = ()
    compare_no_ws: bool = True
    clf_epochs: int = 300
    clf_lr: float = 1e-3
    max_rechunk: int = 10

    def validate(self):
        if self.folds < 1:
            raise ConfigError("must be >= 1", key="run.folds")
        bad = [a for a in self.ablate if a not in ABLATIONS]
        if bad:
            raise ConfigError(f"unknown ablation {bad[0]!r}; choose from {', '.join(ABLATIONS)}",
                              key="run.ablate")
        if self.clf_epochs < 1 or self.clf_lr <= 0:
            raise ConfigError("classifier epochs and lr must be positive", key="run.clf_epochs")
        if self.max_rechunk < 1:
            raise ConfigError("must be >= 1", key="run.max_rechunk")
        return self


@dataclass
class GridSpec:
    """Candidate lists for the sweep; absent keys fall back to the single configured value."""

    pretrain_epochs: tuple = ()
    adv_epochs: tuple = ()
    inv_temp: tuple = ()
    thresholds: tuple = ()  # (t_plus, t_minus) pairs
    budget: tuple = ()

    def validate(self, require_filled=True):
        for f in dataclasses.fields(self):
            if require_filled and not getattr(self, f.name):
                raise ConfigError("candidate list must be non-empty", key=f"grid.{f.name}")
        for tp, tm in self.thresholds:
            if not 0 < tm < tp < 1:
                raise ConfigError(f"need 0 < t_minus < t_plus < 1, got {tp}/{tm}", key="grid.thresholds")
        for b in self.budget:
            if not 0 < b <= 100:
                raise ConfigError(f"budget {b} outside (0, 100]", key="grid.budget")
        return self

    def cells(self):
        """Cartesian product in fixed order, as dicts of overrides."""
        out = []
        for pi in self.pretrain_epochs:
            for pd in self.adv_epochs:
                for dt in self.inv_temp:
                    for tp, tm in self.thresholds:
                        for b in self.budget:
                            out.append(dict(pretrain_epochs=pi, adv_epochs=pd, inv_temp=dt,
                                            t_plus=tp, t_minus=tm, budget=b))
        return out


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    weaksup: WeakSupConfig = field(default_factory=WeakSupConfig)
    subset: SubsetConfig = field(default_factory=SubsetConfig)
    grid: GridSpec = field(default_factory=GridSpec)

    def validate(self):
        for name in SECTIONS[:-1]:
            getattr(self, name).validate()
        self.grid.validate(require_filled=False)  # unset lists fall back to the single values
        return self

    def filled_grid(self) -> GridSpec:
        g = self.grid
        return GridSpec(
            pretrain_epochs=g.pretrain_epochs or (self.train.pretrain_epochs,),
            adv_epochs=g.adv_epochs or (self.train.adv_epochs,),
            inv_temp=g.inv_temp or (self.train.inv_temp,),
            thresholds=g.thresholds or ((self.weaksup.t_plus, self.weaksup.t_minus),),
            budget=g.budget or (self.subset.budget,),
        ).validate()

    def with_overrides(self, **kw) -> "RunConfig":
        """Copy with grid-style overrides applied to the owning sections."""
        owners = {"pretrain_epochs": "train", "adv_epochs": "train", "inv_temp": "train",
                  "t_plus": "weaksup", "t_minus": "weaksup", "budget": "subset",
                  "seed": "run", "drugs": "run", "ablate": "run", "output_dir": "run"}
        new = {name: dataclasses.replace(getattr(self, name)) for name in SECTIONS}
        for key, value in kw.items():
            if key not in owners:
                raise ConfigError(f"unknown override {key!r}", key=key)
            setattr(new[owners[key]], key, value)
        return RunConfig(**new).validate()


SECTIONS = ("run", "data", "synth", "train", "weaksup", "subset", "grid")

# seeds derive from run.seed; loss switches are driven by run.ablate
_HIDDEN = {("synth", "seed"), ("train", "seed"), ("weaksup", "seed"),
           ("train", "use_cns"), ("train", "use_embed")}
_PATH_KEYS = {("data", "cell_expression"), ("data", "patient_expression"),
              ("data", "cell_response"), ("data", "patient_response"), ("run", "output_dir")}
_ELEM_TYPES = {("run", "drugs"): str, ("run", "ablate"): str, ("grid", "pretrain_epochs"): int,
               ("grid", "adv_epochs"): int, ("grid", "inv_temp"): float, ("grid", "budget"): float}


def _keys(section_obj, section):
    return [f.name for f in dataclasses.fields(section_obj) if (section, f.name) not in _HIDDEN]


def _parse_scalar(kind, text):
    if kind is bool:
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return kind(text)


def _parse_value(section, key, default, text):
    if section == "grid" and key == "thresholds":
        pairs = []
        for item in _split_list(text):
            tp, sep, tm = item.partition("/")
            if not sep:
                raise ValueError(f"threshold pair must look like 0.7/0.3, got {item!r}")
            pairs.append((float(tp), float(tm)))
        return tuple(pairs)
    if isinstance(default, tuple):
        elem = _ELEM_TYPES.get((section, key)) or (type(default[0]) if default else str)
        return tuple(_parse_scalar(elem, t) for t in _split_list(text))
    return _parse_scalar(type(default), text)


def _split_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _format_value(section, key, value):
    if section == "grid" and key == "thresholds":
        return ", ".join(f"{tp!r}/{tm!r}" for tp, tm in value)
    if isinstance(value, tuple):
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str, base_dir=".") -> RunConfig:
    """Parse and validate; relative paths resolve against ``base_dir``."""
    base = Path(base_dir)
    cfg = RunConfig()
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ConfigError("expected 'section.key = value'", key=key or None, line=lineno)
        section, dot, name = key.partition(".")
        if not dot or section not in SECTIONS or name not in _keys(getattr(cfg, section), section):
            raise ConfigError("unknown key", key=key, line=lineno)
        if key in seen:
            raise ConfigError(f"repeated key (first set on line {seen[key]})", key=key, line=lineno)
        seen[key] = lineno
        obj = getattr(cfg, section)
        try:
            parsed = _parse_value(section, name, getattr(obj, name), value)
        except ValueError as exc:
            raise ConfigError(f"bad value {value!r}: {exc}", key=key, line=lineno) from None
        setattr(obj, name, parsed)
    # defaults included, so a config always places its outputs beside itself
    for section, name in _PATH_KEYS:
        obj = getattr(cfg, section)
        value = getattr(obj, name)
        if value and not Path(value).is_absolute():
            setattr(obj, name, str((base / value).resolve()))
    try:
        cfg.validate()
    except ConfigError as exc:
        if exc.line is None and exc.key in seen:
            raise ConfigError(exc.message, key=exc.key, line=seen[exc.key]) from None
        raise
    return cfg


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text, base_dir=path.parent)


def serialize(cfg: RunConfig) -> str:
    """Every key, in section order; parses back to an equal config."""
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        lines.append(f"# {section}")
        for name in _keys(obj, section):
            value = getattr(obj, name)
            if section == "grid" and not value:
                continue
            lines.append(f"{section}.{name} = {_format_value(section, name, value)}")
        lines.append("")
    return "\n".join(lines)
