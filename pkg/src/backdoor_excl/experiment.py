"""Experiment configuration, pipeline stages and run records.

A config is a YAML (or JSON) document with sections ``dataset``, ``trigger``,
``model``, ``poison``, ``train``, ``excl`` and ``defense`` plus top-level
``seed`` and ``output_dir``.  Every section is optional and falls back to the
desk defaults below.  ``BACKDOOR_EXCL_OUT`` overrides ``output_dir``.

Each stage writes its JSON report into the output directory and folds its
metrics into ``run.json`` (a :class:`RunRecord`).
"""

from __future__ import annotations

import copy
import datetime as _dt
import hashlib
import json
import os
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .datasets import LabeledDataset, load_dataset, make_synthetic_dataset
from .defenses.neural_cleanse import NCConfig, nc_scan, save_trigger_image
from .defenses.strip import StripConfig, strip_scan
from .errors import ConfigError, ContractViolation
from .exclusivity import ExclConfig, ObjectiveMode, measure_exclusivity
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .poisoning import PoisonConfig, build_poisoned_dataset
from .training import TrainConfig, evaluate_asr, evaluate_cda, train_backdoored_model
from .triggers import TriggerSpec, apply_trigger, trigger_from_dict

OUTPUT_ENV = "BACKDOOR_EXCL_OUT"
RUN_RECORD = "run.json"
NA = "n/a"
SUBSTREAMS = ("data", "trigger", "poison", "init", "train", "excl", "defense")
METRICS = ("cda", "asr", "excl", "nc_index", "strip_overlap")

DEFAULTS = {
    "seed": 0,
    "output_dir": "runs/default",
    "dataset": {"source": "synthetic", "format": "packed", "path": None, "test_path": None,
                "num_classes": 4, "samples_per_class": 500, "test_samples_per_class": 250,
                "input_shape": [3, 16, 16], "noise": 0.05, "nuisance": 0.2, "contrast": 0.6},
    "trigger": {"kind": "patch", "size": 6, "position": "bottom_right", "target_label": 0,
                "pattern": {"random": None, "style": "binary"}, "alpha": 0.2},
    "model": {"conv_blocks": [[32, 3, 2], [64, 3, 2], [128, 3, 2]], "batch_norm": True},
    "poison": {"poison_rate": 0.02, "dirty_cover_ratio": [50, 50], "mask_rate": 0.2,
               "cover_method": "mask", "noise_sigma": 0.1, "stratified": True},
    "train": {"scenario": "data_outsourcing", "epochs": 60, "batch_size": 128, "lr": 0.1,
              "sgd_momentum": 0.9, "weight_decay": 5e-4, "center_weight": 1.0, "momentum": 0.99},
    "excl": {"epochs": 300, "lr": 1e-2, "lambda_init": 0.1, "mode": "full", "n": 100,
             "init_scale": 1e-3, "batch_size": 100, "workers": 1},
    "defense": {
        "nc": {"opt_epochs": 100, "repeats": 3, "n_clean": 200, "lr": 0.1, "batch_size": 64,
               "asr_threshold": 0.97, "init_cost": 1e-3, "export_images": False},
        "strip": {"n_overlays": 100, "n_clean": 200, "n_trigger": 200, "n_pool": 200, "bins": 30},
    },
}

_DATASET_SOURCES = ("synthetic", "file")


def substream_seed(seed: int, name: str) -> int:
    """Independent 31-bit seed for a named consumer of the global seed."""
    key = zlib.crc32(name.encode())
    return int(np.random.SeedSequence([int(seed), key]).generate_state(1)[0] >> 1)


def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        p = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(p, "unknown field")
        if isinstance(base[k], dict) and base[k] and k != "pattern":
            if not isinstance(v, dict):
                raise ConfigError(p, "expected a mapping")
            out[k] = _merge(base[k], v, p)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _build(cls, section, path, **extra):
    names = {f.name for f in fields(cls)}
    kw = {k: v for k, v in section.items() if k in names}
    for k, v in kw.items():
        if isinstance(v, list):
            kw[k] = tuple(tuple(x) if isinstance(x, list) else x for x in v)
    kw.update(extra)
    try:
        return cls(**kw)
    except (ContractViolation, ValueError, TypeError) as exc:
        raise ConfigError(path, str(exc)) from exc


@dataclass
class ExperimentConfig:
    raw: dict                       # fully merged config document
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_dict(cls, d, base_dir=None) -> "ExperimentConfig":
        if d is None:
            d = {}
        if not isinstance(d, dict):
            raise ConfigError("<root>", "config must be a mapping")
        cfg = cls(_merge(DEFAULTS, d), Path(base_dir or Path.cwd()))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError("<config>", f"config file not found: {path}")
        try:
            doc = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError("<config>", f"unparsable config: {exc}") from exc
        return cls.from_dict(doc, base_dir=path.parent)

    # --- sections -------------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def with_seed(self, seed) -> "ExperimentConfig":
        d = copy.deepcopy(self.raw)
        d["seed"] = int(seed)
        return ExperimentConfig.from_dict(d, self.base_dir)

    def substream(self, name):
        return substream_seed(self.seed, name)

    @property
    def output_dir(self) -> Path:
        out = os.environ.get(OUTPUT_ENV) or self.raw["output_dir"]
        p = Path(out)
        return p if p.is_absolute() else self.base_dir / p

    def _path(self, p):
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def input_shape(self):
        return tuple(int(v) for v in self.raw["dataset"]["input_shape"])

    def poison_config(self) -> PoisonConfig:
        return _build(PoisonConfig, self.raw["poison"], "poison", seed=self.substream("poison"))

    def train_config(self) -> TrainConfig:
        return _build(TrainConfig, self.raw["train"], "train", seed=self.substream("train"))

    def excl_config(self, mode=None) -> ExclConfig:
        sec = dict(self.raw["excl"])
        if mode is not None:
            sec["mode"] = mode
        return _build(ExclConfig, sec, "excl", seed=self.substream("excl"))

    def nc_config(self) -> NCConfig:
        return _build(NCConfig, self.raw["defense"]["nc"], "defense.nc", seed=self.substream("defense"))

    def strip_config(self) -> StripConfig:
        return _build(StripConfig, self.raw["defense"]["strip"], "defense.strip",
                      seed=self.substream("defense"))

    def model_config(self, num_classes) -> ModelConfig:
        return _build(ModelConfig, self.raw["model"], "model", input_shape=self.input_shape,
                      num_classes=int(num_classes), seed=self.substream("init"))

    def trigger_spec(self) -> TriggerSpec:
        t = copy.deepcopy(self.raw["trigger"])
        t["input_shape"] = list(self.input_shape)
        pat = t.get("pattern") or {}
        if "random" in pat and pat["random"] is None:
            pat["random"] = self.substream("trigger")
        t["pattern"] = pat
        try:
            return trigger_from_dict(t, self.base_dir)
        except (ContractViolation, ValueError, KeyError, OSError) as exc:
            raise ConfigError("trigger", str(exc)) from exc

    # --- validation -----------------------------------------------------

    def validate(self):
        d = self.raw
        try:
            int(d["seed"])
        except (TypeError, ValueError):
            raise ConfigError("seed", "must be an integer") from None
        ds = d["dataset"]
        if ds["source"] not in _DATASET_SOURCES:
            raise ConfigError("dataset.source", f"must be one of {_DATASET_SOURCES}")
        if ds["source"] == "file":
            for key in ("path", "test_path"):
                if not ds[key]:
                    raise ConfigError(f"dataset.{key}", "required when source is 'file'")
                if not self._path(ds[key]).exists():
                    raise ConfigError(f"dataset.{key}", f"file not found: {ds[key]}")
            if ds["format"] not in ("packed", "image_dir"):
                raise ConfigError("dataset.format", "must be 'packed' or 'image_dir'")
        shape = ds["input_shape"]
        if not (isinstance(shape, (list, tuple)) and len(shape) == 3 and all(int(v) > 0 for v in shape)):
            raise ConfigError("dataset.input_shape", "must be [channels, height, width]")
        if int(ds["num_classes"]) < 2:
            raise ConfigError("dataset.num_classes", "must be >= 2")
        pat = d["trigger"].get("pattern") or {}
        if "image" in pat and not self._path(pat["image"]).exists():
            raise ConfigError("trigger.pattern.image", f"file not found: {pat['image']}")
        if not 0 <= int(d["trigger"]["target_label"]) < int(ds["num_classes"]):
            raise ConfigError("trigger.target_label", "outside [0, num_classes)")
        try:
            ObjectiveMode(d["excl"]["mode"])
        except ValueError:
            raise ConfigError("excl.mode", f"unknown mode {d['excl']['mode']!r}") from None
        # building each section surfaces range errors with their field path
        self.poison_config()
        self.train_config()
        self.excl_config()
        self.nc_config()
        self.strip_config()
        self.model_config(ds["num_classes"])
        if ds["source"] == "synthetic":
            self.trigger_spec()
        return self

    def canonical(self) -> dict:
        d = copy.deepcopy(self.raw)
        d.pop("output_dir", None)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class RunRecord:
    config_hash: str
    version: str
    seed: int
    started: str
    finished: str | None = None
    artifacts: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=lambda: {k: NA for k in METRICS})
    config: dict = field(default_factory=dict)

    def to_json(self):
        return {"record_version": 1, **asdict(self)}

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d.pop("record_version", None)
        rec = cls(**d)
        rec.metrics = {k: rec.metrics.get(k, NA) for k in METRICS} | rec.metrics
        return rec

    def summary(self):
        """Metric summary used for reproducibility checks."""
        return {"config_hash": self.config_hash, "seed": self.seed,
                "metrics": {k: self.metrics.get(k, NA) for k in METRICS}}


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, (tuple, set)):
        return list(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def load_record(out_dir) -> RunRecord | None:
    p = Path(out_dir) / RUN_RECORD
    if not p.is_file():
        return None
    return RunRecord.from_json(json.loads(p.read_text()))


def _update_record(cfg: ExperimentConfig, out_dir, metrics=None, artifacts=None):
    out_dir = Path(out_dir)
    rec = load_record(out_dir)
    if rec is None or rec.config_hash != cfg.config_hash():
        rec = RunRecord(cfg.config_hash(), __version__, cfg.seed, _now(), config=cfg.canonical())
    rec.metrics.update(metrics or {})
    rec.artifacts.update({k: str(v) for k, v in (artifacts or {}).items()})
    rec.finished = _now()
    _write_json(out_dir / RUN_RECORD, rec.to_json())
    return rec


# --- data ----------------------------------------------------------------

def load_data(cfg: ExperimentConfig):
    """``(train, test)`` datasets for the config."""
    ds = cfg.raw["dataset"]
    if ds["source"] == "synthetic":
        seed = cfg.substream("data")
        kw = dict(input_shape=cfg.input_shape, seed=seed, noise=float(ds["noise"]),
                  nuisance=float(ds["nuisance"]), contrast=float(ds["contrast"]))
        k = int(ds["num_classes"])
        train = make_synthetic_dataset(k, int(ds["samples_per_class"]), split="train", **kw)
        test = make_synthetic_dataset(k, int(ds["test_samples_per_class"]), split="test", **kw)
        return train, test
    train = load_dataset(cfg._path(ds["path"]), ds["format"], "train")
    test = load_dataset(cfg._path(ds["test_path"]), ds["format"], "test")
    for name, d in (("dataset.path", train), ("dataset.test_path", test)):
        if d.input_shape != cfg.input_shape:
            raise ConfigError(name, f"samples have shape {d.input_shape}, config says {cfg.input_shape}")
    return train, test


def _check_compat(model, cfg: ExperimentConfig, num_classes):
    mc = model.config
    if tuple(mc.input_shape) != cfg.input_shape or mc.num_classes != num_classes:
        raise ContractViolation(
            f"checkpoint expects input {tuple(mc.input_shape)} with {mc.num_classes} classes; "
            f"config provides {cfg.input_shape} with {num_classes}")


def defense_splits(cfg: ExperimentConfig, test: LabeledDataset, spec: TriggerSpec):
    """Disjoint seeded slices of the test split for NC and STRIP."""
    rng = np.random.default_rng([cfg.substream("defense"), 3])
    order = rng.permutation(len(test))
    nc_n = int(cfg.raw["defense"]["nc"]["n_clean"])
    st = cfg.raw["defense"]["strip"]
    nc_idx = order[:nc_n]
    rest = order[nc_n:] if len(order) > nc_n else order
    clean_idx = rest[:int(st["n_clean"])]
    rest2 = rest[int(st["n_clean"]):]
    non_target = rest2[test.labels.numpy()[rest2] != spec.target_label]
    trig_idx = non_target[:int(st["n_trigger"])]
    pool_idx = np.setdiff1d(rest2, trig_idx, assume_unique=True)[:int(st["n_pool"])]
    if pool_idx.size == 0:
        pool_idx = clean_idx
    return {"nc": np.sort(nc_idx), "strip_clean": clean_idx, "strip_trigger": trig_idx,
            "strip_pool": pool_idx}


# --- stages --------------------------------------------------------------

def stage_train(cfg: ExperimentConfig, out_dir=None):
    out_dir = Path(out_dir or cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, test = load_data(cfg)
    spec = cfg.trigger_spec()
    poisoned = build_poisoned_dataset(train, spec, cfg.poison_config())
    model, report = train_backdoored_model(poisoned, cfg.model_config(train.num_classes),
                                           cfg.train_config(), test, spec)
    ck = out_dir / "checkpoint.npz"
    save_checkpoint(model, ck, {"config_hash": cfg.config_hash(), "cda": report.cda, "asr": report.asr})
    report.checkpoint_path = str(ck)
    report.write(out_dir / "train_report.json")
    poisoned.write_manifest(out_dir / "poison_manifest.json")
    rec = _update_record(cfg, out_dir, {"cda": report.cda, "asr": NA if report.asr is None else report.asr},
                         {"checkpoint": ck, "train_report": out_dir / "train_report.json",
                          "poison_manifest": out_dir / "poison_manifest.json"})
    return rec, model, report


def _model_for(cfg, checkpoint, out_dir):
    ck = Path(checkpoint) if checkpoint else Path(out_dir) / "checkpoint.npz"
    if not ck.is_file():
        raise ContractViolation(f"checkpoint not found: {ck}")
    model, _ = load_checkpoint(ck)
    return model


def stage_eval(cfg: ExperimentConfig, checkpoint=None, out_dir=None):
    out_dir = Path(out_dir or cfg.output_dir)
    _, test = load_data(cfg)
    model = _model_for(cfg, checkpoint, out_dir)
    _check_compat(model, cfg, test.num_classes)
    spec = cfg.trigger_spec()
    cda = evaluate_cda(model, test)
    try:
        asr = evaluate_asr(model, test, spec)
    except ContractViolation:
        asr = NA
    doc = {"version": 1, "cda": cda, "asr": asr}
    _write_json(out_dir / "eval_report.json", doc)
    rec = _update_record(cfg, out_dir, {"cda": cda, "asr": asr}, {"eval_report": out_dir / "eval_report.json"})
    return rec, doc


def stage_excl(cfg: ExperimentConfig, checkpoint=None, out_dir=None, mode=None):
    out_dir = Path(out_dir or cfg.output_dir)
    _, test = load_data(cfg)
    model = _model_for(cfg, checkpoint, out_dir)
    _check_compat(model, cfg, test.num_classes)
    spec = cfg.trigger_spec()
    ecfg = cfg.excl_config(mode)
    rep = measure_exclusivity(model, test, spec, ecfg, workers=int(cfg.raw["excl"]["workers"]))
    name = "excl_report.json" if mode is None else f"excl_report_{ecfg.mode}.json"
    _write_json(out_dir / name, rep.to_json())
    excl = NA if rep.n_succeeded == 0 else rep.aggregate_excl
    metrics = {"excl": excl} if mode is None or ecfg.mode == "full" else {f"excl_{ecfg.mode}": excl}
    rec = _update_record(cfg, out_dir, metrics, {name[:-5]: out_dir / name})
    return rec, rep


def stage_nc(cfg: ExperimentConfig, checkpoint=None, out_dir=None):
    out_dir = Path(out_dir or cfg.output_dir)
    _, test = load_data(cfg)
    model = _model_for(cfg, checkpoint, out_dir)
    _check_compat(model, cfg, test.num_classes)
    spec = cfg.trigger_spec()
    idx = defense_splits(cfg, test, spec)["nc"]
    ncfg = cfg.nc_config()
    verdict, triggers = nc_scan(model, test.subset(idx), cfg=ncfg, return_triggers=True)
    doc = verdict.to_json()
    doc["reversed"] = [[t.to_json() for t in rep] for rep in triggers]
    _write_json(out_dir / "nc_report.json", doc)
    arts = {"nc_report": out_dir / "nc_report.json"}
    if cfg.raw["defense"]["nc"].get("export_images"):
        img_dir = out_dir / "nc_triggers"
        img_dir.mkdir(exist_ok=True)
        for t in triggers[0]:
            save_trigger_image(t, img_dir / f"class_{t.class_index}.png")
        arts["nc_triggers"] = img_dir
    rec = _update_record(cfg, out_dir, {"nc_index": verdict.anomaly_index}, arts)
    return rec, verdict


def stage_strip(cfg: ExperimentConfig, checkpoint=None, out_dir=None):
    out_dir = Path(out_dir or cfg.output_dir)
    _, test = load_data(cfg)
    model = _model_for(cfg, checkpoint, out_dir)
    _check_compat(model, cfg, test.num_classes)
    spec = cfg.trigger_spec()
    sp = defense_splits(cfg, test, spec)
    clean = test.inputs[torch.from_numpy(sp["strip_clean"])]
    trig = apply_trigger(test.inputs[torch.from_numpy(sp["strip_trigger"])], spec)
    pool = test.inputs[torch.from_numpy(sp["strip_pool"])]
    verdict = strip_scan(model, clean, trig, pool, cfg=cfg.strip_config())
    _write_json(out_dir / "strip_report.json", verdict.to_json())
    rec = _update_record(cfg, out_dir, {"strip_overlap": verdict.overlap},
                         {"strip_report": out_dir / "strip_report.json"})
    return rec, verdict


STAGES = {"train": stage_train, "eval": stage_eval, "excl": stage_excl, "nc": stage_nc, "strip": stage_strip}


def run_pipeline(cfg: ExperimentConfig, stages=("train", "excl", "nc", "strip"), out_dir=None) -> RunRecord:
    """Run the named stages in order against one output directory."""
    out_dir = Path(out_dir or cfg.output_dir)
    rec = None
    for name in stages:
        if name not in STAGES:
            raise ContractViolation(f"unknown stage {name!r}")
        result = STAGES[name](cfg, out_dir=out_dir)
        rec = result[0]
    return rec
