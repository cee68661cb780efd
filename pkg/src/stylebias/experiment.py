"""Experiment orchestration: configs, the results ledger, matrices and reports.

A config is a nested mapping.  ``expand_config`` merges it over its preset
so that every field is explicit; the content hash of the expanded config
(minus the output directory) names its run directory::

    <output_dir>/<config hash>/config.yaml
    <output_dir>/<config hash>/<target>/<run>/record.jsonl
    <output_dir>/<config hash>/<target>/<run>/checkpoint.bin
    <output_dir>/<config hash>/<target>/<run>/timing.json
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import serial
from .datagen import DatasetGroup, ingest_directory, leave_one_out, load_image, synthesize_group
from .errors import ConfigurationError, FormattingError, LedgerConflictError, StyleBiasError
from .stylizer import (
    External,
    InterSource,
    IntraSource,
    LimitedSources,
    StylizationConfig,
    StylizerWeights,
    train_stylizer,
)
from .trainer import Protocol, RunRecord, TrainConfig, save_checkpoint, summarize_runs, train

logger = logging.getLogger(__name__)

DATA_ROOT_ENV = "STYLEBIAS_DATA_ROOT"

_PAPER_TRAIN = {
    "lr": 0.001,
    "momentum": 0.9,
    "weight_decay": 0.0005,
    "batch_size": 128,
    "epochs": 80,
    "lr_drop_epoch": 60,
    "lr_drop_factor": 0.1,
    "hflip": True,
    "crop": True,
    "crop_area": [0.8, 1.0],
    "color_jitter": True,
    "jitter": [0.4, 0.4, 0.4, 0.1],
    "val_fraction": 0.1,
    "domain_balanced": False,
}

_BASE = {
    "label": None,
    "dataset": {
        "kind": "synthetic",
        "root": None,
        "seed": 0,
        "n_domains": 4,
        "n_classes": 7,
        "per_class": 50,
        "side": 64,
    },
    "backbone": "desk-cnn",
    "train": dict(_PAPER_TRAIN),
    "stylization": {
        "p": 0.1,
        "alpha": 1.0,
        "regime": "inter",
        "limited_sources": [],
        "external_root": None,
        "stylize_first": True,
    },
    "stylizer": {
        "weights": None,
        "epochs": 6,
        "encoder_epochs": 6,
        "batch_size": 8,
        "seed": 0,
    },
    "protocol": "source_val",
    "n_runs": 3,
    "base_seed": 0,
    "targets": None,
    "output_dir": "runs",
}


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


PRESETS = {
    "pacs": _merge(_BASE, {"dataset": {"kind": "directory", "side": 224}, "backbone": "resnet18"}),
    "vlcs": _merge(
        _BASE,
        {"dataset": {"kind": "directory", "side": 224}, "backbone": "alexnet", "train": {"lr": 0.0005, "weight_decay": 0.00005}},
    ),
    "officehome": _merge(_BASE, {"dataset": {"kind": "directory", "side": 224}, "backbone": "resnet18"}),
    "desk": _merge(
        _BASE,
        {"train": {"lr": 0.01, "batch_size": 32, "epochs": 30, "lr_drop_epoch": 22}},
    ),
}


def expand_config(raw: dict | None) -> dict:
    """Merge a user config over its preset (default ``desk``); validates the result."""
    raw = dict(raw or {})
    preset = raw.pop("preset", "desk")
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    unknown = set(raw) - set(_BASE)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    cfg = _merge(PRESETS[preset], raw)
    cfg["preset"] = preset
    for section in ("dataset", "train", "stylization", "stylizer"):
        extra = set(cfg[section]) - set(_BASE[section])
        if extra:
            raise ConfigurationError(f"unknown keys in {section}: {sorted(extra)}")
    if cfg["stylization"]["regime"] not in ("inter", "intra", "external", "limited"):
        raise ConfigurationError(f"unknown regime {cfg['stylization']['regime']!r}")
    Protocol(cfg["protocol"])
    if cfg["n_runs"] < 1:
        raise ConfigurationError("n_runs must be >= 1")
    # constructing these validates ranges
    train_config(cfg, seed=0)
    return cfg


def load_config(path) -> dict:
    with open(path) as fh:
        return expand_config(yaml.safe_load(fh) or {})


def config_hash(cfg: dict) -> str:
    """Content hash of an expanded config; key order and output_dir do not matter."""
    body = {k: v for k, v in cfg.items() if k != "output_dir"}
    canon = json.dumps(body, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def with_changes(cfg: dict, **sections) -> dict:
    """Copy of an expanded config with nested overrides, re-expanded."""
    merged = _merge(cfg, sections)
    merged.pop("preset", None)
    return expand_config({"preset": cfg["preset"], **merged})


# ---------------------------------------------------------------------------
# config -> runtime objects
# ---------------------------------------------------------------------------


def load_dataset(cfg: dict) -> DatasetGroup:
    ds = cfg["dataset"]
    if ds["kind"] == "synthetic":
        return synthesize_group(ds["seed"], ds["n_domains"], ds["n_classes"], ds["per_class"], ds["side"])
    if ds["kind"] == "directory":
        root = ds["root"] or os.environ.get(DATA_ROOT_ENV)
        if not root:
            raise ConfigurationError(f"dataset.root is unset and {DATA_ROOT_ENV} is not defined")
        return ingest_directory(root, side=ds["side"])
    raise ConfigurationError(f"unknown dataset kind {ds['kind']!r}")


def _style_images(root, side) -> np.ndarray:
    files = sorted(p for p in Path(root).rglob("*") if p.is_file() and not p.name.startswith("."))
    if not files:
        raise ConfigurationError(f"no style images under {root}")
    return np.stack([load_image(f, side) for f in files])


def stylization_config(cfg: dict, seed: int) -> StylizationConfig:
    s = cfg["stylization"]
    regime = s["regime"]
    if regime == "inter":
        reg = InterSource()
    elif regime == "intra":
        reg = IntraSource()
    elif regime == "limited":
        reg = LimitedSources(s["limited_sources"])
    else:
        if not s["external_root"]:
            raise ConfigurationError("regime 'external' needs stylization.external_root")
        reg = External(_style_images(s["external_root"], cfg["dataset"]["side"]), name=Path(s["external_root"]).name)
    return StylizationConfig(p=s["p"], alpha=s["alpha"], regime=reg, seed=seed, stylize_first=s["stylize_first"])


def train_config(cfg: dict, seed: int) -> TrainConfig:
    t = cfg["train"]
    style = StylizationConfig(p=cfg["stylization"]["p"], alpha=cfg["stylization"]["alpha"])
    return TrainConfig(
        lr=t["lr"],
        momentum=t["momentum"],
        weight_decay=t["weight_decay"],
        batch_size=t["batch_size"],
        epochs=t["epochs"],
        lr_drop_epoch=t["lr_drop_epoch"],
        lr_drop_factor=t["lr_drop_factor"],
        hflip=t["hflip"],
        crop=t["crop"],
        crop_area=tuple(t["crop_area"]),
        color_jitter=t["color_jitter"],
        jitter=tuple(t["jitter"]),
        stylization=style,
        selection=Protocol(cfg["protocol"]),
        val_fraction=t["val_fraction"],
        domain_balanced=t["domain_balanced"],
        arch=cfg["backbone"],
        seed=seed,
    )


def method_label(cfg: dict) -> str:
    if cfg.get("label"):
        return cfg["label"]
    s = cfg["stylization"]
    if s["p"] == 0:
        name = "Baseline"
    else:
        name = {
            "inter": "Inter-Source",
            "intra": "Intra-Source",
            "external": "Painting",
            "limited": "Limited(" + ",".join(sorted(s["limited_sources"])) + ")",
        }[s["regime"]]
        name = f"Ours ({name})"
    return name + ("*" if cfg["protocol"] == Protocol.MAX_TARGET.value else "")


def stylizer_for(cfg: dict, group: DatasetGroup, target: str, cache_dir=None) -> StylizerWeights | None:
    """Load configured weights, or train one on the target's sources (cached)."""
    if cfg["stylization"]["p"] == 0:
        return None
    st = cfg["stylizer"]
    if st["weights"]:
        return StylizerWeights.load(st["weights"])
    key = hashlib.sha256(
        json.dumps({"dataset": cfg["dataset"], "stylizer": st, "target": target}, sort_keys=True).encode()
    ).hexdigest()[:16]
    cache = Path(cache_dir or Path(cfg["output_dir"]) / "stylizers") / f"{key}.bin"
    if cache.exists():
        return StylizerWeights.load(cache)
    sources, _ = leave_one_out(group, target)
    logger.info("training stylizer for target %s", target)
    weights = train_stylizer(
        sources,
        sources,
        epochs=st["epochs"],
        seed=st["seed"],
        encoder_epochs=st["encoder_epochs"],
        batch_size=st["batch_size"],
    )
    weights.save(cache)
    return weights


# ---------------------------------------------------------------------------
# ledger
# ---------------------------------------------------------------------------


class ResultsLedger:
    """Append-only store of run records keyed by (config hash, target, run)."""

    def __init__(self, root):
        self.root = Path(root)

    def run_dir(self, chash, target, run) -> Path:
        return self.root / chash / target / str(run)

    def exists(self, chash, target, run) -> bool:
        return (self.run_dir(chash, target, run) / "record.jsonl").exists()

    def write(self, chash, target, run, record: RunRecord, model=None, force=False):
        d = self.run_dir(chash, target, run)
        if self.exists(chash, target, run) and not force:
            raise LedgerConflictError([(chash, target, run)])
        if model is not None:
            save_checkpoint(model, d / "checkpoint.bin", record.selected_epoch, chash)
        serial.atomic_write(d / "timing.json", json.dumps({"wall_time": record.wall_time}))
        # the record goes last: its presence marks the entry complete
        serial.atomic_write(d / "record.jsonl", record.to_jsonl())

    def read(self, chash, target, run) -> RunRecord:
        return RunRecord.from_jsonl((self.run_dir(chash, target, run) / "record.jsonl").read_text())

    def write_config(self, cfg: dict, domains=None):
        base = self.root / config_hash(cfg)
        if not (base / "config.yaml").exists():
            serial.atomic_write(base / "config.yaml", yaml.safe_dump(cfg, sort_keys=True))
        if domains is not None and not (base / "domains.json").exists():
            serial.atomic_write(base / "domains.json", json.dumps(list(domains)))

    def read_config(self, chash) -> dict:
        return yaml.safe_load((self.root / chash / "config.yaml").read_text())

    def config_hashes(self) -> list[str]:
        if not self.root.exists():
            return []
        return sorted(p.parent.name for p in self.root.glob("*/config.yaml"))

    def entries(self, chash) -> dict:
        """``{target: [RunRecord, ...]}`` in dataset domain order, runs by index."""
        out = {}
        base = self.root / chash
        if not base.exists():
            return out
        order = json.loads((base / "domains.json").read_text()) if (base / "domains.json").exists() else []
        tdirs = [p for p in base.iterdir() if p.is_dir()]
        rank = {name: i for i, name in enumerate(order)}
        for tdir in sorted(tdirs, key=lambda p: (rank.get(p.name, len(rank)), p.name)):
            runs = sorted((int(r.name) for r in tdir.iterdir() if r.is_dir() and (r / "record.jsonl").exists()))
            if runs:
                out[tdir.name] = [self.read(chash, tdir.name, r) for r in runs]
        return out


# ---------------------------------------------------------------------------
# matrix, sweep, report
# ---------------------------------------------------------------------------


@dataclass
class MatrixResult:
    config_hash: str
    label: str
    dataset: str
    domains: list
    records: dict = field(default_factory=dict)  # target -> [RunRecord]
    failures: list = field(default_factory=list)

    def accuracies(self, selected=True) -> dict:
        attr = "selected_target_acc" if selected else "max_target_acc"
        return {t: [getattr(r, attr) for r in self.records[t]] for t in self.domains if t in self.records}


def run_matrix(cfg: dict, *, force=False, resume=False, group: DatasetGroup | None = None) -> MatrixResult:
    """Leave-one-domain-out for every target, ``n_runs`` seeds each.

    Existing ledger entries are rejected unless ``force`` (overwrite) or
    ``resume`` (reuse).  A failing cell is logged and reported; finished
    cells stay in the ledger.
    """
    cfg = expand_config({k: v for k, v in cfg.items()}) if "preset" not in cfg else cfg
    chash = config_hash(cfg)
    ledger = ResultsLedger(cfg["output_dir"])
    group = group or load_dataset(cfg)
    targets = cfg["targets"] or group.domain_names
    for t in targets:
        if t not in group.domain_names:
            raise ConfigurationError(f"target {t!r} is not a domain of {group.name}: {group.domain_names}")
    keys = [(t, r) for t in targets for r in range(cfg["n_runs"])]
    existing = [(chash, t, r) for t, r in keys if ledger.exists(chash, t, r)]
    if existing and not (force or resume):
        raise LedgerConflictError(existing)
    ledger.write_config(cfg, group.domain_names)
    result = MatrixResult(chash, method_label(cfg), group.name, list(targets))
    for t in targets:
        sources, tgt = leave_one_out(group, t)
        stylizer = None
        for r in range(cfg["n_runs"]):
            if resume and ledger.exists(chash, t, r):
                result.records.setdefault(t, []).append(ledger.read(chash, t, r))
                continue
            seed = cfg["base_seed"] + r
            try:
                if stylizer is None and cfg["stylization"]["p"] > 0:
                    stylizer = stylizer_for(cfg, group, t)
                tc = dataclasses.replace(train_config(cfg, seed), stylization=stylization_config(cfg, seed))
                model, record = train(sources, tgt, tc, stylizer, config_hash=chash)
            except (StyleBiasError, ValueError, RuntimeError) as exc:
                logger.error("cell %s/%d failed: %s", t, r, exc)
                result.failures.append({"target": t, "run": r, "error": str(exc)})
                continue
            ledger.write(chash, t, r, record, model, force=force)
            result.records.setdefault(t, []).append(record)
            logger.info("%s run %d: selected %.4f max %.4f", t, r, record.selected_target_acc, record.max_target_acc)
    return result


def sweep_style_probability(cfg: dict, probs: Sequence[float], **kwargs) -> list[tuple[float, MatrixResult]]:
    """One matrix per stylization probability, ordered by probability."""
    out = []
    for p in sorted(probs):
        if not 0 <= p <= 1:
            raise ConfigurationError(f"probability {p} outside [0, 1]")
        sub = with_changes(cfg, stylization={"p": float(p)}, label=f"p={p:.2f}")
        out.append((p, run_matrix(sub, **kwargs)))
    return out


@dataclass
class ReportRow:
    method: str
    dataset: str
    runs: dict  # domain -> list of accuracies in [0, 1]


def rows_from_matrix(result: MatrixResult, selected=True) -> ReportRow:
    label = result.label if selected else result.label.rstrip("*") + "*"
    return ReportRow(label, result.dataset, result.accuracies(selected))


def render_report(rows: Sequence[ReportRow]) -> tuple[str, list[dict]]:
    """Fixed-layout ``mean ± std`` table in percent plus machine-readable rows.

    With several rows, the one with the highest average is marked ``(best)``.
    """
    if not rows:
        raise FormattingError("nothing to report")
    datasets = {r.dataset for r in rows}
    if len(datasets) > 1:
        raise FormattingError(f"rows mix dataset groups: {sorted(datasets)}")
    domains = list(rows[0].runs)
    for r in rows:
        if list(r.runs) != domains:
            raise FormattingError(f"row {r.method!r} covers {list(r.runs)}, expected {domains}")
    width = max(14, max(len(r.method) for r in rows) + 2)
    cols = domains + ["Avg."]
    summaries = [summarize_runs({d: [100 * a for a in r.runs[d]] for d in domains}) for r in rows]
    best = max(range(len(rows)), key=lambda i: summaries[i].average[0]) if len(rows) > 1 else None
    lines = ["Method".ljust(width) + "".join(c.capitalize().rjust(18) for c in cols)]
    structured = []
    for i, (r, s) in enumerate(zip(rows, summaries)):
        cells = [s.per_domain[d] for d in domains] + [s.average]
        line = r.method.ljust(width) + "".join(f"{m:.2f} ± {sd:.2f}".rjust(18) for m, sd in cells)
        lines.append(line + ("  (best)" if i == best else ""))
        structured.append({
            "method": r.method,
            "dataset": r.dataset,
            "columns": cols,
            "mean": [round(m, 4) for m, _ in cells],
            "std": [round(sd, 4) for _, sd in cells],
            "n_runs": len(next(iter(r.runs.values()))),
            "best": i == best,
        })
    return "\n".join(lines) + "\n", structured


def report_from_ledger(root, hashes=None, include_oracle=False) -> tuple[str, list[dict]]:
    ledger = ResultsLedger(root)
    hashes = hashes or ledger.config_hashes()
    rows = []
    for h in hashes:
        cfg = ledger.read_config(h)
        entries = ledger.entries(h)
        if not entries:
            continue
        group_name = "shapes" if cfg["dataset"]["kind"] == "synthetic" else Path(cfg["dataset"]["root"] or "data").name
        result = MatrixResult(h, method_label(cfg), group_name, list(entries), records=entries)
        rows.append(rows_from_matrix(result))
        if include_oracle:
            rows.append(rows_from_matrix(result, selected=False))
    return render_report(rows)
