"""Experiment configuration, orchestration, run ledgers and plot data.

A run is described by an INI file with one section per concern
(``experiment``, ``federation``, ``data``, ``model``, ``loss``, ``pseudo``).
Every run writes an append-only JSON-lines ledger, per-round (or per-epoch)
checkpoints and a resumable state file into its output directory.
"""
from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, fields
from fractions import Fraction
from pathlib import Path

import torch

from .data import attach_pseudo_depth, load_kitti_layout, partition_centralized, partition_iid, partition_niid
from .errors import ConfigError, EvaluationError, InvalidArgument
from .federation import (
    EpochRecord,
    FederationState,
    GlobalModel,
    RoundConfig,
    RoundRecord,
    TrainingEnv,
    as_fraction,
    run_centralized,
    run_federation,
)
from .losses import LossWeights
from .metrics import CostReport, comm_lower_bound, comm_upper_bound, steps_federated
from .models import ArchConfig, NoisyAnalyticDepth, load_checkpoint, parameter_bytes, save_checkpoint
from .synthetic import SceneSpec, generate_synthetic_scene
from .training import LossSettings, derive_seed, evaluate_model

log = logging.getLogger(__name__)

CONFIG_ENV = "FEDDEPTH_CONFIG"
SCENARIOS = ("ct", "ft-iid", "ft-niid")
# Ledger fields that depend on the wall clock; everything else is reproducible.
TIMESTAMP_FIELDS = frozenset({"started_at", "finished_at", "wall_time"})
LEDGER = "ledger.jsonl"
STATE = "state.pt"


def _ints(text):
    return tuple(int(v) for v in str(text).replace(",", " ").split())


@dataclass(frozen=True)
class ExperimentConfig:
    # [experiment]
    scenario: str = "ft-iid"
    seed: int = 0
    out: str = "runs/default"
    checkpoint_every: int = 1
    ct_epochs: int = 0  # 0 -> match the federated step budget
    # [federation]
    participants: int = 4
    fraction: Fraction = Fraction(1)
    local_epochs: int = 1
    rounds: int = 5
    batches_per_epoch: int = 50
    batch_size: int = 4
    learning_rate: float = 1e-4
    persist_optimizer_state: bool = True
    # [data]
    source: str = "synthetic"
    kitti_root: str = ""
    train_split: str = ""
    val_split: str = ""
    test_split: str = ""
    gt_root: str = ""
    width: int = 64
    height: int = 32
    samples_per_drive: tuple = (24, 18, 12, 10, 6, 4)
    val_samples_per_drive: tuple = (8, 8)
    test_samples_per_drive: tuple = (8, 8)
    texture_frequency: float = 0.25
    tinted: bool = True
    # [model]
    widths: tuple = (16, 32, 64)
    pose_widths: tuple = (16, 32, 64)
    coord_channels: bool = True
    # [loss]
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.1
    delta: float = 0.1
    epsilon: float = 0.1
    rank_pairs: int = 512
    automask: bool = True
    # [pseudo]
    noise_bound: float = 0.1
    smoothing: float = 3.0

    def __post_init__(self):
        try:
            object.__setattr__(self, "fraction", as_fraction(self.fraction))
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"fraction: {exc}") from None
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.source not in ("synthetic", "kitti"):
            raise ConfigError(f"source must be 'synthetic' or 'kitti', got {self.source!r}")
        if self.source == "kitti" and not (self.kitti_root and self.train_split):
            raise ConfigError("kitti source needs kitti_root and train_split")
        if self.checkpoint_every < 1 or self.ct_epochs < 0:
            raise ConfigError("checkpoint_every must be >= 1 and ct_epochs >= 0")
        if self.width < 8 or self.height < 8:
            raise ConfigError("images must be at least 8x8")
        try:
            self.round_config()
            self.loss_settings()
        except InvalidArgument as exc:
            raise ConfigError(str(exc)) from None

    # -- derived component configs ------------------------------------------------

    @property
    def federated(self) -> bool:
        return self.scenario != "ct"

    def round_config(self) -> RoundConfig:
        policy = "niid" if self.scenario == "ft-niid" else "iid"
        participants = self.participants if self.federated else 1
        fraction = self.fraction if self.federated else 1
        return RoundConfig(participants, fraction, self.local_epochs, self.rounds, self.batches_per_epoch,
                           self.batch_size, self.learning_rate, self.seed, policy, self.persist_optimizer_state)

    def centralized_epochs(self) -> int:
        """CT epochs; by default the FT step budget T * l * E expressed in epochs."""
        if self.ct_epochs:
            return self.ct_epochs
        fed = dataclasses.replace(self, scenario="ft-iid").round_config()
        return self.rounds * fed.per_round * self.local_epochs

    def arch(self) -> ArchConfig:
        return ArchConfig(tuple(self.widths), tuple(self.pose_widths), derive_seed(self.seed, "init") % 2**31,
                          coord_channels=self.coord_channels)

    def loss_settings(self) -> LossSettings:
        w = LossWeights(self.alpha, self.beta, self.gamma, self.delta, self.epsilon)
        return LossSettings(w, rank_pairs=self.rank_pairs, automask=self.automask)

    # -- serialisation ------------------------------------------------------------

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = str(v) if isinstance(v, Fraction) else list(v) if isinstance(v, tuple) else v
        return out

    def digest(self) -> str:
        """Hash of everything that affects results (the output directory does not)."""
        payload = {k: v for k, v in self.to_dict().items() if k != "out"}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for section, names in SECTIONS.items():
            parser[section] = {n: _format(getattr(self, n)) for n in names}
        lines = []
        for section in parser.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in parser[section].items())
            lines.append("")
        return "\n".join(lines)


SECTIONS = {
    "experiment": ("scenario", "seed", "out", "checkpoint_every", "ct_epochs"),
    "federation": ("participants", "fraction", "local_epochs", "rounds", "batches_per_epoch", "batch_size",
                   "learning_rate", "persist_optimizer_state"),
    "data": ("source", "kitti_root", "train_split", "val_split", "test_split", "gt_root", "width", "height",
             "samples_per_drive", "val_samples_per_drive", "test_samples_per_drive", "texture_frequency",
             "tinted"),
    "model": ("widths", "pose_widths", "coord_channels"),
    "loss": ("alpha", "beta", "gamma", "delta", "epsilon", "rank_pairs", "automask"),
    "pseudo": ("noise_bound", "smoothing"),
}
_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
assert sorted(n for names in SECTIONS.values() for n in names) == sorted(_FIELDS)


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value).lower() if isinstance(value, bool) else str(value)


def _parse(name: str, text):
    default = _FIELDS[name].default
    if not isinstance(text, str):
        return text
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, Fraction):
            return Fraction(text)
        if isinstance(default, tuple):
            return _ints(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"{name}: {exc}") from None
    return text


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Build a config from an INI file (or ``$FEDDEPTH_CONFIG``) plus overrides.

    Unknown sections and keys are rejected; override values may be strings
    or already-typed values and win over the file.
    """
    path = path or os.environ.get(CONFIG_ENV)
    values = {}
    if path:
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}] in {path}")
            for key, value in parser[section].items():
                if key not in SECTIONS[section]:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                values[key] = _parse(key, value)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse(key, value)
    return ExperimentConfig(**values)


# --- datasets --------------------------------------------------------------------


def build_datasets(config: ExperimentConfig):
    """Return (train, validation, test) sample lists with pseudo depth attached."""
    provider = NoisyAnalyticDepth(config.noise_bound, config.smoothing, derive_seed(config.seed, "pseudo") % 2**32)
    if config.source == "synthetic":
        base = SceneSpec(width=config.width, height=config.height, texture_frequency=config.texture_frequency)
        if not config.tinted:
            base = dataclasses.replace(base, tints=((1.0, 1.0, 1.0),) * 3)
        data_seed = derive_seed(config.seed, "scenes")
        train = generate_synthetic_scene(dataclasses.replace(base, samples_per_drive=config.samples_per_drive),
                                         data_seed % 2**32)
        val = generate_synthetic_scene(
            dataclasses.replace(base, samples_per_drive=config.val_samples_per_drive, drive_prefix="val"),
            (data_seed + 1) % 2**32)
        test = generate_synthetic_scene(
            dataclasses.replace(base, samples_per_drive=config.test_samples_per_drive, drive_prefix="test"),
            (data_seed + 2) % 2**32)
    else:
        def load(split):
            if not split:
                return []
            return load_kitti_layout(config.kitti_root, split, (config.width, config.height),
                                     gt_root=config.gt_root or None)

        train, val, test = load(config.train_split), load(config.val_split), load(config.test_split)
        test = test or val
    for samples in (train, val, test):
        attach_pseudo_depth(samples, provider)
    return train, val, test


def make_plan(config: ExperimentConfig, train):
    if config.scenario == "ct":
        return partition_centralized(train, config.seed)
    split = partition_niid if config.scenario == "ft-niid" else partition_iid
    return split(train, config.participants, derive_seed(config.seed, "partition"))


# --- ledger ----------------------------------------------------------------------


def _jsonable(value):
    if dataclasses.is_dataclass(value):
        value = dataclasses.asdict(value)
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, Fraction):
        return str(value)
    return value


class RunLedger:
    """Append-only newline-delimited JSON record of one run."""

    def __init__(self, path):
        self.path = Path(path)

    def append(self, record: dict):
        with self.path.open("a") as fh:
            fh.write(json.dumps(_jsonable(record), sort_keys=True) + "\n")

    def records(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line.strip()]

    def truncate_progress(self, keep: int):
        """Drop trailing progress records beyond the first ``keep`` (used on resume)."""
        kept, seen = [], 0
        for rec in self.records():
            if rec["type"] in ("round", "epoch"):
                seen += 1
                if seen > keep:
                    continue
            elif rec["type"] != "header":
                continue
            kept.append(rec)
        self.path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in kept))


def strip_timestamps(records):
    return [{k: v for k, v in r.items() if k not in TIMESTAMP_FIELDS} for r in records]


def recompute_costs(records: list[dict]) -> list[dict]:
    """Independently recompute cumulative cost fields from a ledger's own records."""
    header = next(r for r in records if r["type"] == "header")
    omega = header["omega_bytes"]
    cfg = header["config"]
    out, cum = [], 0
    for rec in records:
        if rec["type"] == "round":
            cum += steps_federated([{k: v for k, v in rec["steps"].items()}])
            C, F = cfg["participants"], Fraction(cfg["fraction"])
            out.append({"round": rec["round"], "cum_steps": cum,
                        "cum_w_max": comm_upper_bound(rec["round"], C, omega),
                        "cum_w_min": float(comm_lower_bound(rec["round"], C, F, omega))})
        elif rec["type"] == "epoch":
            cum += rec["steps"]
            out.append({"epoch": rec["epoch"], "cum_steps": cum})
    return out


# --- running ---------------------------------------------------------------------


def _checkpoint(out: Path, model: GlobalModel, arch: ArchConfig, index: int):
    folder = out / "checkpoints"
    folder.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model.depth_params, folder / f"depth_{index:04d}", arch, index)
    save_checkpoint(model.pose_params, folder / f"pose_{index:04d}", arch, index)


def _save_state(out: Path, payload: dict):
    tmp = out / (STATE + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(out / STATE)


def _final_report(config, env, model, records, omega, depth_bytes, pose_bytes, test):
    if config.federated:
        steps_total = steps_federated(records)
        per_participant = {}
        for rec in records:
            for pid, n in rec.steps.items():
                per_participant[pid] = per_participant.get(pid, 0) + n
        rounds = len(records)
        cost = CostReport(comm_upper_bound(rounds, config.participants, omega),
                          float(comm_lower_bound(rounds, config.participants, config.fraction, omega)),
                          2 * omega, steps_total, per_participant, depth_bytes, pose_bytes)
    else:
        steps_total = sum(r.steps for r in records)
        cost = CostReport(0, 0, 0, steps_total, {0: steps_total}, depth_bytes, pose_bytes,
                          notes="centralized training moves no model weights")
    depth_net, _ = env.networks(model)
    try:
        metrics = evaluate_model(depth_net, test).as_dict() if test else None
    except EvaluationError as exc:
        log.error("final evaluation failed: %s", exc)
        metrics = None
    return cost, metrics


def run_experiment(config: ExperimentConfig, resume: bool = False) -> list[dict]:
    """Run one scenario end to end and return its ledger records.

    With ``resume`` the run continues from the last saved round or epoch of
    an existing output directory; the finished ledger is identical to an
    uninterrupted run apart from timestamp fields.
    """
    out = Path(config.out)
    ledger = RunLedger(out / LEDGER)
    if not resume and ledger.path.exists():
        raise ConfigError(f"{ledger.path} exists; use resume or a fresh output directory")
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()

    train, val, test = build_datasets(config)
    if not train:
        raise ConfigError("training set is empty")
    arch = config.arch()
    env = TrainingEnv(train, val, arch, config.loss_settings())
    initial = env.initial_model()
    depth_bytes, pose_bytes = initial.depth_params.total_bytes, initial.pose_params.total_bytes
    omega = parameter_bytes(initial.depth_params, initial.pose_params)
    plan = make_plan(config, train)
    chash = config.digest()

    state = None
    if resume and (out / STATE).exists():
        state = torch.load(out / STATE, weights_only=False)
        if state["config_hash"] != chash:
            raise ConfigError("resume config differs from the original run")
        ledger.truncate_progress(len(state["records"]))
    else:
        if ledger.path.exists():
            ledger.path.unlink()
        (out / "config.ini").write_text(config.to_ini())
        (out / "partition.json").write_text(plan.to_json())
        before = env.validate(*env.networks(initial))
        ledger.append({
            "type": "header", "config": config.to_dict(), "config_hash": chash, "arch_hash": arch.digest(),
            "scenario": config.scenario, "omega_bytes": omega, "depth_bytes": depth_bytes,
            "pose_bytes": pose_bytes, "partition_counts": plan.counts(), "started_at": started,
            "initial_val_loss": before.loss, "initial_val_abs_rel": before.abs_rel,
        })

    def restore(index):
        d, _ = load_checkpoint(out / "checkpoints" / f"depth_{index:04d}")
        p, _ = load_checkpoint(out / "checkpoints" / f"pose_{index:04d}")
        return GlobalModel(d, p, state["version"])

    if config.federated:
        fstate = None
        if state is not None:
            fstate = FederationState(restore(len(state["records"])), state["records"], state["optimizer_states"])

        def on_round(rec: RoundRecord, st: FederationState):
            if rec.round % config.checkpoint_every == 0 or rec.round == config.rounds:
                _checkpoint(out, st.model, arch, rec.round)
                _save_state(out, {"config_hash": chash, "records": st.records, "version": st.model.version,
                                  "optimizer_states": st.optimizer_states})
            ledger.append({"type": "round", "config_hash": chash, **dataclasses.asdict(rec)})

        fstate = fstate or FederationState(initial)
        records = run_federation(config.round_config(), plan, initial, env, fstate, on_round)
        model = fstate.model
    else:
        start = None
        if state is not None:
            start = (restore(len(state["records"])), state["optimizer_state"], state["records"])
        epochs = config.centralized_epochs()

        def on_epoch(rec: EpochRecord, st):
            model, opt_state, recs = st
            if rec.epoch % config.checkpoint_every == 0 or rec.epoch == epochs:
                _checkpoint(out, model, arch, rec.epoch)
                _save_state(out, {"config_hash": chash, "records": recs, "version": model.version,
                                  "optimizer_state": opt_state})
            ledger.append({"type": "epoch", "config_hash": chash, **dataclasses.asdict(rec)})

        records, model = run_centralized(config.round_config(), train, initial, env, epochs, start, on_epoch)

    cost, metrics = _final_report(config, env, model, records, omega, depth_bytes, pose_bytes, test)
    ledger.append({"type": "cost", "config_hash": chash, **cost.as_dict()})
    ledger.append({"type": "metrics", "config_hash": chash, "metrics": metrics})
    finished = time.time()
    ledger.append({"type": "end", "config_hash": chash, "finished_at": finished, "wall_time": finished - started})
    return ledger.records()


def run_ablation_grid(base: ExperimentConfig, participants=(10, 9), fractions=(1, Fraction(1, 2), Fraction(1, 3)),
                      local_epochs=(1, 2, 3)):
    """Run every (C, F, E) combination; a failing child is recorded and the grid continues.

    Returns ``(ledgers, summary)`` where ``ledgers`` maps a run name to its
    records (or ``None`` on failure) and ``summary`` holds one row per run.
    """
    combos = [(c, as_fraction(f), e) for c in participants for f in fractions for e in local_epochs]
    if not combos:
        raise ConfigError("ablation grid is empty")
    root = Path(base.out)
    ledgers, summary = {}, []
    for c, f, e in combos:
        name = f"C{c}_F{f.numerator}-{f.denominator}_E{e}"
        try:
            cfg = dataclasses.replace(base, participants=c, fraction=f, local_epochs=e, out=str(root / name))
            records = run_experiment(cfg)
        except Exception as exc:  # noqa: BLE001 - a failed child must not stop the grid
            log.error("grid run %s failed: %s", name, exc)
            ledgers[name] = None
            summary.append({"run": name, "participants": c, "fraction": str(f), "local_epochs": e,
                            "status": f"failed: {exc}"})
            continue
        ledgers[name] = records
        summary.append({"run": name, "participants": c, "fraction": str(f), "local_epochs": e,
                        "status": "ok", **best_loss_summary(records)})
    root.mkdir(parents=True, exist_ok=True)
    _write_csv(root / "grid_summary.csv", summary)
    return ledgers, summary


def best_loss_summary(records: list[dict]) -> dict:
    """Lowest global validation loss and the cost accrued up to that point."""
    progress = [r for r in records if r["type"] in ("round", "epoch") and r.get("val_loss") is not None]
    if not progress:
        return {"best_val_loss": None, "best_at": None, "w_max": None, "w_min": None, "steps": None}
    best = min(progress, key=lambda r: r["val_loss"])
    return {
        "best_val_loss": best["val_loss"],
        "best_at": best.get("round", best.get("epoch")),
        "w_max": best.get("cum_w_max", 0),
        "w_min": best.get("cum_w_min", 0),
        "steps": best["cum_steps"],
    }


# --- reporting -------------------------------------------------------------------


def _write_csv(path: Path, rows: list[dict]):
    keys = []
    for row in rows:
        keys.extend(k for k in row if k not in keys)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


def emit_plot_data(ledgers, out) -> dict[str, Path]:
    """Write the loss/cost curve CSVs for a set of ledgers.

    ``ledgers`` maps a run name to its records. Returns the written paths.
    """
    ledgers = {k: v for k, v in dict(ledgers).items() if v}
    if not ledgers:
        raise ConfigError("no ledgers to plot")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    by_steps, by_rounds, costs, best = [], [], [], []
    for name, records in ledgers.items():
        header = next(r for r in records if r["type"] == "header")
        cfg = header["config"]
        scenario = header["scenario"]
        for rec in records:
            if rec["type"] not in ("round", "epoch"):
                continue
            index = rec.get("round", rec.get("epoch"))
            row = {"run": name, "scenario": scenario, "steps": rec["cum_steps"], "val_loss": rec["val_loss"],
                   "best_val_loss": rec["best_val_loss"], "val_abs_rel": rec["val_abs_rel"]}
            by_steps.append(row)
            by_rounds.append({"run": name, "scenario": scenario, "round": index, "val_loss": rec["val_loss"],
                              "best_val_loss": rec["best_val_loss"], "val_abs_rel": rec["val_abs_rel"]})
            if rec["type"] == "round":
                costs.append({"run": name, "scenario": scenario, "round": index,
                              "w_max_gb": rec["cum_w_max"] / 1e9, "w_min_gb": rec["cum_w_min"] / 1e9,
                              "steps": rec["cum_steps"]})
        if scenario != "ct":
            cf = Fraction(cfg["fraction"]) * cfg["participants"]
            best.append({"run": name, "scenario": scenario, "c_times_f": float(cf),
                         "local_epochs": cfg["local_epochs"], **best_loss_summary(records)})
    paths = {
        "loss_vs_steps": out / "loss_vs_steps.csv",
        "loss_vs_rounds": out / "loss_vs_rounds.csv",
        "cost_vs_rounds": out / "cost_vs_rounds.csv",
        "best_loss_by_cf_e": out / "best_loss_by_cf_e.csv",
    }
    _write_csv(paths["loss_vs_steps"], by_steps)
    _write_csv(paths["loss_vs_rounds"], by_rounds)
    _write_csv(paths["cost_vs_rounds"], costs)
    _write_csv(paths["best_loss_by_cf_e"], best)
    return paths


def load_ledgers(paths) -> dict[str, list[dict]]:
    """Collect ledgers from run directories or ledger files (searched recursively)."""
    found = {}
    for p in map(Path, paths):
        files = [p] if p.is_file() else sorted(p.rglob(LEDGER))
        for f in files:
            found[str(f.parent)] = RunLedger(f).records()
    return found
