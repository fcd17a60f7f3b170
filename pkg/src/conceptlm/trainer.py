"""Mini-batch Adam training with early stopping, resumable checkpoints,
and grid sweeps over concept weight / noise / supervision proportion.

Every random choice is derived from named SeedSequence streams, so a run
is a pure function of (seed, config, dataset): the train/val split uses
(seed, SPLIT_STREAM), epoch shuffles use (seed, EPOCH_STREAM, epoch), and
sweep runs derive their seeds from (master_seed, RUN_STREAM, grid point).
Resuming from an epoch checkpoint therefore replays the exact step
sequence of an uninterrupted run.
"""

import csv
import fcntl
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels
from .conceptset import (SUPERVISION_MODES, randomize_synonyms,
                         subsample_supervision)
from .errors import ConfigError, NumericalError
from .model import load_checkpoint, save_checkpoint
from .objective import LossBreakdown, ObjectiveConfig

SPLIT_STREAM = 0x5917
EPOCH_STREAM = 0xE90C
RUN_STREAM = 0x53EE
NOISE_STREAM = 0x70AD
PROP_STREAM = 0x9209

STEP_CSV_FIELDS = ("step", "ntp", "concept", "combined",
                   "gated_count", "active_count")

SWEEP_MODES = ("concepts", "noise")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 7e-5
    batch_size: int = 2
    max_epochs: int = 5
    early_stop_patience: int = 2
    seed: int = 0
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    train_split: float = 0.9
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)

    def __post_init__(self):
        # learning_rate 0 is legal: it trains nothing but still produces a log
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be at least 1")
        if not 0 <= self.early_stop_patience <= self.max_epochs:
            raise ConfigError("need 0 <= early_stop_patience <= max_epochs")
        if not 0.0 < self.train_split < 1.0:
            raise ConfigError("train_split must be in (0, 1)")
        if self.optimizer != "adam":
            raise ConfigError("only the adam optimizer is supported")


@dataclass
class StepRecord:
    step: int
    epoch: int
    breakdown: LossBreakdown


@dataclass
class RunLog:
    steps: list = field(default_factory=list)
    val_history: list = field(default_factory=list)
    stopping_epoch: int = 0
    best_epoch: int = 0
    wall_time: float = 0.0
    diverged: bool = False

    def summary(self):
        return {"val_history": self.val_history,
                "stopping_epoch": self.stopping_epoch,
                "best_epoch": self.best_epoch,
                "n_steps": len(self.steps),
                "wall_time": self.wall_time,
                "diverged": self.diverged}


def write_step_csv(path, log):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STEP_CSV_FIELDS)
        for rec in log.steps:
            b = rec.breakdown
            w.writerow([rec.step, repr(b.ntp_loss), repr(b.concept_loss),
                        repr(b.combined), b.gated_count, b.active_count])


class AdamState:
    def __init__(self, params):
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def step(self, params, grads, cfg):
        self.t += 1
        bc1 = 1.0 - cfg.adam_beta1 ** self.t
        bc2 = 1.0 - cfg.adam_beta2 ** self.t
        for name in params.names():
            kernels.adam_step(
                params.tensors[name].reshape(-1), grads[name].reshape(-1),
                self.m[name].reshape(-1), self.v[name].reshape(-1),
                cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2,
                cfg.adam_eps, bc1, bc2)


def _rng(*material):
    return np.random.default_rng(np.random.SeedSequence(list(material)))


def split_dataset(dataset, cfg):
    perm = _rng(cfg.seed, SPLIT_STREAM).permutation(len(dataset))
    n_train = min(max(int(round(cfg.train_split * len(dataset))), 1),
                  len(dataset))
    train = [dataset[i] for i in perm[:n_train]]
    val = [dataset[i] for i in perm[n_train:]]
    return train, val


def _epoch_gate_fraction(log, epoch):
    gated = active = skipped = 0
    for rec in log.steps:
        if rec.epoch == epoch:
            gated += rec.breakdown.gated_count
            active += rec.breakdown.active_count
            skipped += rec.breakdown.skipped_empty
    total = gated + active + skipped
    return gated / total if total else 0.0


def train(params, dataset, cfg, run_dir=None, resume_from=None):
    """Train a copy of `params` on the dataset; returns (best, RunLog).

    The returned parameters are the best-validation checkpoint. On
    divergence (non-finite loss) training aborts and returns the last good
    checkpoint with the log flagged as diverged.
    """
    from . import model as model_mod  # local import to keep load order simple

    if not dataset:
        raise ConfigError("dataset must be non-empty")
    t_start = time.perf_counter()
    train_set, val_set = split_dataset(dataset, cfg)

    work = params.copy()
    opt = AdamState(work)
    log = RunLog()
    best = work.copy()
    best_val = np.inf
    bad_epochs = 0
    step = 0
    start_epoch = 1

    if resume_from is not None:
        work, extra, meta = load_checkpoint(Path(resume_from) / "state.npz")
        opt = AdamState(work)
        opt.m = {k[2:]: v for k, v in extra.items() if k.startswith("m.")}
        opt.v = {k[2:]: v for k, v in extra.items() if k.startswith("v.")}
        opt.t = meta["adam_t"]
        best, _, _ = load_checkpoint(Path(resume_from) / "best.npz")
        best_val = meta["best_val"]
        bad_epochs = meta["bad_epochs"]
        step = meta["step"]
        start_epoch = meta["epoch"] + 1
        log.best_epoch = meta["best_epoch"]

    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        snapshot = {"train": asdict(cfg), "n_sequences": len(dataset)}
        (run_dir / "config.json").write_text(
            json.dumps(snapshot, indent=2, sort_keys=True))

    stopped = start_epoch - 1
    for epoch in range(start_epoch, cfg.max_epochs + 1):
        stopped = epoch
        order = _rng(cfg.seed, EPOCH_STREAM, epoch).permutation(len(train_set))
        diverged = False
        for lo in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[lo:lo + cfg.batch_size]]
            try:
                breakdown, grads = model_mod.loss_and_grad(
                    work, batch, cfg.objective)
            except NumericalError:
                diverged = True
                break
            opt.step(work, grads, cfg)
            step += 1
            log.steps.append(StepRecord(step, epoch, breakdown))
        if diverged:
            log.diverged = True
            break

        entry = {"epoch": epoch,
                 "train_gate_fraction": _epoch_gate_fraction(log, epoch)}
        if val_set:
            vb = model_mod.batch_loss(work, val_set, cfg.objective)
            entry.update(ntp=vb.ntp_loss, concept=vb.concept_loss,
                         combined=vb.combined)
            improved = vb.combined < best_val
        else:
            improved = True
        log.val_history.append(entry)
        if improved:
            best = work.copy()
            if val_set:
                best_val = entry["combined"]
            log.best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1

        if run_dir is not None:
            extra = {**{"m." + k: v for k, v in opt.m.items()},
                     **{"v." + k: v for k, v in opt.v.items()}}
            meta = {"epoch": epoch, "step": step, "adam_t": opt.t,
                    "best_val": float(best_val),
                    "bad_epochs": bad_epochs, "best_epoch": log.best_epoch}
            save_checkpoint(run_dir / "state.npz", work, extra, meta)
            save_checkpoint(run_dir / "best.npz", best,
                            meta={"epoch": log.best_epoch})
        if bad_epochs > cfg.early_stop_patience:
            break

    log.stopping_epoch = stopped
    log.wall_time = time.perf_counter() - t_start
    if run_dir is not None:
        write_step_csv(run_dir / "steps.csv", log)
        (run_dir / "runlog.json").write_text(
            json.dumps(log.summary(), indent=2, sort_keys=True))
    return best, log


@dataclass(frozen=True)
class GridPoint:
    concept_weight: float
    mode: str
    proportion: str

    def run_id(self):
        return f"lam{self.concept_weight:g}_{self.mode}_{self.proportion}"


def derive_run_seed(master_seed, point):
    material = [master_seed, RUN_STREAM,
                int(round(point.concept_weight * 1000)),
                SWEEP_MODES.index(point.mode),
                SUPERVISION_MODES.index(point.proportion)]
    return int(np.random.SeedSequence(material).generate_state(1)[0])


def load_manifest(path):
    path = Path(path)
    if not path.exists():
        return {"version": 1, "runs": {}}
    return json.loads(path.read_text())


def save_manifest(path, manifest):
    """Atomic replace guarded by an advisory lock next to the manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lock = path.with_suffix(".lock")
    with open(lock, "w") as lk:
        fcntl.flock(lk, fcntl.LOCK_EX)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        os.replace(tmp, path)


def grid_points(lambda_grid, modes, proportions):
    if not lambda_grid or not modes or not proportions:
        raise ConfigError("lambda grid, modes, and proportions must be "
                          "non-empty")
    for mode in modes:
        if mode not in SWEEP_MODES:
            raise ConfigError(f"unknown sweep mode {mode!r}")
    for prop in proportions:
        if prop not in SUPERVISION_MODES:
            raise ConfigError(f"unknown proportion {prop!r}")
    return [GridPoint(lam, mode, prop)
            for lam in lambda_grid for mode in modes for prop in proportions]


def _prepare_variant(dataset, point, master_seed):
    variant = dataset
    if point.mode == "noise":
        variant = randomize_synonyms(variant, derive_run_seed(
            master_seed, point) ^ NOISE_STREAM)
    if point.proportion != "all":
        variant, _ = subsample_supervision(variant, point.proportion,
                                           derive_run_seed(
                                               master_seed, point)
                                           ^ PROP_STREAM)
    return variant


def run_sweep_point(base_params, dataset, base_cfg, point, master_seed,
                    run_dir):
    variant = _prepare_variant(dataset, point, master_seed)
    cfg = replace(base_cfg, seed=derive_run_seed(master_seed, point),
                  objective=replace(base_cfg.objective,
                                    concept_weight=point.concept_weight))
    params, log = train(base_params, variant, cfg, run_dir=run_dir)
    return params, log


def _sweep_worker(args):
    base_params, dataset, base_cfg, point, master_seed, run_dir = args
    run_sweep_point(base_params, dataset, base_cfg, point, master_seed,
                    run_dir)
    return point.run_id()


def sweep(base_params, dataset, base_cfg, lambda_grid, modes, proportions,
          master_seed, run_root, jobs=1):
    """Train one run per grid point; independently seeded and resumable.

    Completed runs are skipped on re-invocation. Failures are recorded per
    run in the manifest and the sweep continues.
    """
    run_root = Path(run_root)
    manifest_path = run_root / "manifest.json"
    manifest = load_manifest(manifest_path)
    manifest["master_seed"] = master_seed
    points = grid_points(lambda_grid, modes, proportions)

    pending = []
    for point in points:
        rid = point.run_id()
        entry = manifest["runs"].get(rid)
        run_dir = run_root / "runs" / rid
        if entry and entry["status"] == "done" \
                and Path(entry["paths"]["checkpoint"]).exists():
            continue
        manifest["runs"][rid] = {
            "grid": asdict(point), "status": "pending",
            "seed": derive_run_seed(master_seed, point),
            "paths": {"run_dir": str(run_dir),
                      "checkpoint": str(run_dir / "best.npz"),
                      "steps_csv": str(run_dir / "steps.csv"),
                      "runlog": str(run_dir / "runlog.json")},
            "error": None}
        pending.append(point)
    save_manifest(manifest_path, manifest)

    def finish(rid, status, error=None):
        manifest["runs"][rid]["status"] = status
        manifest["runs"][rid]["error"] = error
        save_manifest(manifest_path, manifest)

    if jobs > 1 and len(pending) > 1:
        args = [(base_params, dataset, base_cfg, p, master_seed,
                 run_root / "runs" / p.run_id()) for p in pending]
        for p in pending:
            manifest["runs"][p.run_id()]["status"] = "running"
        save_manifest(manifest_path, manifest)
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(_sweep_worker, a): a[3] for a in args}
            for fut, point in futures.items():
                try:
                    fut.result()
                    finish(point.run_id(), "done")
                except Exception as e:  # noqa: BLE001 - recorded per run
                    finish(point.run_id(), "failed", repr(e))
    else:
        for point in pending:
            rid = point.run_id()
            manifest["runs"][rid]["status"] = "running"
            save_manifest(manifest_path, manifest)
            try:
                run_sweep_point(base_params, dataset, base_cfg, point,
                                master_seed, run_root / "runs" / rid)
                finish(rid, "done")
            except Exception as e:  # noqa: BLE001 - recorded per run
                finish(rid, "failed", repr(e))
    return load_manifest(manifest_path)
