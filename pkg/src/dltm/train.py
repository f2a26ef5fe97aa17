"""Run configuration, the training loop and checkpoint-backed evaluation.

A run directory holds ``last.ckpt`` (raw weights, optimizer moments, EMA
shadow, schedule state), ``best.ckpt`` (EMA weights at the best validation
score) and ``metrics.jsonl`` (one line per finished epoch).  Restarting
``train`` on the same directory resumes from ``last.ckpt``.
"""

from __future__ import annotations

import dataclasses
import fcntl
import json
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, EcgRecord, MetaStats, compute_meta_stats, load_dataset, window_offsets
from .errors import ConfigError, DataError, LockError, NumericError
from .metrics import EvalResult, evaluate
from .model import (ModelConfig, forward, init_params, load_checkpoint, param_count, prepare_meta,
                    save_checkpoint)
from .optim import EMA, SAM, AdamW, WarmupPlateauSchedule, bce_with_logits, compute_grads
from .tensor import Tensor

# independent seed streams
STREAM_INIT, STREAM_WINDOWS = 1, 2
LAST, BEST, LOG, LOCK = "last.ckpt", "best.ckpt", "metrics.jsonl", "train.lock"
EMA_PREFIX = "ema/"
ABLATION_TO_MODEL = {
    "enable_lead_separation": "lead_separation",
    "enable_dual_scale": "dual_scale",
    "enable_ortho_attention": "ortho_attention",
    "enable_meta": "use_meta",
}


# ---------------------------------------------------------------- configuration


@dataclass
class OptimConfig:
    max_lr: float = 0.003
    warmup_epochs: int = 20
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    plateau_threshold: float = 1e-4
    min_lr: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.05
    sam_rho: float = 0.05
    ema_alpha: float = 0.998
    epochs: int = 100
    plateau_metric: str = "val_macro_auc"  # or "val_loss"


@dataclass
class DataConfig:
    path: str = ""
    classes: list | None = None  # None: every class in the manifest
    batch_size: int = 128
    seed: int = 0
    train_folds: list = field(default_factory=lambda: [1, 2, 3, 4, 5, 6, 7, 8])
    val_folds: list = field(default_factory=lambda: [9])
    test_folds: list = field(default_factory=lambda: [10])
    offset_strategy: str = "within_window"


@dataclass
class AblationConfig:
    enable_lead_separation: bool = True
    enable_dual_scale: bool = True
    enable_ortho_attention: bool = True
    enable_meta: bool = True


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)  # ModelConfig overrides; num_classes defaults to the task
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    output_dir: str = "runs/default"

    def model_config(self, num_classes: int) -> ModelConfig:
        d = dict(self.model)
        d.setdefault("num_classes", num_classes)
        for flag, name in ABLATION_TO_MODEL.items():
            d[name] = getattr(self.ablation, flag)
        return ModelConfig.from_dict(d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {"optim": OptimConfig, "data": DataConfig, "ablation": AblationConfig}
_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)} - set(ABLATION_TO_MODEL.values())


def _check_type(where: str, value, default):
    if default is None or isinstance(default, list):
        ok = value is None or isinstance(value, list) if default is None else isinstance(value, list)
    elif isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")


def parse_run_config(raw: dict, source: str = "<config>", base_dir: Path | None = None) -> RunConfig:
    """Strict parse: unknown keys and mistyped values name the file and key."""
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    unknown = sorted(set(raw) - {"model", "optim", "data", "ablation", "output_dir"})
    if unknown:
        raise ConfigError(f"{source}: unknown key {unknown[0]!r}")
    cfg = RunConfig()
    model = raw.get("model", {})
    if not isinstance(model, dict):
        raise ConfigError(f"{source}: key 'model' must be an object")
    for key in model:
        if key not in _MODEL_KEYS:
            raise ConfigError(f"{source}: unknown key 'model.{key}'")
    cfg.model = dict(model)
    for name, cls in _SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"{source}: key {name!r} must be an object")
        obj = cls()
        for key, value in section.items():
            if not hasattr(obj, key):
                raise ConfigError(f"{source}: unknown key '{name}.{key}'")
            _check_type(f"{source}: key '{name}.{key}'", value, getattr(obj, key))
            setattr(obj, key, float(value) if isinstance(getattr(obj, key), float) else value)
        setattr(cfg, name, obj)
    if "output_dir" in raw:
        _check_type(f"{source}: key 'output_dir'", raw["output_dir"], "")
        cfg.output_dir = raw["output_dir"]
    if base_dir is not None:
        if cfg.data.path and not Path(cfg.data.path).is_absolute():
            cfg.data.path = str(base_dir / cfg.data.path)
        if not Path(cfg.output_dir).is_absolute():
            cfg.output_dir = str(base_dir / cfg.output_dir)
    if cfg.data.offset_strategy not in ("within_window", "any"):
        raise ConfigError(f"{source}: key 'data.offset_strategy' must be 'within_window' or 'any'")
    if cfg.optim.plateau_metric not in ("val_macro_auc", "val_loss"):
        raise ConfigError(f"{source}: key 'optim.plateau_metric' must be 'val_macro_auc' or 'val_loss'")
    if cfg.data.batch_size < 1:
        raise ConfigError(f"{source}: key 'data.batch_size' must be positive")
    try:
        cfg.model_config(1)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"{source}: key 'model': {exc}") from None
    return cfg


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_run_config(raw, str(path), path.parent)


# ---------------------------------------------------------------- task plumbing


@dataclass
class Task:
    """Records of one split, labels restricted to the configured classes."""

    records: list[EcgRecord]
    class_names: list[str]
    labels: np.ndarray  # (N, C)


def select_task(dataset: Dataset, folds: Sequence[int], classes: Sequence[str] | None) -> Task:
    names = dataset.class_names
    if classes is None:
        cols = list(range(len(names)))
    else:
        missing = [c for c in classes if c not in names]
        if missing:
            raise ConfigError(f"classes {missing} not in dataset classes {names}")
        cols = [names.index(c) for c in classes]
    records = dataset.select(folds)
    if not records:
        raise DataError(f"no records in folds {list(folds)}")
    labels = np.array([r.labels[cols] for r in records]).reshape(len(records), len(cols))
    return Task(records, [names[c] for c in cols], labels)


def continuous_fields(config: ModelConfig) -> list[str]:
    return [f.name for f in config.meta_fields if f.kind == "continuous"]


def _seed_rng(seed: int, stream: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, *extra]))


def record_logits(records: Sequence[EcgRecord], params: dict, config: ModelConfig,
                  stats: MetaStats | None, batch_size: int = 128) -> np.ndarray:
    """Per-record logits: the mean over the record's eval-mode windows."""
    params = {n: p if isinstance(p, Tensor) else Tensor._wrap(np.asarray(p, dtype=np.float64))
              for n, p in params.items()}
    items = []
    for i, rec in enumerate(records):
        if rec.signal.shape[0] != config.num_leads:
            raise DataError(f"record {rec.id!r} has {rec.signal.shape[0]} leads, model expects {config.num_leads}")
        for o in window_offsets(rec.num_samples, config.window_samples):
            items.append((i, o))
    sums = np.zeros((len(records), config.num_classes))
    counts = np.zeros(len(records))
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        x = np.stack([records[i].signal[:, o:o + config.window_samples] for i, o in chunk])
        meta = prepare_meta([records[i].meta for i, _ in chunk], config, stats) if config.use_meta else None
        z = forward(x, meta, params, config).data
        idx = np.array([i for i, _ in chunk])
        np.add.at(sums, idx, z)
        np.add.at(counts, idx, 1.0)
    return sums / counts[:, None]


def mean_bce(logits: np.ndarray, labels: np.ndarray) -> float:
    return bce_with_logits(Tensor(logits), labels).item()


# ---------------------------------------------------------------- training


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_macro_auc: float | None
    val_loss: float
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


@contextmanager
def run_lock(directory: Path):
    """Exclusive ownership of a run directory for the life of the block."""
    f = open(directory / LOCK, "a+")
    try:
        try:
            fcntl.flock(f, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise LockError(f"run directory {directory} is locked by another training process") from None
        yield
    finally:
        f.close()


class Trainer:
    """SAM(AdamW) with EMA shadow weights and a warmup/plateau schedule."""

    def __init__(self, run: RunConfig, dataset: Dataset | None = None):
        self.run = run
        self.dataset = dataset if dataset is not None else load_dataset(run.data.path)
        d = run.data
        self.train = select_task(self.dataset, d.train_folds, d.classes)
        self.val = select_task(self.dataset, d.val_folds, d.classes)
        self.config = run.model_config(len(self.train.class_names))
        if self.config.num_classes != len(self.train.class_names):
            raise ConfigError(f"model.num_classes={self.config.num_classes} but the task has "
                              f"{len(self.train.class_names)} classes")
        self.stats = compute_meta_stats(self.train.records, continuous_fields(self.config))
        o = run.optim
        self.params = init_params(self.config, _seed_rng(d.seed, STREAM_INIT))
        self.opt = AdamW(o.beta1, o.beta2, o.eps, o.weight_decay)
        self.sam = SAM(o.sam_rho)
        self.ema = EMA.from_params(self.params, o.ema_alpha)
        self.sched = WarmupPlateauSchedule(o.max_lr, o.warmup_epochs, o.plateau_factor, o.plateau_patience,
                                           o.min_lr, o.plateau_threshold)
        self.epoch = 0  # epochs completed
        self.best_score: float | None = None
        self.last_score: float | None = None
        self.out = Path(run.output_dir)

    # -- state

    def metadata(self, kind: str) -> dict:
        return {
            "kind": kind,
            "model_config": self.config.to_dict(),
            "class_names": self.train.class_names,
            "meta_stats": self.stats.to_dict(),
            "run_config": self.run.to_dict(),
            "epoch": self.epoch,
            "optim_step": self.opt.t,
            "schedule": self.sched.state(),
            "best_score": self.best_score,
            "last_score": self.last_score,
        }

    def save_last(self) -> None:
        tensors = {n: p.data for n, p in self.params.items()}
        tensors.update({EMA_PREFIX + n: a for n, a in self.ema.shadow.items()})
        tensors.update(self.opt.state_arrays())
        save_checkpoint(self.out / LAST, tensors, self.metadata("last"))

    def save_best(self) -> None:
        save_checkpoint(self.out / BEST, dict(self.ema.shadow), self.metadata("best"))

    def restore(self, path: Path) -> None:
        arrays, meta = load_checkpoint(path)
        if meta.get("model_config") != self.config.to_dict():
            raise ConfigError(f"{path}: checkpoint model config differs from the run config")
        for n, p in self.params.items():
            p.data = arrays[n]
        self.ema.shadow = {n: arrays[EMA_PREFIX + n] for n in self.params}
        self.opt.load_state(arrays, meta["optim_step"])
        self.sched.load_state(meta["schedule"])
        self.epoch = meta["epoch"]
        self.best_score = meta["best_score"]
        self.last_score = meta["last_score"]

    # -- loop

    def _batches(self, epoch: int):
        rng = _seed_rng(self.run.data.seed, STREAM_WINDOWS, epoch)
        w = self.config.window_samples
        items = []
        for i, rec in enumerate(self.train.records):
            for o in window_offsets(rec.num_samples, w, rng, "train", self.run.data.offset_strategy):
                items.append((i, o))
        order = rng.permutation(len(items))
        bs = self.run.data.batch_size
        for start in range(0, len(order), bs):
            yield [items[k] for k in order[start:start + bs]], rng

    def train_epoch(self, lr: float) -> float:
        total, seen = 0.0, 0
        recs = self.train.records
        for chunk, rng in self._batches(self.epoch):
            x = np.stack([recs[i].signal[:, o:o + self.config.window_samples] for i, o in chunk])
            y = self.train.labels[[i for i, _ in chunk]]
            meta = (prepare_meta([recs[i].meta for i, _ in chunk], self.config, self.stats)
                    if self.config.use_meta else None)

            def loss_fn():
                return bce_with_logits(forward(x, meta, self.params, self.config, training=True, rng=rng), y)

            loss = self.sam.step(self.params, lambda: compute_grads(loss_fn, self.params),
                                 lambda g: self.opt.step(self.params, g, lr))
            if not math.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {self.epoch + 1}")
            self.ema.update(self.params)
            total += loss * len(chunk)
            seen += len(chunk)
        return total / seen

    def validate(self) -> tuple[float | None, float]:
        z = record_logits(self.val.records, self.ema.shadow, self.config, self.stats, self.run.data.batch_size)
        result = evaluate(z, self.val.labels, self.val.class_names)
        return result.macro_auc, mean_bce(z, self.val.labels)

    def fit(self, stop_after: int | None = None, on_epoch: Callable[[EpochLog], None] | None = None) -> list[EpochLog]:
        """Train to ``optim.epochs`` (or ``stop_after`` epochs in total); returns new log entries."""
        self.out.mkdir(parents=True, exist_ok=True)
        logs = []
        with run_lock(self.out):
            if (self.out / LAST).exists():
                self.restore(self.out / LAST)
            _truncate_log(self.out / LOG, self.epoch)
            target = self.run.optim.epochs if stop_after is None else min(stop_after, self.run.optim.epochs)
            while self.epoch < target:
                t0 = time.perf_counter()
                lr = self.sched.step(self.epoch, self.last_score)
                train_loss = self.train_epoch(lr)
                val_auc, val_loss = self.validate()
                # undefined AUC (single-class validation columns) falls back to the loss
                score = val_auc if val_auc is not None else -val_loss
                self.epoch += 1
                self.last_score = -val_loss if self.run.optim.plateau_metric == "val_loss" else score
                improved = self.best_score is None or score > self.best_score
                if improved:
                    self.best_score = score
                    self.save_best()
                self.save_last()
                entry = EpochLog(self.epoch, lr, train_loss, val_auc, val_loss, time.perf_counter() - t0)
                with open(self.out / LOG, "a") as f:
                    f.write(entry.to_json() + "\n")
                logs.append(entry)
                if on_epoch:
                    on_epoch(entry)
        return logs


def _truncate_log(path: Path, epoch: int) -> None:
    """Drop log lines past the checkpointed epoch (left by a kill between log and checkpoint writes)."""
    if not path.exists():
        return
    lines = path.read_text().splitlines()
    keep = [ln for ln in lines if ln.strip() and json.loads(ln)["epoch"] <= epoch]
    if len(keep) != len(lines):
        path.write_text("".join(ln + "\n" for ln in keep))


def read_log(path) -> list[dict]:
    return [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]


# ---------------------------------------------------------------- checkpoints for inference


@dataclass
class LoadedModel:
    config: ModelConfig
    params: dict
    class_names: list[str]
    stats: MetaStats
    metadata: dict
    all_tensors: dict

    def model_tensors(self) -> dict:
        return {n: a for n, a in self.all_tensors.items() if "/" not in n}


def load_model(path) -> LoadedModel:
    """Model and task from a checkpoint; EMA weights are used whenever present."""
    arrays, meta = load_checkpoint(path)
    try:
        config = ModelConfig.from_dict(meta["model_config"])
        names = list(meta["class_names"])
        stats = MetaStats.from_dict(meta["meta_stats"])
    except KeyError as exc:
        raise ConfigError(f"{path}: checkpoint metadata lacks {exc}") from None
    params = {}
    for n in arrays:
        if "/" in n:
            continue
        params[n] = arrays.get(EMA_PREFIX + n, arrays[n])
    return LoadedModel(config, params, names, stats, meta, arrays)


def evaluate_split(model: LoadedModel, dataset: Dataset, folds: Sequence[int]) -> EvalResult:
    """Metrics of a checkpoint on the given folds; classes are matched by name when possible."""
    names = dataset.class_names
    if set(model.class_names) <= set(names):
        classes = model.class_names
    elif len(names) == model.config.num_classes:
        classes = None
    else:
        raise ConfigError(f"checkpoint has {model.config.num_classes} classes, dataset has {len(names)}")
    task = select_task(dataset, folds, classes)
    z = record_logits(task.records, model.params, model.config, model.stats)
    return evaluate(z, task.labels, task.class_names)


def export_model(path, config: ModelConfig, params: dict, class_names: Sequence[str],
                 stats: MetaStats | None = None, folds: dict | None = None) -> None:
    """Write an inference checkpoint for weights that did not come from :class:`Trainer`."""
    if len(class_names) != config.num_classes:
        raise ConfigError(f"{len(class_names)} class names for a {config.num_classes}-class model")
    data = dataclasses.asdict(DataConfig())
    data.update(folds or {})
    save_checkpoint(path, {n: getattr(p, "data", p) for n, p in params.items()}, {
        "kind": "export",
        "model_config": config.to_dict(),
        "class_names": list(class_names),
        "meta_stats": (stats or MetaStats({})).to_dict(),
        "run_config": {"data": data},
        "epoch": 0,
    })
