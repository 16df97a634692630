"""AdamW with decoupled weight decay, linear LR schedule, early stopping,
the two-stage adapter/fusion training pipeline, multi-run averaging, and
binary checkpointing.

Checkpoint wire format: 8-byte magic "AFCKPT01", little-endian u64 manifest
length, UTF-8 JSON manifest {name -> {shape, dtype:"f32", offset}} plus a
reserved "__meta__" entry (config snapshot, RNG seed, stage tag, vocab),
then the contiguous little-endian float32 payload.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .data import (Batch, Splits, Vocabulary, build_vocab,
                   class_statistics, make_batches)
from .encoder import ModelConfig
from .errors import (CheckpointError, ConfigError, ContractError,
                     NumericalDivergenceError)
from .fusion import AdapterBank
from .losses import PosWeights, cross_entropy_7, multilabel_loss, pos_weights
from .metrics import (MetricsReport, aggregate_reports, binary_report,
                      early_stop_metric, emotion_report, multiclass_report)
from .tensor import Tensor, backward

CHECKPOINT_MAGIC = b"AFCKPT01"
META_KEY = "__meta__"
NO_DECAY_SUFFIXES = (".bias", ".gamma", ".beta")

TASK_NUM_LABELS = {"binary": 1, "multiclass-7": 7, "multilabel-6": 6}


@dataclass(frozen=True)
class TaskSpec:
    """A named task binding a dataset kind, a head width, and a loss."""
    name: str
    kind: str
    loss: str = "bce"

    def __post_init__(self):
        if self.kind not in TASK_NUM_LABELS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.kind == "multiclass-7" and self.loss not in ("ce",):
            object.__setattr__(self, "loss", "ce")

    @property
    def num_labels(self) -> int:
        return TASK_NUM_LABELS[self.kind]


@dataclass
class TrainConfig:
    lr: float = 1e-5
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    epochs: int = 10
    patience: int = 3
    batch_size: int = 16
    seed: int = 0
    runs: int = 3
    loss: str = "weighted_bce"
    metric_for_early_stop: str | None = None  # default: weighted F1 / accuracy
    max_len: int = 32
    warmup_steps: int = 0
    loss_reduction: str = "batch-mean"
    threshold: float = 0.5
    focal_gamma: float = 2.0
    focal_alpha: float | None = None
    vocab_size: int = 2000

    def __post_init__(self):
        if self.lr <= 0 or self.epochs <= 0 or self.patience <= 0:
            raise ConfigError("lr, epochs, and patience must be positive")
        if self.patience > self.epochs:
            raise ConfigError(
                f"patience {self.patience} exceeds epochs {self.epochs}")
        if self.batch_size <= 0 or self.runs <= 0:
            raise ConfigError("batch_size and runs must be positive")
        self.betas = (float(self.betas[0]), float(self.betas[1]))

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "betas" in known:
            known["betas"] = tuple(known["betas"])
        return cls(**known)

    @classmethod
    def from_json_file(cls, path) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

AdamState = dict[str, tuple[np.ndarray, np.ndarray]]


def adamw_step(params: list[tuple[str, Tensor]], state: AdamState, t: int,
               lr_t: float, config: TrainConfig) -> None:
    """One decoupled-weight-decay Adam update over the given parameters.

    Decay is skipped for biases and layer-norm gains/shifts. Parameters with
    no gradient this step are left untouched.
    """
    if t < 1:
        raise ContractError(f"step index must be >= 1, got {t}")
    b1, b2 = config.betas
    for name, p in params:
        if p.grad is None:
            continue
        if p.grad.shape != p.data.shape:
            raise ContractError(
                f"gradient shape {p.grad.shape} does not match parameter "
                f"{name} of shape {p.data.shape}")
        m, v = state.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
        m = b1 * m + (1.0 - b1) * p.grad
        v = b2 * v + (1.0 - b2) * p.grad * p.grad
        state[name] = (m, v)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data -= lr_t * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        if config.weight_decay and not name.endswith(NO_DECAY_SUFFIXES):
            p.data -= lr_t * config.weight_decay * p.data


def lr_schedule(step: int, total_steps: int, base_lr: float,
                warmup_steps: int = 0) -> float:
    """Linear decay to zero, with an optional linear warmup prefix."""
    if total_steps <= 0:
        raise ContractError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps < 0 or warmup_steps >= total_steps:
        raise ContractError(
            f"warmup_steps {warmup_steps} must lie in [0, {total_steps})")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    return base_lr * (total_steps - step) / (total_steps - warmup_steps)


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def checkpoint_from_bank(bank: AdapterBank, seed: int, stage: str,
                         vocab: Vocabulary | None = None,
                         extra_meta: dict | None = None) -> Checkpoint:
    tensors = {name: t.data.copy() for name, t in bank.params.items()}
    meta = {
        "model_config": bank.config.to_dict(),
        "heads": dict(bank.head_labels),
        "adapter_tasks": list(bank.adapter_tasks),
        "with_fusion": bank.with_fusion,
        "seed": seed,
        "stage": stage,
    }
    if vocab is not None:
        meta["vocab"] = vocab.tokens[4:]
    if extra_meta:
        meta.update(extra_meta)
    return Checkpoint(tensors=tensors, meta=meta)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Atomic write: temp file in the target directory, then rename."""
    path = Path(path)
    manifest: dict = {META_KEY: ckpt.meta}
    payload_parts = []
    offset = 0
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype=np.float64).astype("<f4")
        raw = arr.tobytes()
        manifest[name] = {"shape": list(arr.shape), "dtype": "f32",
                          "offset": offset}
        payload_parts.append(raw)
        offset += len(raw)
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    blob = (CHECKPOINT_MAGIC + struct.pack("<Q", len(manifest_bytes))
            + manifest_bytes + b"".join(payload_parts))
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    """Validate the manifest before touching the payload; errors name the
    offending entry."""
    blob = Path(path).read_bytes()
    if len(blob) < len(CHECKPOINT_MAGIC) + 8:
        raise CheckpointError("file too short for header")
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {blob[:8]!r}")
    (manifest_len,) = struct.unpack("<Q", blob[8:16])
    manifest_end = 16 + manifest_len
    if manifest_end > len(blob):
        raise CheckpointError("manifest length exceeds file size")
    try:
        manifest = json.loads(blob[16:manifest_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from None
    if not isinstance(manifest, dict):
        raise CheckpointError("manifest is not a JSON object")
    meta = manifest.pop(META_KEY, {})
    payload = blob[manifest_end:]
    tensors: dict[str, np.ndarray] = {}
    for name, entry in manifest.items():
        if (not isinstance(entry, dict) or "shape" not in entry
                or "offset" not in entry):
            raise CheckpointError(f"malformed manifest entry for {name!r}")
        if entry.get("dtype") != "f32":
            raise CheckpointError(
                f"unsupported dtype {entry.get('dtype')!r} for {name!r}")
        shape = tuple(int(s) for s in entry["shape"])
        offset = int(entry["offset"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if offset < 0 or offset + nbytes > len(payload):
            raise CheckpointError(
                f"truncated payload for entry {name!r} "
                f"(needs bytes [{offset}, {offset + nbytes}), "
                f"payload has {len(payload)})")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        tensors[name] = arr.reshape(shape).astype(np.float64)
    return Checkpoint(tensors=tensors, meta=meta)


def load_into_bank(bank: AdapterBank, ckpt: Checkpoint,
                   names: list[str] | None = None) -> None:
    """Copy checkpoint values into matching bank parameters."""
    names = list(ckpt.tensors) if names is None else names
    for name in names:
        if name not in ckpt.tensors:
            raise CheckpointError(f"checkpoint is missing entry {name!r}")
        if name not in bank.params:
            raise CheckpointError(f"model has no parameter {name!r}")
        src = ckpt.tensors[name]
        dst = bank.params[name]
        if src.shape != dst.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {src.shape} vs "
                f"model {dst.data.shape}")
        dst.data = src.copy()


def group_hashes(bank: AdapterBank) -> dict[str, str]:
    """sha256 of each freeze group's serialized float32 bytes."""
    return {g: hashlib.sha256(bank.params.state_bytes(names)).hexdigest()
            for g, names in bank.groups.groups.items()}


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    bank: AdapterBank
    vocab: Vocabulary
    task: TaskSpec
    history: list[dict]
    best_epoch: int
    val_report: MetricsReport | None
    test_report: MetricsReport | None
    checkpoint: Checkpoint


def _batch_loss(bank: AdapterBank, task: TaskSpec, batch: Batch,
                weights: PosWeights | None, cfg: TrainConfig) -> Tensor:
    logits = bank.forward(batch, task.name)
    if task.kind == "multiclass-7":
        return cross_entropy_7(logits, batch.labels, reduction=cfg.loss_reduction)
    return multilabel_loss(task.loss, logits, batch.labels, weights=weights,
                           gamma=cfg.focal_gamma, alpha=cfg.focal_alpha,
                           reduction=cfg.loss_reduction)


def evaluate_model(bank: AdapterBank, task: TaskSpec, batches: list[Batch],
                   threshold: float = 0.5, split: str = "",
                   seed: int | None = None) -> MetricsReport:
    if not batches:
        raise ConfigError(f"empty split {split!r}")
    logits = np.concatenate([bank.forward(b, task.name).data for b in batches])
    labels = np.concatenate([b.labels for b in batches])
    if task.kind == "multilabel-6":
        return emotion_report(logits, labels, threshold, split=split, seed=seed)
    if task.kind == "binary":
        return binary_report(logits, labels, threshold, split=split, seed=seed)
    return multiclass_report(logits, labels, split=split, seed=seed)


def fit(bank: AdapterBank, task: TaskSpec, splits: Splits, vocab: Vocabulary,
        cfg: TrainConfig) -> tuple[list[dict], int]:
    """Epoch loop with patience-based early stopping on the validation
    metric; the best-metric trainable parameters are restored at the end."""
    if not splits.train:
        raise ConfigError("empty training split")
    if not splits.val:
        raise ConfigError("empty validation split")
    weights = None
    if task.loss == "weighted_bce":
        weights = pos_weights(class_statistics(splits.train, task.kind))
    val_batches = make_batches(splits.val, vocab, cfg.max_len, task.kind,
                               cfg.batch_size)
    rng = np.random.default_rng(cfg.seed)
    state: AdamState = {}
    steps_per_epoch = math.ceil(len(splits.train) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    trainable = [(n, bank.params[n]) for n in bank.params.trainable_names()]
    t = 0
    best_metric = -math.inf
    best_epoch = 0
    best_snapshot: dict[str, np.ndarray] = {}
    history: list[dict] = []
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(len(splits.train))
        epoch_examples = [splits.train[i] for i in perm]
        epoch_loss = 0.0
        for batch in make_batches(epoch_examples, vocab, cfg.max_len,
                                  task.kind, cfg.batch_size):
            t += 1
            lr_t = lr_schedule(t - 1, total_steps, cfg.lr, cfg.warmup_steps)
            bank.params.zero_grad()
            loss = _batch_loss(bank, task, batch, weights, cfg)
            value = float(loss.data.reshape(-1)[0])
            if not math.isfinite(value):
                raise NumericalDivergenceError(
                    f"non-finite loss {value} at epoch {epoch} step {t} "
                    f"(lr {lr_t:g}, task {task.name})")
            backward(loss)
            adamw_step(trainable, state, t, lr_t, cfg)
            epoch_loss += value
        val_report = evaluate_model(bank, task, val_batches, cfg.threshold,
                                    split="val", seed=cfg.seed)
        if cfg.metric_for_early_stop is not None:
            metric = val_report.overall[cfg.metric_for_early_stop]
        else:
            metric = early_stop_metric(val_report)
        history.append({"epoch": epoch,
                        "train_loss": epoch_loss / steps_per_epoch,
                        "val_metric": metric})
        if metric > best_metric:
            best_metric = metric
            best_epoch = epoch
            best_snapshot = {n: p.data.copy() for n, p in trainable}
        elif epoch - best_epoch >= cfg.patience:
            break
    for n, p in trainable:
        p.data = best_snapshot[n].copy()
    return history, best_epoch


def train_adapter(task: TaskSpec, splits: Splits, model_config: ModelConfig,
                  cfg: TrainConfig, vocab: Vocabulary | None = None) -> TrainResult:
    """Stage 1: one task adapter plus its head, encoder frozen."""
    if not splits.train or not splits.val:
        raise ConfigError("training needs non-empty train and val splits")
    if vocab is None:
        vocab = build_vocab(splits.train, cfg.vocab_size)
    config = model_config.with_vocab(len(vocab))
    bank = AdapterBank(config, heads={task.name: task.num_labels},
                       adapter_tasks=[task.name], seed=cfg.seed)
    bank.attach("single", task.name)
    bank.set_trainable("adapter", task.name)
    history, best_epoch = fit(bank, task, splits, vocab, cfg)
    return _finish(bank, task, splits, vocab, cfg, history, best_epoch,
                   stage=f"adapter:{task.name}")


def train_full(task: TaskSpec, splits: Splits, model_config: ModelConfig,
               cfg: TrainConfig, vocab: Vocabulary | None = None) -> TrainResult:
    """Whole-encoder fine-tuning with no adapter slot (baseline analog)."""
    if not splits.train or not splits.val:
        raise ConfigError("training needs non-empty train and val splits")
    if vocab is None:
        vocab = build_vocab(splits.train, cfg.vocab_size)
    config = model_config.with_vocab(len(vocab))
    bank = AdapterBank(config, heads={task.name: task.num_labels}, seed=cfg.seed)
    bank.attach("none")
    bank.set_trainable("finetune", task.name)
    history, best_epoch = fit(bank, task, splits, vocab, cfg)
    return _finish(bank, task, splits, vocab, cfg, history, best_epoch,
                   stage=f"finetune:{task.name}")


def train_fusion(target_task: TaskSpec, adapter_checkpoints: list[Checkpoint],
                 splits: Splits, cfg: TrainConfig) -> TrainResult:
    """Stage 2: fusion attention plus the target head train; the encoder and
    every single adapter stay bit-identical to their checkpoints."""
    if not adapter_checkpoints:
        raise ConfigError("fusion training needs at least one adapter checkpoint")
    base = adapter_checkpoints[0].meta
    tasks = []
    for ckpt in adapter_checkpoints:
        if ckpt.meta.get("model_config") != base.get("model_config"):
            raise CheckpointError("adapter checkpoints disagree on model config")
        if ckpt.meta.get("vocab") != base.get("vocab"):
            raise CheckpointError("adapter checkpoints disagree on vocabulary")
        ckpt_tasks = ckpt.meta.get("adapter_tasks", [])
        if len(ckpt_tasks) != 1:
            raise CheckpointError(
                f"expected a single-adapter checkpoint, found tasks {ckpt_tasks}")
        tasks.append(ckpt_tasks[0])
    if len(set(tasks)) != len(tasks):
        raise CheckpointError(f"duplicate adapter tasks across checkpoints: {tasks}")
    config = ModelConfig.from_dict(base["model_config"])
    vocab = Vocabulary(base.get("vocab", []))
    bank = AdapterBank(config, heads={target_task.name: target_task.num_labels},
                       adapter_tasks=tasks, with_fusion=True, seed=cfg.seed)
    encoder_names = bank.groups.groups["encoder"]
    load_into_bank(bank, adapter_checkpoints[0], encoder_names)
    for ckpt, task_name in zip(adapter_checkpoints, tasks):
        for name in encoder_names:
            if not np.array_equal(ckpt.tensors[name],
                                  adapter_checkpoints[0].tensors[name]):
                raise CheckpointError(
                    f"adapter checkpoints carry different encoder weights "
                    f"(first differs at {name!r})")
        adapter_names = [n for n in ckpt.tensors
                         if n.startswith(f"adapters.{task_name}.")]
        load_into_bank(bank, ckpt, adapter_names)
    bank.attach("fusion", tasks)
    bank.set_trainable("fusion", target_task.name)
    history, best_epoch = fit(bank, target_task, splits, vocab, cfg)
    return _finish(bank, target_task, splits, vocab, cfg, history, best_epoch,
                   stage=f"fusion:{target_task.name}")


def _finish(bank: AdapterBank, task: TaskSpec, splits: Splits,
            vocab: Vocabulary, cfg: TrainConfig, history: list[dict],
            best_epoch: int, stage: str) -> TrainResult:
    val_batches = make_batches(splits.val, vocab, cfg.max_len, task.kind,
                               cfg.batch_size)
    val_report = evaluate_model(bank, task, val_batches, cfg.threshold,
                                split="val", seed=cfg.seed)
    test_report = None
    if splits.test:
        test_batches = make_batches(splits.test, vocab, cfg.max_len, task.kind,
                                    cfg.batch_size)
        test_report = evaluate_model(bank, task, test_batches, cfg.threshold,
                                     split="test", seed=cfg.seed)
    ckpt = checkpoint_from_bank(
        bank, seed=cfg.seed, stage=stage, vocab=vocab,
        extra_meta={"task": task.name, "task_kind": task.kind,
                    "loss": task.loss, "train_config": cfg.to_dict()})
    return TrainResult(bank=bank, vocab=vocab, task=task, history=history,
                       best_epoch=best_epoch, val_report=val_report,
                       test_report=test_report, checkpoint=ckpt)


def bank_from_checkpoint(ckpt: Checkpoint) -> tuple[AdapterBank, Vocabulary, TaskSpec]:
    """Rebuild a model (with its slot wiring) from a saved checkpoint."""
    meta = ckpt.meta
    for key in ("model_config", "heads", "stage", "task", "task_kind"):
        if key not in meta:
            raise CheckpointError(f"checkpoint meta is missing {key!r}")
    config = ModelConfig.from_dict(meta["model_config"])
    bank = AdapterBank(config, heads=dict(meta["heads"]),
                       adapter_tasks=list(meta.get("adapter_tasks", [])),
                       with_fusion=bool(meta.get("with_fusion", False)),
                       seed=int(meta.get("seed", 0)))
    load_into_bank(bank, ckpt)
    stage = meta["stage"]
    if stage.startswith("adapter:"):
        bank.attach("single", stage.split(":", 1)[1])
    elif stage.startswith("fusion:"):
        bank.attach("fusion", bank.adapter_tasks)
    else:
        bank.attach("none")
    vocab = Vocabulary(meta.get("vocab", []))
    task = TaskSpec(name=meta["task"], kind=meta["task_kind"],
                    loss=meta.get("loss", "bce"))
    return bank, vocab, task


# ---------------------------------------------------------------------------
# multi-run averaging
# ---------------------------------------------------------------------------

def run_parallelism() -> int:
    raw = os.environ.get("FUSEFORMER_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run_experiment(cfg: TrainConfig,
                   run_fn: Callable[[int], MetricsReport]
                   ) -> tuple[list[MetricsReport], MetricsReport]:
    """Execute ``runs`` seeded replicas (seed, seed+1, ...) and average.

    Replicas are independent model instances; FUSEFORMER_THREADS caps how
    many execute concurrently.
    """
    seeds = [cfg.seed + i for i in range(cfg.runs)]
    workers = min(run_parallelism(), len(seeds))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(run_fn, seeds))
    else:
        reports = [run_fn(s) for s in seeds]
    return reports, aggregate_reports(reports)


def seeded(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=seed)
