"""Deterministic SGD training of the two-branch model, with checkpoints."""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .data import Dataset, sample_batch
from .losses import CompressionMap, LossConfig
from .metrics import arithmetic_mean_acc, harmonic_mean_acc, per_class_accuracy
from .model import ModelParams, backward, init_params, predict, sgd_step

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class CompressionConfig:
    enabled: bool = False
    trigger_epoch_fraction: float = 0.5
    accuracy_threshold: float = 0.2
    low_factor: float = 0.005
    # False: classes below the threshold keep 1, the rest get low_factor.
    # True: the reverse assignment.
    invert: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.trigger_epoch_fraction < 1.0:
            raise ValueError("trigger_epoch_fraction must lie in (0, 1)")
        if not self.low_factor > 0:
            raise ValueError("low_factor must be positive")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    loss_config: LossConfig = field(default_factory=LossConfig)
    compression: CompressionConfig = field(default_factory=CompressionConfig)
    jitter_sigma: float = 0.1
    hidden_dim: int = 64
    feat_dim: int = 32
    embed_dim: int = 16

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class EpochRecord:
    epoch: int
    total_loss: float
    classifier_loss: float
    contrastive_loss: float
    val_arithmetic: float
    val_harmonic: float
    factors: list[float]


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self) -> str:
        lines = ["epoch,total_loss,classifier_loss,contrastive_loss,"
                 "val_arithmetic,val_harmonic,factors"]
        for r in self.records:
            lines.append(",".join([
                str(r.epoch), repr(r.total_loss), repr(r.classifier_loss),
                repr(r.contrastive_loss), repr(r.val_arithmetic), repr(r.val_harmonic),
                " ".join(repr(f) for f in r.factors),
            ]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> TrainHistory:
        records = []
        for line in text.splitlines()[1:]:
            if not line:
                continue
            e, tot, c, k, va, vh, fac = line.split(",")
            records.append(EpochRecord(int(e), float(tot), float(c), float(k), float(va),
                                       float(vh), [float(f) for f in fac.split()]))
        return cls(records)


def trigger_epoch(total_epochs: int, fraction: float) -> int:
    return int(math.floor(total_epochs * fraction))


def compression_schedule(epoch: int, total_epochs: int, val_per_class_accuracy,
                         cfg: CompressionConfig) -> CompressionMap:
    """Per-class compression factors for ``epoch``.

    Before the trigger epoch every factor is 1. From the trigger on, classes
    scoring below ``accuracy_threshold`` keep factor 1 and all others get
    ``low_factor`` (swapped when ``cfg.invert``). The trainer reads the
    validation accuracies once, at the trigger epoch, and freezes the map.
    """
    acc = np.asarray(val_per_class_accuracy, dtype=np.float64)
    if np.any((acc < 0) | (acc > 1)):
        raise ValueError("accuracies must lie in [0, 1]")
    if not cfg.enabled or epoch < trigger_epoch(total_epochs, cfg.trigger_epoch_fraction):
        return CompressionMap.identity(acc.size)
    below = acc < cfg.accuracy_threshold
    compressed = below if cfg.invert else ~below
    return CompressionMap(np.where(compressed, cfg.low_factor, 1.0))


@dataclass
class TrainState:
    """Everything needed to resume training bit-identically."""

    params: ModelParams
    velocity: ModelParams
    epoch: int
    rng_state: dict
    factors: NDArray[np.float64] | None
    history: TrainHistory


def _rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    init_seq, sample_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_seq), np.random.default_rng(sample_seq)


def initial_state(dataset: Dataset, config: TrainConfig) -> TrainState:
    init_rng, sample_rng = _rngs(config.seed)
    params = init_params(dataset.input_dim, dataset.num_classes, init_rng,
                         hidden_dim=config.hidden_dim, feat_dim=config.feat_dim,
                         embed_dim=config.embed_dim)
    return TrainState(params, params.zeros_like(), 0, sample_rng.bit_generator.state,
                      None, TrainHistory())


def evaluate_accuracy(params: ModelParams, dataset: Dataset) -> NDArray[np.float64]:
    return per_class_accuracy(predict(params, dataset.features), dataset.labels,
                              dataset.num_classes)


def train(dataset: Dataset, val_dataset: Dataset, config: TrainConfig
          ) -> tuple[ModelParams, TrainHistory]:
    state = fit(dataset, val_dataset, config)
    return state.params, state.history


def fit(dataset: Dataset, val_dataset: Dataset, config: TrainConfig,
        state: TrainState | None = None, *, stop_after: int | None = None) -> TrainState:
    """Run (or resume from ``state``) training up to ``config.epochs``.

    ``stop_after`` ends the run early after that many total epochs, leaving
    a state that can be checkpointed and resumed. Raises
    :class:`TrainingDiverged` as soon as a step's total loss is not finite.
    """
    if (val_dataset.num_classes, val_dataset.input_dim) != (dataset.num_classes,
                                                            dataset.input_dim):
        raise ValueError("training and validation sets must share L and D")
    if state is None:
        state = initial_state(dataset, config)
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state
    counts = dataset.class_counts
    batch_size = min(config.batch_size, len(dataset))
    steps = math.ceil(len(dataset) / batch_size)
    last = config.epochs if stop_after is None else min(config.epochs, stop_after)
    L = dataset.num_classes
    params, velocity = state.params, state.velocity
    history, factors = TrainHistory(list(state.history.records)), state.factors

    for epoch in range(state.epoch, last):
        if (config.compression.enabled and factors is None and epoch
                >= trigger_epoch(config.epochs, config.compression.trigger_epoch_fraction)):
            acc = evaluate_accuracy(params, val_dataset)
            factors = compression_schedule(epoch, config.epochs, acc,
                                           config.compression).factors
        cmap = CompressionMap(factors) if factors is not None else None
        sums = np.zeros(3)
        for step in range(steps):
            batch = sample_batch(dataset, batch_size, rng, config.jitter_sigma)
            grads, parts = backward(params, batch, config.loss_config, counts, cmap)
            if not math.isfinite(parts.total):
                raise TrainingDiverged(
                    f"non-finite total loss at epoch {epoch}, step {step}")
            params, velocity = sgd_step(params, grads, velocity, config.learning_rate,
                                        config.momentum, config.weight_decay)
            sums += (parts.total, parts.classifier, parts.contrastive)
        means = sums / steps
        val_acc = evaluate_accuracy(params, val_dataset)
        history.records.append(EpochRecord(
            epoch=epoch,
            total_loss=float(means[0]),
            classifier_loss=float(means[1]),
            contrastive_loss=float(means[2]),
            val_arithmetic=arithmetic_mean_acc(val_acc),
            val_harmonic=harmonic_mean_acc(val_acc),
            factors=[float(f) for f in (factors if factors is not None else np.ones(L))],
        ))

    return TrainState(params, velocity, max(state.epoch, last), rng.bit_generator.state,
                      factors, history)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _zip_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    # fixed timestamp so identical states produce identical files
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    """Write a zip of ``.npy`` tensors plus a JSON manifest."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "epoch": state.epoch,
        "rng_state": state.rng_state,
        "factors": None if state.factors is None else [float(f) for f in state.factors],
        "history": [asdict(r) for r in state.history.records],
    }
    with zipfile.ZipFile(path, "w") as zf:
        _zip_entry(zf, "meta.json", json.dumps(meta, sort_keys=True).encode())
        for name, arr in state.params.named():
            _zip_entry(zf, f"params/{name}.npy", _npy_bytes(arr))
        for name, arr in state.velocity.named():
            _zip_entry(zf, f"velocity/{name}.npy", _npy_bytes(arr))


def load_checkpoint(path: str | Path) -> TrainState:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
        groups: dict[str, dict[str, np.ndarray]] = {"params": {}, "velocity": {}}
        for name in zf.namelist():
            group, _, rest = name.partition("/")
            if group in groups:
                arr = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
                groups[group][rest.removesuffix(".npy")] = arr
    factors = None if meta["factors"] is None else np.array(meta["factors"], dtype=np.float64)
    history = TrainHistory([EpochRecord(**r) for r in meta["history"]])
    return TrainState(ModelParams.from_named(groups["params"]),
                      ModelParams.from_named(groups["velocity"]), meta["epoch"],
                      meta["rng_state"], factors, history)
