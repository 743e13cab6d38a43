"""Batching, training and fine-tuning loops, and the checkpoint container.

Checkpoint file layout (all integers little-endian)::

    8 bytes   magic  b"AIRTCKPT"
    u32       format version (CHECKPOINT_VERSION)
    u32       header length n, then n bytes of UTF-8 JSON (sorted keys):
              model config, train config, seed, epoch, loss history, extras
    u32       parameter count, then per parameter:
                u16 name length, UTF-8 name, u8 ndim, u32 * ndim shape,
                float64 * prod(shape) values
    u32       CRC-32 of every preceding byte
"""

from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .dataset import VideoRecord, normalize_pose
from .embedding import FixedEmbeddingTable, build_partitions
from .model import AirTimeModel, Batch, ModelConfig

log = logging.getLogger(__name__)

MAGIC = b"AIRTCKPT"
CHECKPOINT_VERSION = 1


class DataError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, loss_history: list[float]):
        super().__init__(message)
        self.loss_history = loss_history


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCompatibilityError(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-3
    epochs: int = 60
    seed: int = 0
    max_len: int = 400
    head: str = "crf"

    def __post_init__(self):
        if self.batch_size <= 0 or self.epochs < 0 or self.max_len <= 0 or self.lr < 0:
            raise ValueError(f"invalid training config {self}")
        if self.head not in ("crf", "classification"):
            raise ValueError(f"unknown head {self.head!r}")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        """Batch 128, learning rate 1e-4, 200 epochs."""
        return cls(**{"batch_size": 128, "lr": 1e-4, "epochs": 200, **overrides})


# ------------------------------------------------------------------ batching


@dataclass
class Prepared:
    """One record turned into model inputs."""

    video_id: str
    mask_len: int
    poses: np.ndarray | None
    partitions: np.ndarray | None
    embeddings: np.ndarray | None
    tags: np.ndarray
    label: int
    fps: float


def prepare(records: Sequence[VideoRecord], model_config: ModelConfig, max_len: int = 400,
            class_names: Sequence[str] | None = None,
            table: FixedEmbeddingTable | None = None) -> list[Prepared]:
    out = []
    for r in records:
        T = len(r)
        if T > max_len:
            raise DataError(
                f"{r.video_id}: {T} frames exceeds max_len {max_len}; trim or augment it into shorter clips"
            )
        label = class_names.index(r.category) if class_names else -1
        if model_config.embedding == "gcn":
            poses = normalize_pose(r.pose).frames
            parts = build_partitions(poses)
            emb = None
        else:
            if table is None:
                raise DataError("fixed embedding mode needs an embedding table")
            poses = parts = None
            emb = table.lookup(r.video_id, T)
        out.append(Prepared(r.video_id, T, poses, parts, emb, r.tags(), label, r.fps))
    return out


def collate(items: Sequence[Prepared]) -> Batch:
    """Right-pad to the longest item; padding is zero poses, O tags and mask False."""
    Bn = len(items)
    T = max(it.mask_len for it in items)
    mask = np.zeros((Bn, T), dtype=bool)
    tags = np.zeros((Bn, T), dtype=np.int64)
    poses = parts = emb = None
    if items[0].poses is not None:
        poses = np.zeros((Bn, T, 17, 2))
        parts = np.zeros((Bn, T, 3, 17, 17))
    if items[0].embeddings is not None:
        emb = np.zeros((Bn, T, items[0].embeddings.shape[1]))
    for b, it in enumerate(items):
        n = it.mask_len
        mask[b, :n] = True
        tags[b, :n] = it.tags
        if poses is not None:
            poses[b, :n] = it.poses
            parts[b, :n] = it.partitions
            # padded frames get the all-root partition of a zero pose
            parts[b, n:] = build_partitions(np.zeros((17, 2)))
        if emb is not None:
            emb[b, :n] = it.embeddings
    return Batch(
        video_ids=[it.video_id for it in items],
        mask=mask,
        poses=poses,
        partitions=parts,
        embeddings=emb,
        tags=tags,
        labels=np.array([it.label for it in items], dtype=np.int64),
        fps=np.array([it.fps for it in items]),
    )


def make_batches(items: Sequence[Prepared], batch_size: int,
                 rng: np.random.Generator | None = None) -> list[Batch]:
    """Split into batches; shuffled when a generator is given, file order otherwise."""
    order = rng.permutation(len(items)) if rng is not None else np.arange(len(items))
    return [collate([items[i] for i in order[s : s + batch_size]]) for s in range(0, len(items), batch_size)]


# ------------------------------------------------------------------ training


@dataclass
class ModelCheckpoint:
    model_config: dict
    train_config: dict
    seed: int
    epoch: int
    loss_history: list[float]
    params: dict[str, np.ndarray]
    extras: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: AirTimeModel, train_config: TrainConfig, epoch: int,
                   loss_history: Sequence[float], **extras) -> "ModelCheckpoint":
        return cls(
            model_config=model.config.to_dict(),
            train_config=asdict(train_config),
            seed=train_config.seed,
            epoch=epoch,
            loss_history=[float(x) for x in loss_history],
            params={name: p.tensor.data.copy() for name, p in model.params.items()},
            extras=dict(extras),
        )

    def to_model(self) -> AirTimeModel:
        config = ModelConfig(**self.model_config)
        model = AirTimeModel(config)
        model.params = {
            name: nx.Parameter(name, nx.Tensor(value.copy(), requires_grad=True))
            for name, value in self.params.items()
        }
        return model

    @property
    def class_names(self) -> list[str] | None:
        return self.extras.get("class_names")


def _epoch_loss(model: AirTimeModel, batches: Sequence[Batch]) -> float:
    total = sum(float(model.loss(b).data) * len(b) for b in batches)
    return total / sum(len(b) for b in batches)


def classification_accuracy(model: AirTimeModel, items: Sequence[Prepared], batch_size: int = 32) -> float:
    correct = 0
    for batch in make_batches(items, batch_size):
        correct += int(np.sum(model.predict_classes(batch) == batch.labels))
    return correct / len(items)


def train(records: Sequence[VideoRecord], config: TrainConfig, model_config: ModelConfig | None = None,
          *, model: AirTimeModel | None = None, val_records: Sequence[VideoRecord] | None = None,
          class_names: Sequence[str] | None = None, table: FixedEmbeddingTable | None = None,
          on_epoch: Callable[[int, float], None] | None = None,
          stop_at_val_accuracy: float | None = None) -> ModelCheckpoint:
    """Adam on the mean per-frame NLL (or cross-entropy), one epoch at a time.

    All randomness (shuffling, dropout) comes from the Philox stream
    ``(config.seed, 3)``; initialization uses stream ``(config.seed, 1)``.
    For the classification head ``val_records`` adds a per-epoch validation
    accuracy history to the checkpoint extras; ``stop_at_val_accuracy`` ends
    training at the first epoch reaching it. ``on_epoch(n, loss)`` is called
    after each epoch with the 1-based epoch number.
    """
    if not records:
        raise DataError("training needs at least one record")
    if model is None:
        model_config = model_config or ModelConfig(head=config.head)
        if config.head == "classification" and class_names is None:
            class_names = sorted({r.category for r in records})
        if config.head == "classification":
            model_config = replace(model_config, head="classification", n_classes=len(class_names))
        model = AirTimeModel.initialize(model_config, config.seed)
    model_config = model.config
    if model_config.head == "classification" and class_names is None:
        raise DataError("classification training needs class names")

    items = prepare(records, model_config, config.max_len, class_names, table)
    val_items = prepare(val_records, model_config, config.max_len, class_names, table) if val_records else None
    rng = nx.make_rng(config.seed, 3)
    state = nx.AdamState(lr=config.lr)
    history: list[float] = []
    val_history: list[float] = []
    epochs_run = 0
    for epoch in range(config.epochs):
        total, count = 0.0, 0
        for b_idx, batch in enumerate(make_batches(items, config.batch_size, rng)):
            model.zero_grad()
            loss = model.loss(batch, rng)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"loss became {value} at epoch {epoch}, batch {b_idx} (lr={config.lr})", history
                )
            nx.backward(loss)
            nx.adam_step(state, model.parameters())
            total += value * len(batch)
            count += len(batch)
        history.append(total / count)
        epochs_run = epoch + 1
        if on_epoch:
            on_epoch(epochs_run, history[-1])
        if val_items is not None and model_config.head == "classification":
            val_history.append(classification_accuracy(model, val_items))
            if stop_at_val_accuracy is not None and val_history[-1] >= stop_at_val_accuracy:
                break
        log.debug("epoch %d loss %.6f", epoch, history[-1])
    extras = {}
    if class_names is not None:
        extras["class_names"] = list(class_names)
    if val_history:
        extras["val_accuracy"] = val_history
    return ModelCheckpoint.from_model(model, config, epochs_run, history, **extras)


def fine_tune(checkpoint: ModelCheckpoint, records: Sequence[VideoRecord], config: TrainConfig,
              head: str = "classification", class_names: Sequence[str] | None = None,
              **kwargs) -> ModelCheckpoint:
    """Start from ``checkpoint``'s embedding and encoder, with a fresh ``head``.

    Every parameter stays trainable and the epoch counter restarts at 0.
    """
    model = checkpoint.to_model()
    if head == "classification" and class_names is None:
        class_names = sorted({r.category for r in records})
    new_config = replace(model.config, head=head, n_classes=len(class_names) if class_names else model.config.n_classes)
    fresh = AirTimeModel.initialize(new_config, config.seed)
    for name, p in fresh.params.items():
        if name.split(".")[0] in ("emission", "transitions", "classifier"):
            continue
        if name not in model.params:
            raise CheckpointCompatibilityError(f"checkpoint has no parameter {name}")
        if model.params[name].tensor.shape != p.tensor.shape:
            raise CheckpointCompatibilityError(
                f"{name}: checkpoint shape {model.params[name].tensor.shape} vs expected {p.tensor.shape}"
            )
        p.tensor.data = model.params[name].tensor.data.copy()
    return train(records, replace(config, head=head), model=fresh, class_names=class_names, **kwargs)


# --------------------------------------------------------------- checkpoints


def dumps_checkpoint(ckpt: ModelCheckpoint) -> bytes:
    header = json.dumps(
        {
            "model_config": ckpt.model_config,
            "train_config": ckpt.train_config,
            "seed": ckpt.seed,
            "epoch": ckpt.epoch,
            "loss_history": ckpt.loss_history,
            "extras": ckpt.extras,
        },
        sort_keys=True,
    ).encode()
    parts = [MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header,
             struct.pack("<I", len(ckpt.params))]
    for name, value in ckpt.params.items():
        raw = name.encode()
        value = np.ascontiguousarray(value, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", value.ndim))
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(value.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads_checkpoint(data: bytes) -> ModelCheckpoint:
    if len(data) < 20 or data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or too short)")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint is truncated or corrupt (CRC mismatch)")
    try:
        (hlen,) = struct.unpack_from("<I", body, 12)
        pos = 16
        header = json.loads(body[pos : pos + hlen])
        pos += hlen
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        params = {}
        for _ in range(n):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * size > len(body):
                raise CheckpointError(f"parameter {name} runs past the end of the file")
            params[name] = np.frombuffer(body, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(shape)
            pos += 8 * size
        if pos != len(body):
            raise CheckpointError("trailing bytes after the parameter table")
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return ModelCheckpoint(
        model_config=header["model_config"],
        train_config=header["train_config"],
        seed=header["seed"],
        epoch=header["epoch"],
        loss_history=header["loss_history"],
        params=params,
        extras=header.get("extras", {}),
    )


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    Path(path).write_bytes(dumps_checkpoint(ckpt))


def load_checkpoint(path) -> ModelCheckpoint:
    return loads_checkpoint(Path(path).read_bytes())
