"""Per-frame skeleton embeddings: a spatial graph convolution over the COCO
skeleton, sinusoidal positional encoding, and a frozen external-table provider.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Parameter, ShapeError, Tensor

NUM_JOINTS = 17

# COCO keypoint skeleton (0-based), the bones drawn by the COCO toolkit.
COCO_EDGES = (
    (15, 13), (13, 11), (16, 14), (14, 12), (11, 12), (5, 11), (6, 12),
    (5, 6), (5, 7), (6, 8), (7, 9), (8, 10), (1, 2), (0, 1), (0, 2),
    (1, 3), (2, 4), (3, 5), (4, 6),
)

ROOT, CENTRIPETAL, CENTRIFUGAL = 0, 1, 2


class ConfigError(ValueError):
    pass


class EmbeddingDataError(ValueError):
    pass


@dataclass(frozen=True)
class SkeletonGraph:
    num_nodes: int = NUM_JOINTS
    edges: tuple[tuple[int, int], ...] = COCO_EDGES

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes))
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a

    def normalized_augmented(self) -> np.ndarray:
        """Row-normalized ``A + I``: each node averages itself and its neighbours."""
        a = self.adjacency() + np.eye(self.num_nodes)
        return a / a.sum(axis=1, keepdims=True)

    def is_connected(self) -> bool:
        a = self.adjacency() + np.eye(self.num_nodes)
        reach = np.eye(self.num_nodes, dtype=bool)[0]
        for _ in range(self.num_nodes):
            reach = (a[reach].sum(axis=0) > 0) | reach
        return bool(reach.all())


COCO_GRAPH = SkeletonGraph()


@dataclass(frozen=True)
class EmbeddingConfig:
    H: int = 64
    gcn_layers: int = 2
    fixed_width: int = 16

    def __post_init__(self):
        if self.H <= 0 or self.gcn_layers < 1 or self.fixed_width <= 0:
            raise ConfigError(f"invalid embedding config {self}")


def build_partitions(poses: np.ndarray, graph: SkeletonGraph = COCO_GRAPH) -> np.ndarray:
    """Spatial-configuration partition matrices for each pose.

    ``poses`` has shape ``(..., 17, 2)``; the result has shape
    ``(..., 3, 17, 17)`` with ``out[..., k, r, n]`` the weight with which
    neighbour ``n`` feeds root ``r`` in subset ``k`` (root, centripetal,
    centrifugal). The subsets split the row-normalized ``A + I``: a neighbour
    whose distance to the gravity center (mean joint) equals the root's goes
    to the root subset, a nearer one to centripetal, a farther one to
    centrifugal.
    """
    poses = np.asarray(poses, dtype=np.float64)
    center = poses.mean(axis=-2, keepdims=True)
    d = np.linalg.norm(poses - center, axis=-1)
    d_root = d[..., :, None]
    d_nbr = d[..., None, :]
    norm = graph.normalized_augmented()
    masks = np.stack([d_nbr == d_root, d_nbr < d_root, d_nbr > d_root], axis=-3)
    return masks * norm


def init_gcn(rng: np.random.Generator, config: EmbeddingConfig, in_features: int = 2,
             prefix: str = "gcn") -> dict[str, Parameter]:
    params = {}
    c = in_features
    for layer in range(config.gcn_layers):
        w = f"{prefix}.{layer}.weight"
        b = f"{prefix}.{layer}.bias"
        params[w] = Parameter(w, Tensor(nx.uniform_fan_in(rng, (3 * c, config.H), 3 * c), requires_grad=True))
        params[b] = Parameter(b, Tensor(np.zeros(config.H), requires_grad=True))
        c = config.H
    return params


def gcn_forward(params: dict[str, Parameter], poses, partitions: np.ndarray,
                prefix: str = "gcn") -> Tensor:
    """Embed ``poses`` ``(B, T, 17, C)`` into ``(B, T, H)``.

    Each layer sums the three partition aggregations through separate weight
    blocks; ReLU sits between layers and the last layer is mean-pooled over
    joints. The last layer is linear, so pooling is applied to the partition
    matrices before the weight product rather than to its 17 outputs.
    """
    x = nx.as_tensor(poses)
    if x.ndim != 4 or x.shape[2] != NUM_JOINTS:
        raise ShapeError(f"gcn_forward: expected (B, T, 17, C) poses, got {x.shape}")
    if partitions.shape != x.shape[:2] + (3, NUM_JOINTS, NUM_JOINTS):
        raise ShapeError(f"gcn_forward: partitions {partitions.shape} do not match poses {x.shape}")
    n_layers = sum(1 for k in params if k.startswith(prefix + ".") and k.endswith(".weight"))
    B, T = x.shape[:2]
    stacked = Tensor(partitions.reshape(B, T, 3 * NUM_JOINTS, NUM_JOINTS))
    pooled = Tensor(partitions.mean(axis=-2))  # (B, T, 3, 17)
    for layer in range(n_layers):
        w = params[f"{prefix}.{layer}.weight"].tensor
        b = params[f"{prefix}.{layer}.bias"].tensor
        c = x.shape[-1]
        if w.shape[0] != 3 * c:
            raise ShapeError(f"gcn layer {layer}: weight {w.shape} for {c} input features")
        if layer == n_layers - 1:
            agg = nx.matmul(pooled, x).reshape(B, T, 3 * c)
            return nx.matmul(agg, w) + b
        agg = nx.matmul(stacked, x).reshape(B, T, 3, NUM_JOINTS, c)
        agg = agg.transpose(0, 1, 3, 2, 4).reshape(B, T, NUM_JOINTS, 3 * c)
        x = nx.relu(nx.matmul(agg, w) + b)


def positional_encoding(T: int, H: int) -> np.ndarray:
    """Sinusoidal table: even columns sin(t / 10000^(2k/H)), odd columns cos."""
    if H % 2:
        raise ConfigError(f"positional encoding needs an even width, got {H}")
    t = np.arange(T, dtype=np.float64)[:, None]
    freq = 10000.0 ** (np.arange(0, H, 2, dtype=np.float64) / H)
    pe = np.empty((T, H))
    pe[:, 0::2] = np.sin(t / freq)
    pe[:, 1::2] = np.cos(t / freq)
    return pe


class FixedEmbeddingTable:
    """Precomputed per-frame vectors keyed by video id, used as frozen input.

    File format: JSON Lines of ``{"video_id": str, "embeddings": [[float] * width] * T}``.
    """

    def __init__(self, table: dict[str, np.ndarray], width: int = 16):
        self.width = width
        self.table = {}
        for vid, emb in table.items():
            emb = np.asarray(emb, dtype=np.float64)
            if emb.ndim != 2 or emb.shape[1] != width:
                raise EmbeddingDataError(f"{vid}: embeddings of shape {emb.shape}, expected (T, {width})")
            self.table[vid] = emb

    @classmethod
    def load(cls, path, width: int = 16) -> "FixedEmbeddingTable":
        table = {}
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    obj = json.loads(line)
                    table[str(obj["video_id"])] = obj["embeddings"]
        return cls(table, width)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for vid, emb in self.table.items():
                fh.write(json.dumps({"video_id": vid, "embeddings": emb.tolist()}) + "\n")

    def __contains__(self, video_id: str) -> bool:
        return video_id in self.table

    def lookup(self, video_id: str, T: int) -> np.ndarray:
        return fixed_embedding_provider(T, self.table.get(video_id), self.width, video_id)


def fixed_embedding_provider(T: int, vectors, width: int = 16, video_id: str = "") -> np.ndarray:
    """Return externally supplied ``(T, width)`` vectors unchanged.

    The result is a plain array, so no gradient can ever reach the table.
    """
    if vectors is None:
        raise EmbeddingDataError(f"no fixed embeddings for video {video_id!r}")
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] != T:
        raise EmbeddingDataError(f"{video_id}: {vectors.shape[0] if vectors.ndim else 0} embedding rows for {T} frames")
    if vectors.shape[1] != width:
        raise EmbeddingDataError(f"{video_id}: embedding width {vectors.shape[1]}, expected {width}")
    return vectors
