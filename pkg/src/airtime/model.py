"""Encoder-CRF flight tagger and its classification-head variant.

Labels are ``O=0, B=1, I=2, E=3``. Transition matrices carry two virtual
states after the K real ones: ``START = K`` and ``STOP = K + 1``, so a path
``y`` scores

    A[START, y_0] + sum_t C[t, y_t] + sum_t A[y_t, y_{t+1}] + A[y_{T-1}, STOP].

The model hard-masks transitions outside O->O, O->B, B->I, I->I, I->E, E->O
(start in {O, B}, stop from {O, E}) with ``FORBIDDEN``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import numerics as nx
from .dataset import B, E, I, O, is_valid_tags
from .embedding import EmbeddingConfig, gcn_forward, init_gcn, positional_encoding
from .numerics import Parameter, ShapeError, Tensor

K = 4
FORBIDDEN = -1e9


class ModelConfigError(ValueError):
    pass


class LabelError(ValueError):
    """Gold tags violate the transition grammar."""


def grammar_mask(k: int = K) -> np.ndarray:
    """Boolean ``(K+2, K+2)`` matrix of allowed transitions."""
    start, stop = k, k + 1
    allowed = np.zeros((k + 2, k + 2), dtype=bool)
    for a, b in [(O, O), (O, B), (B, I), (I, I), (I, E), (E, O)]:
        allowed[a, b] = True
    allowed[start, O] = allowed[start, B] = True
    allowed[O, stop] = allowed[E, stop] = True
    return allowed


ALLOWED = grammar_mask()


def masked_transitions(raw: np.ndarray) -> np.ndarray:
    return np.where(ALLOWED, raw, FORBIDDEN)


# ------------------------------------------------------------------ CRF core
# Plain-array routines for one sequence; C is (T, K), A is (K+2, K+2).


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def crf_score(C: np.ndarray, y: Sequence[int], A: np.ndarray) -> float:
    C = np.asarray(C, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    k = C.shape[1]
    y = np.asarray(y, dtype=np.int64)
    if len(y) != len(C):
        raise ShapeError(f"crf_score: {len(y)} labels for {len(C)} frames")
    s = A[k, y[0]] + C[np.arange(len(y)), y].sum() + A[y[:-1], y[1:]].sum() + A[y[-1], k + 1]
    return float(s)


def crf_forward(C: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Log forward variables ``alpha`` of shape (T, K)."""
    T, k = C.shape
    alpha = np.empty((T, k))
    alpha[0] = A[k, :k] + C[0]
    trans = A[:k, :k]
    for t in range(1, T):
        alpha[t] = _lse(alpha[t - 1][:, None] + trans, axis=0) + C[t]
    return alpha


def crf_log_partition(C: np.ndarray, A: np.ndarray) -> float:
    C = np.asarray(C, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    k = C.shape[1]
    alpha = crf_forward(C, A)
    return float(_lse(alpha[-1] + A[:k, k + 1], axis=0))


def crf_nll(C: np.ndarray, y: Sequence[int], A: np.ndarray) -> float:
    return crf_log_partition(C, A) - crf_score(C, y, A)


class LabelPath(NamedTuple):
    y: np.ndarray
    score: float


def viterbi_decode(C: np.ndarray, A: np.ndarray) -> LabelPath:
    """Highest-scoring path; ties go to the lowest label index at every backtrack step."""
    C = np.asarray(C, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    T, k = C.shape
    trans = A[:k, :k]
    delta = A[k, :k] + C[0]
    back = np.zeros((T, k), dtype=np.int64)
    for t in range(1, T):
        cand = delta[:, None] + trans
        back[t] = np.argmax(cand, axis=0)
        delta = cand[back[t], np.arange(k)] + C[t]
    final = delta + A[:k, k + 1]
    y = np.empty(T, dtype=np.int64)
    y[-1] = int(np.argmax(final))
    for t in range(T - 1, 0, -1):
        y[t - 1] = back[t, y[t]]
    # rescored along the path so the value matches crf_score bit for bit
    return LabelPath(y, crf_score(C, y, A))


def crf_marginals(C: np.ndarray, A: np.ndarray):
    """Return ``(log_z, unary (T,K), pairwise (T-1,K,K))`` posterior marginals."""
    T, k = C.shape
    trans = A[:k, :k]
    alpha = crf_forward(C, A)
    beta = np.empty((T, k))
    beta[-1] = A[:k, k + 1]
    for t in range(T - 2, -1, -1):
        beta[t] = _lse(trans + (C[t + 1] + beta[t + 1])[None, :], axis=1)
    log_z = float(_lse(alpha[-1] + A[:k, k + 1], axis=0))
    unary = np.exp(alpha + beta - log_z)
    pairwise = np.exp(
        alpha[:-1, :, None] + trans[None] + (C[1:] + beta[1:])[:, None, :] - log_z
    )
    return log_z, unary, pairwise


def crf_batch_marginals(Cb: np.ndarray, A: np.ndarray, lengths: Sequence[int]):
    """Forward-backward over a right-padded batch ``(B, T, K)``.

    Returns ``(log_z (B,), unary (B, T, K), pairwise (B, T-1, K, K))`` with
    zeros at and beyond each sequence's length.
    """
    Bn, T, k = Cb.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    trans = A[:k, :k]
    stop = A[:k, k + 1]
    t_idx = np.arange(T)
    valid = t_idx[None, :] < lengths[:, None]  # (B, T)
    alpha = np.empty((Bn, T, k))
    alpha[:, 0] = A[k, :k] + Cb[:, 0]
    for t in range(1, T):
        step = _lse(alpha[:, t - 1, :, None] + trans[None], axis=1) + Cb[:, t]
        alpha[:, t] = np.where(valid[:, t, None], step, alpha[:, t - 1])
    last = alpha[np.arange(Bn), lengths - 1]
    log_z = _lse(last + stop[None], axis=1)
    beta = np.zeros((Bn, T, k))
    for t in range(T - 1, -1, -1):
        if t < T - 1:
            step = _lse(trans[None] + (Cb[:, t + 1] + beta[:, t + 1])[:, None, :], axis=2)
            beta[:, t] = np.where(valid[:, t + 1, None], step, 0.0)
        beta[:, t] = np.where((lengths == t + 1)[:, None], stop[None], beta[:, t])
    unary = np.exp(alpha + beta - log_z[:, None, None]) * valid[:, :, None]
    pairwise = np.exp(
        alpha[:, :-1, :, None] + trans[None, None] + (Cb[:, 1:] + beta[:, 1:])[:, :, None, :]
        - log_z[:, None, None, None]
    ) * valid[:, 1:, None, None]
    return log_z, unary, pairwise


def crf_nll_op(emissions: Tensor, transitions: Tensor, tags: np.ndarray, lengths: Sequence[int]) -> Tensor:
    """Per-sequence negative log-likelihood ``(B,)`` with analytic gradients.

    ``emissions`` is ``(B, T, K)``; frames at or beyond ``lengths[b]`` are
    ignored. The gradient w.r.t. emissions is (posterior - gold one-hot) and
    w.r.t. transitions is (expected - observed) transition counts.
    """
    Cb = emissions.data
    A = transitions.data
    Bn, T, k = Cb.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    tags = np.asarray(tags, dtype=np.int64)
    log_z, unary, pairwise = crf_batch_marginals(Cb, A, lengths)
    valid = np.arange(T)[None, :] < lengths[:, None]
    rows = np.arange(Bn)
    gold_onehot = np.zeros_like(Cb)
    gold_onehot[rows[:, None], np.arange(T)[None, :], tags] = 1.0
    gold_onehot *= valid[:, :, None]
    first = tags[:, 0]
    last = tags[rows, lengths - 1]
    gold_pairs = np.zeros((Bn,) + A.shape)
    pair_valid = valid[:, 1:]
    bi, ti = np.nonzero(pair_valid)
    np.add.at(gold_pairs, (bi, tags[bi, ti], tags[bi, ti + 1]), 1.0)
    gold_pairs[rows, k, first] += 1.0
    gold_pairs[rows, last, k + 1] += 1.0
    gold = (Cb * gold_onehot).sum(axis=(1, 2)) + (gold_pairs * A[None]).sum(axis=(1, 2))
    out = log_z - gold
    grads_c = unary - gold_onehot
    expected = np.zeros((Bn,) + A.shape)
    expected[:, :k, :k] = pairwise.sum(axis=1)
    expected[:, k, :k] = unary[:, 0]
    expected[:, :k, k + 1] = unary[rows, lengths - 1]
    grads_a = expected - gold_pairs

    def backward(g):
        if emissions.requires_grad:
            emissions._accumulate(grads_c * g[:, None, None])
        if transitions.requires_grad:
            transitions._accumulate(np.tensordot(g, grads_a, axes=1))

    return nx._node(out, (emissions, transitions), backward)


# ------------------------------------------------------------------- config


@dataclass(frozen=True)
class ModelConfig:
    H: int = 64
    heads: int = 4
    ffn: int | None = None
    layers: int = 2
    dropout: float = 0.1
    gcn_layers: int = 2
    embedding: str = "gcn"  # "gcn" or "fixed"
    fixed_width: int = 16
    head: str = "crf"  # "crf" or "classification"
    n_classes: int = 3

    def __post_init__(self):
        if self.embedding not in ("gcn", "fixed"):
            raise ModelConfigError(f"unknown embedding {self.embedding!r}")
        if self.head not in ("crf", "classification"):
            raise ModelConfigError(f"unknown head {self.head!r}")
        if self.embedding == "fixed" and self.H != self.fixed_width:
            raise ModelConfigError(f"fixed embeddings of width {self.fixed_width} need H={self.fixed_width}")
        if self.H <= 0 or self.heads <= 0 or self.H % self.heads:
            raise ModelConfigError(f"H={self.H} must be a positive multiple of heads={self.heads}")
        if self.H % 2:
            raise ModelConfigError("H must be even for the positional encoding")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelConfigError("dropout must be in [0, 1)")
        if self.head == "classification" and self.n_classes < 2:
            raise ModelConfigError("classification needs at least two classes")

    @property
    def ffn_width(self) -> int:
        return self.ffn or 4 * self.H

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ encoder


def _linear_params(rng, name: str, n_in: int, n_out: int) -> dict[str, Parameter]:
    w = Parameter(f"{name}.weight", Tensor(nx.uniform_fan_in(rng, (n_in, n_out), n_in), requires_grad=True))
    b = Parameter(f"{name}.bias", Tensor(np.zeros(n_out), requires_grad=True))
    return {w.name: w, b.name: b}


def _ln_params(name: str, n: int) -> dict[str, Parameter]:
    g = Parameter(f"{name}.gain", Tensor(np.ones(n), requires_grad=True))
    b = Parameter(f"{name}.bias", Tensor(np.zeros(n), requires_grad=True))
    return {g.name: g, b.name: b}


def init_encoder(rng, config: ModelConfig) -> dict[str, Parameter]:
    H, F = config.H, config.ffn_width
    params = {}
    for layer in range(config.layers):
        p = f"encoder.{layer}"
        for proj in ("query", "key", "value", "out"):
            params.update(_linear_params(rng, f"{p}.attn.{proj}", H, H))
        params.update(_ln_params(f"{p}.norm1", H))
        params.update(_linear_params(rng, f"{p}.ffn.hidden", H, F))
        params.update(_linear_params(rng, f"{p}.ffn.out", F, H))
        params.update(_ln_params(f"{p}.norm2", H))
    return params


def _linear(params, name: str, x: Tensor) -> Tensor:
    return nx.matmul(x, params[f"{name}.weight"].tensor) + params[f"{name}.bias"].tensor


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return nx.mul(x, keep)


def encoder_forward(params: dict[str, Parameter], x: Tensor, mask: np.ndarray, config: ModelConfig,
                    rng: np.random.Generator | None = None, attention: list | None = None) -> Tensor:
    """Two (``config.layers``) post-norm self-attention blocks over ``x`` ``(B, T, H)``.

    ``mask`` is a ``(B, T)`` boolean array of valid frames; padded frames are
    excluded as keys and their own attention rows are zeroed. Passing ``rng``
    enables dropout. Attention weights are appended to ``attention`` if given.
    """
    Bn, T, H = x.shape
    if H != config.H:
        raise ShapeError(f"encoder_forward: width {H} != configured {config.H}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (Bn, T):
        raise ShapeError(f"encoder_forward: mask {mask.shape} for input {x.shape}")
    h, d = config.heads, H // config.heads
    key_bias = np.where(mask, 0.0, FORBIDDEN)[:, None, None, :]
    query_keep = mask[:, None, :, None].astype(np.float64)
    for layer in range(config.layers):
        p = f"encoder.{layer}"

        def split(t: Tensor) -> Tensor:
            return t.reshape(Bn, T, h, d).transpose(0, 2, 1, 3)

        q = split(_linear(params, f"{p}.attn.query", x))
        k = split(_linear(params, f"{p}.attn.key", x))
        v = split(_linear(params, f"{p}.attn.value", x))
        scores = nx.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d)) + key_bias
        weights = nx.softmax(scores) * query_keep
        if attention is not None:
            attention.append(weights.data)
        ctx = nx.matmul(weights, v).transpose(0, 2, 1, 3).reshape(Bn, T, H)
        attn_out = _dropout(_linear(params, f"{p}.attn.out", ctx), config.dropout, rng)
        x = nx.layer_norm(x + attn_out, params[f"{p}.norm1.gain"].tensor, params[f"{p}.norm1.bias"].tensor)
        hidden = nx.relu(_linear(params, f"{p}.ffn.hidden", x))
        ffn_out = _dropout(_linear(params, f"{p}.ffn.out", hidden), config.dropout, rng)
        x = nx.layer_norm(x + ffn_out, params[f"{p}.norm2.gain"].tensor, params[f"{p}.norm2.bias"].tensor)
    return x


# -------------------------------------------------------------------- heads


def emit(params: dict[str, Parameter], reps: Tensor) -> Tensor:
    """Project representations ``(..., H)`` to label scores ``(..., K)``."""
    return _linear(params, "emission", reps)


def classify_forward(params: dict[str, Parameter], reps: Tensor, mask: np.ndarray) -> Tensor:
    """Mean-pool valid frames of ``(B, T, H)`` and map to class logits ``(B, n_classes)``."""
    mask = np.asarray(mask, dtype=np.float64)
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise LabelError("classification needs at least one valid frame per sequence")
    pooled = nx.tsum(reps * mask[:, :, None], axis=1) * (1.0 / counts)[:, None]
    return _linear(params, "classifier", pooled)


# -------------------------------------------------------------------- model


@dataclass
class Batch:
    """Right-padded inputs for ``B`` sequences of up to ``T`` frames."""

    video_ids: list[str]
    mask: np.ndarray  # (B, T) bool
    poses: np.ndarray | None = None  # (B, T, 17, 2) normalized
    partitions: np.ndarray | None = None  # (B, T, 3, 17, 17)
    embeddings: np.ndarray | None = None  # (B, T, fixed_width)
    tags: np.ndarray | None = None  # (B, T) int, padded with O
    labels: np.ndarray | None = None  # (B,) int class ids
    fps: np.ndarray | None = None

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1).astype(np.int64)

    def __len__(self) -> int:
        return len(self.video_ids)


@dataclass
class AirTimeModel:
    config: ModelConfig
    params: dict[str, Parameter] = field(default_factory=dict)

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "AirTimeModel":
        """Uniform fan-in weights from the Philox stream ``(seed, 1)``; zero biases and transitions."""
        rng = nx.make_rng(seed, 1)
        params: dict[str, Parameter] = {}
        if config.embedding == "gcn":
            params.update(init_gcn(rng, EmbeddingConfig(config.H, config.gcn_layers, config.fixed_width)))
        params.update(init_encoder(rng, config))
        model = cls(config, params)
        model.reset_head(seed)
        return model

    def reset_head(self, seed: int) -> None:
        """Drop any head parameters and initialise the one ``config.head`` names."""
        for name in [n for n in self.params if n.split(".")[0] in ("emission", "transitions", "classifier")]:
            del self.params[name]
        rng = nx.make_rng(seed, 2)
        if self.config.head == "crf":
            self.params.update(_linear_params(rng, "emission", self.config.H, K))
            self.params["transitions"] = Parameter(
                "transitions", Tensor(np.zeros((K + 2, K + 2)), requires_grad=True)
            )
        else:
            self.params.update(_linear_params(rng, "classifier", self.config.H, self.config.n_classes))

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.tensor.grad = None

    def trainable_count(self) -> int:
        return sum(p.tensor.data.size for p in self.params.values() if p.trainable)

    # forward pieces

    def embed(self, batch: Batch) -> Tensor:
        if self.config.embedding == "gcn":
            if batch.poses is None or batch.partitions is None:
                raise ShapeError("GCN embedding needs poses and partitions in the batch")
            x = gcn_forward(self.params, batch.poses, batch.partitions)
        else:
            if batch.embeddings is None:
                raise ShapeError("fixed embedding mode needs precomputed embeddings in the batch")
            x = Tensor(batch.embeddings)
        T = batch.mask.shape[1]
        return x + positional_encoding(T, self.config.H)[None]

    def represent(self, batch: Batch, rng: np.random.Generator | None = None) -> Tensor:
        return encoder_forward(self.params, self.embed(batch), batch.mask, self.config, rng)

    def transitions(self) -> Tensor:
        raw = self.params["transitions"].tensor
        return raw * ALLOWED.astype(np.float64) + np.where(ALLOWED, 0.0, FORBIDDEN)

    def emissions(self, batch: Batch, rng=None) -> Tensor:
        return emit(self.params, self.represent(batch, rng))

    def sequence_nll(self, batch: Batch, rng=None) -> Tensor:
        """Per-sequence CRF NLL ``(B,)``."""
        if batch.tags is None:
            raise LabelError("batch has no gold tags")
        for b, n in enumerate(batch.lengths):
            if not is_valid_tags(batch.tags[b, :n]):
                raise LabelError(f"{batch.video_ids[b]}: gold tags violate the O->B->I->E->O grammar")
        return crf_nll_op(self.emissions(batch, rng), self.transitions(), batch.tags, batch.lengths)

    def loss(self, batch: Batch, rng=None) -> Tensor:
        """Mean over the batch of per-frame loss (NLL / length, or class cross-entropy)."""
        if self.config.head == "crf":
            per_seq = self.sequence_nll(batch, rng) * (1.0 / batch.lengths)
            return per_seq.mean()
        logits = classify_forward(self.params, self.represent(batch, rng), batch.mask)
        logp = nx.log_softmax(logits)
        picked = logp[np.arange(len(batch)), batch.labels]
        return -picked.mean()

    def decode(self, batch: Batch) -> list[np.ndarray]:
        if self.config.head != "crf":
            raise ModelConfigError("decode needs the CRF head")
        C = self.emissions(batch).data
        A = self.transitions().data
        return [viterbi_decode(C[b, :n], A).y for b, n in enumerate(batch.lengths)]

    def class_logits(self, batch: Batch) -> np.ndarray:
        return classify_forward(self.params, self.represent(batch), batch.mask).data

    def predict_classes(self, batch: Batch) -> np.ndarray:
        return np.argmax(self.class_logits(batch), axis=1)
