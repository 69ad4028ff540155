"""The multi-input graph: recurrent branch over the trajectory, a dense
branch over numeric features, an embedding branch over categorical codes,
fusion, a shared dense trunk, and one or two softmax heads.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import cells, rng, tensor
from .embedding import EmbeddingSchema, EmbeddingTables, embed, embed_backward
from .errors import ContractError, DimensionError, UsageError
from .tensor import Param, activate, activate_backward

CELL_KINDS = ("rnn", "lstm", "gru", "bi_gru", "bi_lstm")
HEAD_CHOICES = ("mode", "purpose", "both")
POOLINGS = ("last", "mean")

TRAJECTORY_LEN = 70
TRAJECTORY_FEATURES = 4  # sin_time, cos_time, longitude, latitude


@dataclass(frozen=True)
class NetworkConfig:
    cell: str = "gru"
    recurrent_layers: int = 3
    recurrent_width: int = 70
    recurrent_dropout: float = 0.2
    numeric_widths: tuple[int, ...] = (256,)
    fused_widths: tuple[int, ...] = (128, 128, 128)
    trunk_widths: tuple[int, ...] = (64, 64, 64)
    trunk_dropout: float = 0.5
    heads: str = "both"
    mode_classes: int = 4
    purpose_classes: int = 6
    loss_weight_mode: float = 1.0
    loss_weight_purpose: float = 1.0
    pooling: str = "last"
    candidate_activation: str = "tanh"
    dense_activation: str = "leaky_relu"
    lstm_forget_bias_one: bool = False

    def __post_init__(self):
        if self.cell not in CELL_KINDS:
            raise ContractError(f"unknown cell kind {self.cell!r}; choose from {CELL_KINDS}")
        if self.heads not in HEAD_CHOICES:
            raise ContractError(f"unknown heads choice {self.heads!r}")
        if self.pooling not in POOLINGS:
            raise ContractError(f"unknown pooling {self.pooling!r}")
        for name in ("recurrent_layers", "recurrent_width", "mode_classes", "purpose_classes"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        for widths in (self.numeric_widths, self.fused_widths, self.trunk_widths):
            if any(w < 1 for w in widths):
                raise ContractError("dense widths must be >= 1")
        for p in (self.recurrent_dropout, self.trunk_dropout):
            if not 0.0 <= p < 1.0:
                raise ContractError(f"dropout rate {p} outside [0, 1)")
        if self.loss_weight_mode < 0 or self.loss_weight_purpose < 0:
            raise ContractError("loss weights must be >= 0")
        if max(self.loss_weight_mode, self.loss_weight_purpose) <= 0:
            raise ContractError("at least one loss weight must be positive")

    @property
    def head_names(self) -> tuple[str, ...]:
        return ("mode", "purpose") if self.heads == "both" else (self.heads,)

    def classes_for(self, head: str) -> int:
        return self.mode_classes if head == "mode" else self.purpose_classes

    def loss_weight(self, head: str) -> float:
        return self.loss_weight_mode if head == "mode" else self.loss_weight_purpose

    def to_jsonable(self) -> dict:
        out = {
            "cell": self.cell,
            "recurrent_layers": self.recurrent_layers,
            "recurrent_width": self.recurrent_width,
            "recurrent_dropout": self.recurrent_dropout,
            "numeric_widths": list(self.numeric_widths),
            "fused_widths": list(self.fused_widths),
            "trunk_widths": list(self.trunk_widths),
            "trunk_dropout": self.trunk_dropout,
            "heads": self.heads,
            "mode_classes": self.mode_classes,
            "purpose_classes": self.purpose_classes,
            "loss_weight_mode": self.loss_weight_mode,
            "loss_weight_purpose": self.loss_weight_purpose,
            "pooling": self.pooling,
            "candidate_activation": self.candidate_activation,
            "dense_activation": self.dense_activation,
            "lstm_forget_bias_one": self.lstm_forget_bias_one,
        }
        return out

    @classmethod
    def from_jsonable(cls, data: dict) -> "NetworkConfig":
        kwargs = dict(data)
        for key in ("numeric_widths", "fused_widths", "trunk_widths"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass
class DenseWeights:
    W: Param
    b: Param


def dense_create(rng_for, name, n_in, n_out) -> DenseWeights:
    return DenseWeights(
        W=Param(cells.glorot(rng_for(f"{name}.W"), n_in, n_out)),
        b=Param(np.zeros((1, n_out))),
    )


def dense_forward(dw: DenseWeights, x, activation: str):
    pre = x @ dw.W.value + dw.b.value
    out = activate(activation, pre)
    return out, (x, pre, out)


def dense_backward(dw: DenseWeights, cache, d_out, activation: str):
    x, pre, out = cache
    dpre = activate_backward(activation, d_out, x=pre, out=out)
    dw.W.grad += x.T @ dpre
    dw.b.grad += dpre.sum(axis=0, keepdims=True)
    return dpre @ dw.W.value.T


def _build_recurrent_layer(cfg: NetworkConfig, rng_for, index: int, input_size: int):
    base = cfg.cell.removeprefix("bi_")
    bidirectional = cfg.cell.startswith("bi_")
    width = cfg.recurrent_width

    def make(direction: str):
        def leaf_rng(leaf):
            return rng_for(f"rnn.l{index}.{direction}{leaf}")

        if base == "rnn":
            return cells.RnnCell.create(input_size, width, leaf_rng, cfg.candidate_activation)
        if base == "lstm":
            forget = 1.0 if cfg.lstm_forget_bias_one else 0.0
            return cells.LstmCell.create(
                input_size, width, leaf_rng, cfg.candidate_activation, forget_bias=forget
            )
        return cells.GruCell.create(input_size, width, leaf_rng, cfg.candidate_activation)

    if bidirectional:
        return cells.BidirectionalLayer(make("fwd."), make("bwd."))
    return cells.RecurrentLayer(make(""))


class NetworkWeights:
    """Every trainable parameter of the graph, addressable by name."""

    def __init__(self, cfg: NetworkConfig, schema: EmbeddingSchema, numeric_features: int, seed: int):
        self.cfg = cfg
        self.schema = schema
        self.numeric_features = numeric_features
        self.seed = seed

        def rng_for(name):
            return rng.stream(seed, f"init.{name}")

        layers = []
        in_size = TRAJECTORY_FEATURES
        for i in range(cfg.recurrent_layers):
            layer = _build_recurrent_layer(cfg, rng_for, i, in_size)
            layers.append(layer)
            in_size = layer.width
        self.stack = cells.RecurrentStack(layers, cfg.recurrent_dropout, name="rnn")

        self.embedding = EmbeddingTables.create(schema, lambda name: rng_for(f"embed.{name}"))

        self.numeric: list[DenseWeights] = []
        width = numeric_features
        for i, w in enumerate(cfg.numeric_widths):
            self.numeric.append(dense_create(rng_for, f"numeric.l{i}", width, w))
            width = w
        numeric_out = width

        self.fused: list[DenseWeights] = []
        width = numeric_out + schema.output_width
        for i, w in enumerate(cfg.fused_widths):
            self.fused.append(dense_create(rng_for, f"fused.l{i}", width, w))
            width = w
        fused_out = width

        self.trunk: list[DenseWeights] = []
        width = self.stack.width + fused_out
        for i, w in enumerate(cfg.trunk_widths):
            self.trunk.append(dense_create(rng_for, f"trunk.l{i}", width, w))
            width = w
        trunk_out = width

        self.heads: dict[str, DenseWeights] = {}
        for head in cfg.head_names:
            self.heads[head] = dense_create(rng_for, f"head.{head}", trunk_out, cfg.classes_for(head))

    def params(self) -> dict[str, Param]:
        out = dict(self.stack.params())
        out.update(self.embedding.params("embed"))
        for group, denses in (("numeric", self.numeric), ("fused", self.fused), ("trunk", self.trunk)):
            for i, dw in enumerate(denses):
                out[f"{group}.l{i}.W"] = dw.W
                out[f"{group}.l{i}.b"] = dw.b
        for head, dw in self.heads.items():
            out[f"head.{head}.W"] = dw.W
            out[f"head.{head}.b"] = dw.b
        return out

    def zero_grads(self) -> None:
        for p in self.params().values():
            p.zero_grad()

    # ---- serialization ----------------------------------------------------

    MAGIC = b"TRIPNETW"

    def save(self, path, extra_meta: dict | None = None) -> None:
        params = self.params()
        header = {
            "network": self.cfg.to_jsonable(),
            "embedding_schema": self.schema.to_jsonable(),
            "numeric_features": self.numeric_features,
            "seed": self.seed,
            "params": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
        }
        if extra_meta:
            header["meta"] = extra_meta
        header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
        body = bytearray()
        body += self.MAGIC
        body += struct.pack("<I", len(header_bytes))
        body += header_bytes
        for k in params:
            body += params[k].value.astype("<f8").tobytes(order="C")
        checksum = hashlib.sha256(bytes(body)).digest()
        with open(path, "wb") as fh:
            fh.write(bytes(body))
            fh.write(checksum)

    @classmethod
    def load(cls, path) -> "NetworkWeights":
        with open(path, "rb") as fh:
            blob = fh.read()
        if len(blob) < len(cls.MAGIC) + 4 + 32 or blob[: len(cls.MAGIC)] != cls.MAGIC:
            raise ContractError(f"{path}: not a weights container")
        body, checksum = blob[:-32], blob[-32:]
        if hashlib.sha256(body).digest() != checksum:
            raise ContractError(f"{path}: checksum mismatch, file corrupt")
        off = len(cls.MAGIC)
        (hlen,) = struct.unpack_from("<I", body, off)
        off += 4
        header = json.loads(body[off : off + hlen].decode("utf-8"))
        off += hlen
        cfg = NetworkConfig.from_jsonable(header["network"])
        schema = EmbeddingSchema.from_jsonable(header["embedding_schema"])
        weights = cls(cfg, schema, int(header["numeric_features"]), int(header["seed"]))
        params = weights.params()
        listed = header["params"]
        if [p["name"] for p in listed] != list(params.keys()):
            raise ContractError(f"{path}: parameter names do not match the config")
        for entry in listed:
            p = params[entry["name"]]
            shape = tuple(entry["shape"])
            if p.shape != shape:
                raise ContractError(
                    f"{path}: parameter {entry['name']!r} shape {shape} != expected {p.shape}"
                )
            n = shape[0] * shape[1] * 8
            p.value[...] = np.frombuffer(body[off : off + n], dtype="<f8").reshape(shape)
            off += n
        if off != len(body):
            raise ContractError(f"{path}: trailing bytes in weights container")
        weights.meta = header.get("meta", {})
        return weights


@dataclass
class Batch:
    """One minibatch of trip records in columnar form."""

    traj: np.ndarray  # (B, 70, 4)
    mask: np.ndarray  # (B, 70) bool, True = valid step
    cat: np.ndarray  # (B, n_cat) int
    num: np.ndarray  # (B, n_num) float
    mode: np.ndarray | None = None  # (B,) int, -1 = missing
    purpose: np.ndarray | None = None

    def __post_init__(self):
        if self.traj.ndim != 3 or self.traj.shape[1] != TRAJECTORY_LEN or self.traj.shape[2] != TRAJECTORY_FEATURES:
            raise ContractError(
                f"trajectory batch shape {self.traj.shape} != (B, {TRAJECTORY_LEN}, {TRAJECTORY_FEATURES})"
            )
        if self.mask.shape != self.traj.shape[:2]:
            raise DimensionError(f"mask shape {self.mask.shape} != {self.traj.shape[:2]}")

    def __len__(self):
        return self.traj.shape[0]

    def labels_for(self, head: str) -> np.ndarray:
        labels = self.mode if head == "mode" else self.purpose
        if labels is None:
            raise ContractError(f"batch carries no {head} labels")
        return labels


@dataclass
class ForwardCache:
    stack_state: object
    pooling_cache: object
    rnn_drop_mask: np.ndarray | None
    numeric_caches: list
    embed_cache: object
    fused_caches: list
    fused_drop: list
    trunk_caches: list
    trunk_drop: list
    splits: tuple  # widths of (numeric_out, embed_out) and (rnn_feat, fused_out)
    logits: dict


def _pool(cfg, stack_state, mask_tb):
    """Reduce the top layer's step outputs to one feature row per example."""
    if cfg.pooling == "last":
        return stack_state.top.final, None
    counts = np.maximum(mask_tb.sum(axis=0), 1.0)[:, None]
    total = np.zeros_like(stack_state.top.outputs[0])
    for t, h in enumerate(stack_state.top.outputs):
        total += h * mask_tb[t][:, None]
    return total / counts, counts


def _pool_backward(cfg, stack_state, mask_tb, d_feat, counts):
    T = len(stack_state.top.outputs)
    if cfg.pooling == "last":
        return [None] * T, d_feat
    d_steps = [d_feat / counts * mask_tb[t][:, None] for t in range(T)]
    return d_steps, None


def forward(cfg: NetworkConfig, weights: NetworkWeights, batch: Batch, training: bool = False, dropout=None):
    """Run the graph; returns (per-head probability rows, cache).

    cache is None in inference mode. While training with nonzero dropout
    rates, a mask source must be supplied.
    """
    if training and dropout is None and (cfg.recurrent_dropout > 0 or cfg.trunk_dropout > 0):
        raise UsageError("training-mode forward needs a dropout mask source")

    B = len(batch)
    inputs = [batch.traj[:, t, :] for t in range(TRAJECTORY_LEN)]
    mask_tb = np.ascontiguousarray(batch.mask.T)

    stack_state = weights.stack.forward(inputs, mask_tb, training, dropout)
    rnn_feat, pool_cache = _pool(cfg, stack_state, mask_tb)
    rnn_drop_mask = None
    if training and cfg.recurrent_dropout > 0.0:
        rnn_drop_mask = dropout.mask("rnn.drop.final", rnn_feat.shape, cfg.recurrent_dropout)
        rnn_feat = rnn_feat * rnn_drop_mask

    x = batch.num
    numeric_caches = []
    for dw in weights.numeric:
        x, cache = dense_forward(dw, x, cfg.dense_activation)
        numeric_caches.append(cache)
    numeric_out = x

    embed_out, embed_cache = embed(weights.embedding, batch.cat)

    fused_in = np.concatenate([numeric_out, embed_out], axis=1)
    x = fused_in
    fused_caches, fused_drop = [], []
    for i, dw in enumerate(weights.fused):
        x, cache = dense_forward(dw, x, cfg.dense_activation)
        fused_caches.append(cache)
        if training and cfg.trunk_dropout > 0.0:
            m = dropout.mask(f"fused.drop{i}", x.shape, cfg.trunk_dropout)
            x = x * m
            fused_drop.append(m)
        else:
            fused_drop.append(None)
    fused_out = x

    merged = np.concatenate([rnn_feat, fused_out], axis=1)
    x = merged
    trunk_caches, trunk_drop = [], []
    for i, dw in enumerate(weights.trunk):
        x, cache = dense_forward(dw, x, cfg.dense_activation)
        trunk_caches.append(cache)
        if training and cfg.trunk_dropout > 0.0:
            m = dropout.mask(f"trunk.drop{i}", x.shape, cfg.trunk_dropout)
            x = x * m
            trunk_drop.append(m)
        else:
            trunk_drop.append(None)
    trunk_out = x

    probs, logits = {}, {}
    for head in cfg.head_names:
        dw = weights.heads[head]
        logit = trunk_out @ dw.W.value + dw.b.value
        logits[head] = logit
        probs[head] = activate("softmax_rows", logit)

    if not training:
        return probs, None

    cache = ForwardCache(
        stack_state=stack_state,
        pooling_cache=pool_cache,
        rnn_drop_mask=rnn_drop_mask,
        numeric_caches=numeric_caches,
        embed_cache=embed_cache,
        fused_caches=fused_caches,
        fused_drop=fused_drop,
        trunk_caches=trunk_caches,
        trunk_drop=trunk_drop,
        splits=(numeric_out.shape[1], rnn_feat.shape[1]),
        logits={"trunk_out": trunk_out, "mask_tb": mask_tb},
    )
    return probs, cache


def backward(cfg: NetworkConfig, weights: NetworkWeights, cache: ForwardCache, d_logits: dict):
    """Accumulate gradients for upstream per-head logit gradients.

    Heads absent from d_logits contribute nothing (their private parameters
    keep zero gradient and the trunk receives only the remaining heads).
    """
    if cache is None:
        raise UsageError("backward requires a training-mode forward cache")
    trunk_out = cache.logits["trunk_out"]
    mask_tb = cache.logits["mask_tb"]

    d_trunk_out = np.zeros_like(trunk_out)
    for head, dlog in d_logits.items():
        dw = weights.heads[head]
        dw.W.grad += trunk_out.T @ dlog
        dw.b.grad += dlog.sum(axis=0, keepdims=True)
        d_trunk_out += dlog @ dw.W.value.T

    d = d_trunk_out
    for i in range(len(weights.trunk) - 1, -1, -1):
        if cache.trunk_drop[i] is not None:
            d = d * cache.trunk_drop[i]
        d = dense_backward(weights.trunk[i], cache.trunk_caches[i], d, cfg.dense_activation)

    rnn_width = cache.splits[1]
    d_rnn_feat = d[:, :rnn_width]
    d_fused = d[:, rnn_width:]

    for i in range(len(weights.fused) - 1, -1, -1):
        if cache.fused_drop[i] is not None:
            d_fused = d_fused * cache.fused_drop[i]
        d_fused = dense_backward(weights.fused[i], cache.fused_caches[i], d_fused, cfg.dense_activation)

    numeric_width = cache.splits[0]
    d_numeric = d_fused[:, :numeric_width]
    d_embed = d_fused[:, numeric_width:]
    embed_backward(weights.embedding, cache.embed_cache, d_embed)
    for i in range(len(weights.numeric) - 1, -1, -1):
        d_numeric = dense_backward(
            weights.numeric[i], cache.numeric_caches[i], d_numeric, cfg.dense_activation
        )

    if cache.rnn_drop_mask is not None:
        d_rnn_feat = d_rnn_feat * cache.rnn_drop_mask
    d_steps, d_final = _pool_backward(cfg, cache.stack_state, mask_tb, d_rnn_feat, cache.pooling_cache)
    weights.stack.backward(cache.stack_state, d_steps, d_final)


def predict(cfg: NetworkConfig, weights: NetworkWeights, batch: Batch) -> dict[str, np.ndarray]:
    """Per-head argmax labels; ties break to the lowest index."""
    probs, _ = forward(cfg, weights, batch, training=False)
    return {head: np.argmax(p, axis=1) for head, p in probs.items()}
