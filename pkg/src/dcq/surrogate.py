"""The surrogate model family: shared 3D-CNN feature backbone, per-head
error-bound embedder, prediction heads (plain MLP or soft-gated
mixture-of-experts), target normalization, and model serialization.

A model holds one backbone plus a table of heads keyed by (codec, metric).
Each head owns its embedder so heads stay independent and can be trained,
shipped, and loaded in isolation.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import (
    ArgumentError,
    FormatError,
    IntegrityError,
    MissingHeadError,
    ShapeError,
    StateError,
)

METRICS = ("cr", "psnr", "ssim")

MODEL_MAGIC = b"DCQM"
MODEL_VERSION = 1


@dataclass
class BackboneConfig:
    stem_channels: int = 16
    stages: tuple = ((2, 16), (2, 32))  # (blocks, channels) per stage
    feature_dim: int = 64
    block_dims: tuple = (16, 16, 16)

    def __post_init__(self):
        if self.feature_dim <= 0:
            raise ArgumentError("feature_dim must be positive")
        if not self.stages:
            raise ArgumentError("at least one stage is required")
        self.stages = tuple((int(b), int(c)) for b, c in self.stages)
        self.block_dims = tuple(int(d) for d in self.block_dims)

    def to_dict(self):
        return {
            "stem_channels": self.stem_channels,
            "stages": [list(s) for s in self.stages],
            "feature_dim": self.feature_dim,
            "block_dims": list(self.block_dims),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            stem_channels=d["stem_channels"],
            stages=tuple(tuple(s) for s in d["stages"]),
            feature_dim=d["feature_dim"],
            block_dims=tuple(d["block_dims"]),
        )


@dataclass
class EbEmbedderConfig:
    hidden: tuple = (128, 256)
    eb_log_range: tuple = (-5.0, -1.0)  # (log10 eb_min, log10 eb_max)
    embedding_dim: int = 256

    def __post_init__(self):
        lo, hi = self.eb_log_range
        if not lo < hi:
            raise ArgumentError(f"eb_log_range must be increasing, got {self.eb_log_range}")
        if any(h <= 0 for h in self.hidden):
            raise ArgumentError("hidden sizes must be positive")

    def to_dict(self):
        return {
            "hidden": list(self.hidden),
            "eb_log_range": list(self.eb_log_range),
            "embedding_dim": self.embedding_dim,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            hidden=tuple(d["hidden"]),
            eb_log_range=tuple(d["eb_log_range"]),
            embedding_dim=d["embedding_dim"],
        )


@dataclass
class HeadConfig:
    kind: str = "moe"  # "moe" or "plain_mlp"
    n_experts: int = 4
    expert_hidden: int = 64
    target_transform: str = "identity"  # "identity" or "log2"
    target_norm: tuple | None = None  # (tmin, tmax) fitted on training labels

    def __post_init__(self):
        if self.kind not in ("moe", "plain_mlp"):
            raise ArgumentError(f"unknown head kind {self.kind!r}")
        if self.n_experts < 1:
            raise ArgumentError("n_experts must be >= 1")
        if self.target_transform not in ("identity", "log2"):
            raise ArgumentError(f"unknown target transform {self.target_transform!r}")

    def to_dict(self):
        return {
            "kind": self.kind,
            "n_experts": self.n_experts,
            "expert_hidden": self.expert_hidden,
            "target_transform": self.target_transform,
            "target_norm": list(self.target_norm) if self.target_norm else None,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            kind=d["kind"],
            n_experts=d["n_experts"],
            expert_hidden=d["expert_hidden"],
            target_transform=d["target_transform"],
            target_norm=tuple(d["target_norm"]) if d.get("target_norm") else None,
        )


# --- parameter plumbing -------------------------------------------------------


class _Net:
    """Base for parameterized components: ordered named parameters."""

    def __init__(self):
        self.params: list[ad.Parameter] = []

    def _add(self, name: str, array: np.ndarray, trainable: bool = True) -> ad.Tensor:
        t = ad.Tensor(array, requires_grad=trainable)
        self.params.append(ad.Parameter(name=name, tensor=t, trainable=trainable))
        return t

    def param_dict(self) -> dict[str, ad.Parameter]:
        return {p.name: p for p in self.params}

    def set_trainable(self, flag: bool) -> None:
        for p in self.params:
            p.trainable = flag
            p.tensor.requires_grad = flag

    def astype(self, dtype) -> None:
        for p in self.params:
            p.tensor.data = p.tensor.data.astype(dtype)

    def param_bytes(self) -> bytes:
        h = hashlib.sha256()
        for p in self.params:
            h.update(p.name.encode())
            h.update(p.tensor.data.astype("<f4").tobytes())
        return h.digest()


def _he(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(np.float32)


def _out_init(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(1.0 / fan_in), size=shape).astype(np.float32)


class Backbone(_Net):
    """Residual 3D CNN mapping a normalized block to a feature vector.

    stem conv (3^3, stride 1) -> stages of residual blocks (conv-relu-conv +
    skip; the first block of each stage downsamples with a stride-2 conv) ->
    global average pool -> linear to feature_dim. No batch normalization:
    desk-scale batches make it unstable, so blocks are plain conv+relu.
    """

    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        c_in = 1
        c = cfg.stem_channels
        self.stem_w = self._add("backbone.stem.weight", _he(rng, (c, c_in, 3, 3, 3), 27 * c_in))
        self.stem_b = self._add("backbone.stem.bias", np.zeros(c, np.float32))
        self.blocks = []
        for si, (n_blocks, ch) in enumerate(cfg.stages):
            for bi in range(n_blocks):
                stride = 2 if bi == 0 else 1
                pre = f"backbone.stage{si}.block{bi}"
                w1 = self._add(f"{pre}.conv1.weight", _he(rng, (ch, c, 3, 3, 3), 27 * c))
                b1 = self._add(f"{pre}.conv1.bias", np.zeros(ch, np.float32))
                w2 = self._add(f"{pre}.conv2.weight", _he(rng, (ch, ch, 3, 3, 3), 27 * ch))
                b2 = self._add(f"{pre}.conv2.bias", np.zeros(ch, np.float32))
                if stride != 1 or ch != c:
                    ws = self._add(f"{pre}.skip.weight", _he(rng, (ch, c, 1, 1, 1), c))
                    bs = self._add(f"{pre}.skip.bias", np.zeros(ch, np.float32))
                else:
                    ws = bs = None
                self.blocks.append((w1, b1, w2, b2, ws, bs, stride))
                c = ch
        f = cfg.feature_dim
        self.fc_w = self._add("backbone.fc.weight", _out_init(rng, (f, c), c))
        self.fc_b = self._add("backbone.fc.bias", np.zeros(f, np.float32))

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        if x.data.ndim != 5:
            raise ShapeError(f"backbone expects [N,1,D,H,W], got {x.shape}")
        bx, by, bz = self.cfg.block_dims
        if x.shape[2:] != (bz, by, bx):
            raise ShapeError(
                f"backbone configured for block dims {self.cfg.block_dims}, got input {x.shape}"
            )
        h = ad.relu(ad.conv3d(x, self.stem_w, self.stem_b, stride=1, padding=1))
        for w1, b1, w2, b2, ws, bs, stride in self.blocks:
            inner = ad.relu(ad.conv3d(h, w1, b1, stride=stride, padding=1))
            inner = ad.conv3d(inner, w2, b2, stride=1, padding=1)
            skip = h if ws is None else ad.conv3d(h, ws, bs, stride=stride, padding=0)
            h = ad.relu(ad.add(inner, skip))
        pooled = ad.global_avg_pool(h)
        return ad.linear(pooled, self.fc_w, self.fc_b)


class EbEmbedder(_Net):
    """Embeds a log-normalized scalar error bound into a vector."""

    def __init__(self, cfg: EbEmbedderConfig, seed: int = 0, prefix: str = "efe"):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
        sizes = [1, *cfg.hidden, cfg.embedding_dim]
        self.layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = self._add(f"{prefix}.l{i}.weight", _he(rng, (b, a), a))
            bias = self._add(f"{prefix}.l{i}.bias", np.zeros(b, np.float32))
            self.layers.append((w, bias))

    def normalize(self, eb_rel) -> np.ndarray:
        """u = clamp((log10 eb - lo) / (hi - lo), 0, 1); non-decreasing in eb."""
        eb = np.asarray(eb_rel, dtype=np.float64)
        if np.any(eb <= 0):
            raise ArgumentError("error bounds must be positive")
        lo, hi = self.cfg.eb_log_range
        u = (np.log10(eb) - lo) / (hi - lo)
        return np.clip(u, 0.0, 1.0)

    def forward(self, u: ad.Tensor) -> ad.Tensor:
        h = u
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = ad.linear(h, w, b)
            if i < last:
                h = ad.relu(h)
        return h


class PredictionHead(_Net):
    """Maps concat(feature, embedding) to one normalized metric value.

    moe: softmax router over n_experts single-hidden-layer experts, output is
    the weight-averaged expert prediction (soft gating). plain_mlp: one
    hidden layer.
    """

    def __init__(self, cfg: HeadConfig, fused_dim: int, seed: int = 0, prefix: str = "pred"):
        super().__init__()
        self.cfg = cfg
        self.fused_dim = fused_dim
        rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
        if cfg.kind == "plain_mlp":
            self.w0 = self._add(f"{prefix}.mlp.l0.weight", _he(rng, (cfg.expert_hidden, fused_dim), fused_dim))
            self.b0 = self._add(f"{prefix}.mlp.l0.bias", np.zeros(cfg.expert_hidden, np.float32))
            self.w1 = self._add(f"{prefix}.mlp.l1.weight", _out_init(rng, (1, cfg.expert_hidden), cfg.expert_hidden))
            self.b1 = self._add(f"{prefix}.mlp.l1.bias", np.zeros(1, np.float32))
        else:
            # router starts at zero so gating begins uniform
            self.router_w = self._add(f"{prefix}.router.weight", np.zeros((cfg.n_experts, fused_dim), np.float32))
            self.router_b = self._add(f"{prefix}.router.bias", np.zeros(cfg.n_experts, np.float32))
            self.experts = []
            for e in range(cfg.n_experts):
                w0 = self._add(f"{prefix}.expert{e}.l0.weight", _he(rng, (cfg.expert_hidden, fused_dim), fused_dim))
                b0 = self._add(f"{prefix}.expert{e}.l0.bias", np.zeros(cfg.expert_hidden, np.float32))
                w1 = self._add(f"{prefix}.expert{e}.l1.weight", _out_init(rng, (1, cfg.expert_hidden), cfg.expert_hidden))
                b1 = self._add(f"{prefix}.expert{e}.l1.bias", np.zeros(1, np.float32))
                self.experts.append((w0, b0, w1, b1))

    def forward(self, fused: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor | None]:
        if self.cfg.kind == "plain_mlp":
            h = ad.relu(ad.linear(fused, self.w0, self.b0))
            return ad.linear(h, self.w1, self.b1), None
        logits = ad.linear(fused, self.router_w, self.router_b)
        weights = ad.softmax(logits)
        outs = []
        for w0, b0, w1, b1 in self.experts:
            h = ad.relu(ad.linear(fused, w0, b0))
            outs.append(ad.linear(h, w1, b1))
        stacked = ad.concat(outs, axis=1)  # [N, n_experts]
        combined = ad.reduce_sum(ad.mul(weights, stacked), axis=1, keepdims=True)
        return combined, weights


# --- target normalization ------------------------------------------------------


def transform_target(values, transform: str) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if transform == "log2":
        if np.any(v <= 0):
            raise ArgumentError("log2 target transform requires positive values")
        return np.log2(v)
    return v


def fit_target_norm(values, transform: str) -> tuple[float, float]:
    t = transform_target(values, transform)
    tmin = float(t.min())
    tmax = float(t.max())
    if tmax <= tmin:
        tmax = tmin + 1.0  # constant targets: widen so normalization stays finite
    return tmin, tmax


def normalize_target(values, transform: str, norm: tuple[float, float]) -> np.ndarray:
    t = transform_target(values, transform)
    tmin, tmax = norm
    return (t - tmin) / (tmax - tmin)


# --- head bundle and model container -------------------------------------------


@dataclass
class HeadBundle:
    """One (codec, metric) prediction head: embedder + head + metadata."""

    codec: str
    metric: str
    embedder: EbEmbedder
    head: PredictionHead
    emb_cfg: EbEmbedderConfig
    head_cfg: HeadConfig

    def all_params(self) -> list[ad.Parameter]:
        return self.embedder.params + self.head.params

    def forward_rows(self, features: ad.Tensor, u: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor | None]:
        emb = self.embedder.forward(u)
        fused = ad.concat([features, emb], axis=1)
        return self.head.forward(fused)

    def denormalize(self, normalized) -> np.ndarray:
        if self.head_cfg.target_norm is None:
            raise StateError(f"head ({self.codec},{self.metric}) has no fitted target norm")
        tmin, tmax = self.head_cfg.target_norm
        y = np.asarray(normalized, dtype=np.float64) * (tmax - tmin) + tmin
        if self.head_cfg.target_transform == "log2":
            y = np.exp2(y)
        if self.metric == "ssim":
            y = np.clip(y, 0.0, 1.0)
        return y

    def predict(self, features: np.ndarray, eb_rel) -> np.ndarray:
        """Denormalized metric prediction for feature rows at one eb."""
        if self.head_cfg.target_norm is None:
            raise StateError(f"head ({self.codec},{self.metric}) is not fitted")
        n = features.shape[0]
        u = np.full((n, 1), self.embedder.normalize(eb_rel), dtype=features.dtype)
        out, _ = self.forward_rows(ad.Tensor(features), ad.Tensor(u))
        return self.denormalize(out.data[:, 0])


def make_head_bundle(codec: str, metric: str, emb_cfg: EbEmbedderConfig,
                     head_cfg: HeadConfig, feature_dim: int, seed: int = 0) -> HeadBundle:
    """Construct a head bundle with the canonical parameter-name prefixes the
    model file format expects."""
    if metric not in METRICS:
        raise ArgumentError(f"unknown metric {metric!r}; expected one of {METRICS}")
    prefix = f"heads.{codec}.{metric}"
    embedder = EbEmbedder(emb_cfg, seed=seed, prefix=f"{prefix}.efe")
    head = PredictionHead(head_cfg, feature_dim + emb_cfg.embedding_dim, seed=seed, prefix=f"{prefix}.pred")
    return HeadBundle(codec=codec, metric=metric, embedder=embedder, head=head,
                      emb_cfg=emb_cfg, head_cfg=head_cfg)


def extract_features(backbone: Backbone, block) -> np.ndarray:
    """Feature vector (length feature_dim) of one normalized block."""
    data = block.data if hasattr(block, "data") and isinstance(block.data, np.ndarray) else np.asarray(block)
    x = ad.Tensor(data.astype(np.float32)[None, None])
    return backbone.forward(x).data[0]


def embed_error_bound(embedder: EbEmbedder, eb_rel: float) -> np.ndarray:
    """Embedding vector (length embedding_dim) for one error bound."""
    u = np.asarray([[embedder.normalize(eb_rel)]], dtype=np.float32)
    return embedder.forward(ad.Tensor(u)).data[0]


def predict_head(bundle: HeadBundle, feature: np.ndarray, embedding: np.ndarray):
    """Normalized prediction plus router weights for one fused input."""
    fused = ad.Tensor(np.concatenate([np.asarray(feature), np.asarray(embedding)])[None].astype(np.float32))
    out, weights = bundle.head.forward(fused)
    return float(out.data[0, 0]), None if weights is None else weights.data[0]


class SurrogateModel:
    """Versioned container: backbone + per-(codec, metric) heads."""

    def __init__(self, backbone: Backbone, seed: int = 0):
        self.backbone = backbone
        self.seed = seed
        self.heads: dict[tuple[str, str], HeadBundle] = {}

    def add_head(self, bundle: HeadBundle) -> None:
        self.heads[(bundle.codec, bundle.metric)] = bundle

    def head(self, codec: str, metric: str) -> HeadBundle:
        key = (codec, metric)
        if key not in self.heads:
            raise MissingHeadError(f"model has no head for (codec={codec!r}, metric={metric!r})")
        return self.heads[key]

    def features(self, blocks: np.ndarray, batch: int = 64) -> np.ndarray:
        """Backbone features for a stack of normalized blocks [N, bz, by, bx]."""
        blocks = np.asarray(blocks, dtype=np.float32)
        if blocks.ndim == 3:
            blocks = blocks[None]
        out = []
        for i in range(0, blocks.shape[0], batch):
            x = ad.Tensor(blocks[i : i + batch, None])
            out.append(self.backbone.forward(x).data)
        return np.concatenate(out, axis=0)

    def predict(self, codec: str, metric: str, blocks_or_features: np.ndarray, eb_rel: float) -> np.ndarray:
        bundle = self.head(codec, metric)
        arr = np.asarray(blocks_or_features, dtype=np.float32)
        feats = arr if arr.ndim == 2 else self.features(arr)
        return bundle.predict(feats, eb_rel)

    def backbone_hash(self) -> str:
        return self.backbone.param_bytes().hex()


# --- serialization --------------------------------------------------------------


def _param_meta(net: _Net) -> list[list]:
    return [[p.name, list(p.tensor.shape)] for p in net.params]


def save_model(model: SurrogateModel, path) -> None:
    """DCQM container: magic, version, JSON metadata, float32 LE blobs."""
    meta = {
        "version": MODEL_VERSION,
        "seed": model.seed,
        "backbone": {
            "config": model.backbone.cfg.to_dict(),
            "params": _param_meta(model.backbone),
        },
        "heads": [],
    }
    nets: list[_Net] = [model.backbone]
    for key in sorted(model.heads):
        b = model.heads[key]
        meta["heads"].append(
            {
                "codec": b.codec,
                "metric": b.metric,
                "embedder_config": b.emb_cfg.to_dict(),
                "head_config": b.head_cfg.to_dict(),
                "embedder_params": _param_meta(b.embedder),
                "head_params": _param_meta(b.head),
            }
        )
        nets.append(b.embedder)
        nets.append(b.head)
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    chunks = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(meta_bytes)), meta_bytes]
    for net in nets:
        for p in net.params:
            chunks.append(p.tensor.data.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def _load_params(net: _Net, declared: list, blob: bytes, offset: int, context: str) -> int:
    have = net.param_dict()
    declared_names = [name for name, _ in declared]
    for name in have:
        if name not in declared_names:
            raise IntegrityError(f"{context}: file is missing parameter {name!r}")
    for name, shape in declared:
        if name not in have:
            raise IntegrityError(f"{context}: unexpected parameter {name!r} in file")
        p = have[name]
        shape = tuple(shape)
        if tuple(p.tensor.shape) != shape:
            raise IntegrityError(
                f"{context}: parameter {name!r} shape {shape} does not match model {tuple(p.tensor.shape)}"
            )
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if offset + nbytes > len(blob):
            raise IntegrityError(f"{context}: file truncated inside parameter {name!r}")
        p.tensor.data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    return offset


def load_model(path) -> SurrogateModel:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: not a DCQM model file")
    version, meta_len = struct.unpack_from("<II", blob, 4)
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported model format version {version}")
    if len(blob) < 12 + meta_len:
        raise IntegrityError(f"{path}: file truncated inside metadata")
    try:
        meta = json.loads(blob[12 : 12 + meta_len])
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: corrupt model metadata: {e}") from e

    seed = meta.get("seed", 0)
    backbone = Backbone(BackboneConfig.from_dict(meta["backbone"]["config"]), seed=seed)
    offset = _load_params(backbone, meta["backbone"]["params"], blob, 12 + meta_len, "backbone")
    model = SurrogateModel(backbone, seed=seed)
    for h in meta["heads"]:
        emb_cfg = EbEmbedderConfig.from_dict(h["embedder_config"])
        head_cfg = HeadConfig.from_dict(h["head_config"])
        fused = backbone.cfg.feature_dim + emb_cfg.embedding_dim
        prefix = f"heads.{h['codec']}.{h['metric']}"
        embedder = EbEmbedder(emb_cfg, seed=seed, prefix=f"{prefix}.efe")
        head = PredictionHead(head_cfg, fused, seed=seed, prefix=f"{prefix}.pred")
        ctx = f"head ({h['codec']},{h['metric']})"
        offset = _load_params(embedder, h["embedder_params"], blob, offset, ctx)
        offset = _load_params(head, h["head_params"], blob, offset, ctx)
        model.add_head(
            HeadBundle(
                codec=h["codec"],
                metric=h["metric"],
                embedder=embedder,
                head=head,
                emb_cfg=emb_cfg,
                head_cfg=head_cfg,
            )
        )
    if offset != len(blob):
        raise IntegrityError(f"{path}: {len(blob) - offset} trailing bytes after parameters")
    return model


def denormalize_target(bundle: HeadBundle, normalized: float) -> float:
    """Map a normalized head output back to metric units."""
    return float(bundle.denormalize(np.asarray([normalized]))[0])
