"""Orchestration: ground-truth label generation, two-stage training, splits,
evaluation (PE/MAPE), MoE ablation, and the timing / training-cost harnesses.

Labels are computed per block (each sampled block compressed independently)
so every training sample has a well-defined target; field-level evaluation
aggregates per-block predictions by arithmetic mean. All randomness descends
from one root seed through documented ``SeedSequence`` chains, and outputs
are written in canonical orders so identical provenance reproduces identical
bytes regardless of worker count.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import quality
from .codec import CodecId, compress_roundtrip
from .errors import ArgumentError, DataError, SplitError, TrainingError
from .field import Block, Manifest, minmax_normalize, sample_blocks
from .quality import UNDEFINED, QualityLabel, is_defined, read_label_csv, write_label_csv
from .surrogate import (
    Backbone,
    BackboneConfig,
    EbEmbedder,
    EbEmbedderConfig,
    HeadBundle,
    HeadConfig,
    METRICS,
    SurrogateModel,
    fit_target_norm,
    load_model,
    make_head_bundle,
    normalize_target,
)

# relative-error-bound ranges per application family
EB_PRESETS = {
    "nyx": (1e-5, 1e-3),
    "hurricane": (1e-5, 1e-2),
    "miranda": (1e-4, 1e-2),
    "rtm": (1e-4, 1e-3),
}
DEFAULT_EB_POINTS = 20

SSIM_WINDOW = 7

# full-scale epoch defaults and the desk preset used for CI-sized runs
BACKBONE_EPOCHS = 250
HEAD_EPOCHS = 150
DESK_BACKBONE_EPOCHS = 100
DESK_HEAD_EPOCHS = 60
DEFAULT_LR = 0.01


def eb_grid(lo: float, hi: float, points: int = DEFAULT_EB_POINTS) -> np.ndarray:
    """Log-uniform error-bound grid, strictly increasing."""
    if lo <= 0 or hi <= lo:
        raise ArgumentError(f"need 0 < lo < hi, got ({lo}, {hi})")
    if points < 1:
        raise ArgumentError(f"points must be >= 1, got {points}")
    return np.logspace(np.log10(lo), np.log10(hi), points)


def preset_grid(name: str, points: int = DEFAULT_EB_POINTS) -> np.ndarray:
    if name not in EB_PRESETS:
        raise ArgumentError(f"unknown eb preset {name!r}; expected one of {sorted(EB_PRESETS)}")
    lo, hi = EB_PRESETS[name]
    return eb_grid(lo, hi, points)


@dataclass
class BlockSpec:
    dims: tuple = (16, 16, 16)
    per_volume: int = 32

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if self.per_volume < 1:
            raise ArgumentError("per_volume must be >= 1")


@dataclass
class SplitSpec:
    mode: str = "odd_even"  # or "last_timestep_out"

    def __post_init__(self):
        if self.mode not in ("odd_even", "last_timestep_out"):
            raise ArgumentError(f"unknown split mode {self.mode!r}")


@dataclass
class LabelTable:
    rows: list
    provenance: dict

    def timesteps(self) -> list[int]:
        return sorted({r.timestep for r in self.rows})

    def codecs(self) -> list[str]:
        return sorted({r.codec for r in self.rows})

    def fields(self) -> list[str]:
        return sorted({r.field_name for r in self.rows})

    def eb_values(self) -> list[float]:
        return sorted({r.eb_rel for r in self.rows})

    def save(self, csv_path, provenance_path=None) -> None:
        write_label_csv(self.rows, csv_path)
        if provenance_path is None:
            provenance_path = Path(csv_path).with_suffix(".provenance.json")
        Path(provenance_path).write_text(json.dumps(self.provenance, sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, csv_path, provenance_path=None) -> "LabelTable":
        rows = read_label_csv(csv_path)
        if provenance_path is None:
            provenance_path = Path(csv_path).with_suffix(".provenance.json")
        provenance = {}
        if Path(provenance_path).exists():
            provenance = json.loads(Path(provenance_path).read_text())
        return cls(rows=rows, provenance=provenance)


def _manifest_hash(manifest: Manifest) -> str:
    path = getattr(manifest, "path", None)
    if path is not None and Path(path).exists():
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    doc = {
        "name": manifest.name,
        "dims": list(manifest.dims),
        "fields": [[f.name, f.timesteps] for f in manifest.fields],
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()


def block_sampling_seed(root_seed: int, field_index: int, timestep: int) -> int:
    """Per-(field, timestep) sampling seed derived from the root seed."""
    ss = np.random.SeedSequence([int(root_seed), 0xB10C, int(field_index), int(timestep)])
    return int(ss.generate_state(1, np.uint64)[0])


class Dataset:
    """Deterministic view of a manifest: volumes, sampled blocks, features."""

    def __init__(self, manifest: Manifest, block_spec: BlockSpec, seed: int):
        self.manifest = manifest
        self.block_spec = block_spec
        self.seed = int(seed)
        self._volumes = {}
        self._blocks = {}
        self._normalized = {}

    def field_names(self) -> list[str]:
        return self.manifest.field_names()

    def field_index(self, name: str) -> int:
        return self.manifest.field_names().index(name)

    def volume(self, field_name: str, timestep: int):
        key = (field_name, timestep)
        if key not in self._volumes:
            self._volumes[key] = self.manifest.load_volume(field_name, timestep)
        return self._volumes[key]

    def raw_blocks(self, field_name: str, timestep: int) -> list[Block]:
        key = (field_name, timestep)
        if key not in self._blocks:
            seed = block_sampling_seed(self.seed, self.field_index(field_name), timestep)
            self._blocks[key] = sample_blocks(
                self.volume(field_name, timestep), self.block_spec.dims,
                self.block_spec.per_volume, seed,
            )
        return self._blocks[key]

    def normalized_blocks(self, field_name: str, timestep: int):
        """Normalized block arrays plus stats, indexed by block id."""
        key = (field_name, timestep)
        if key not in self._normalized:
            pairs = [minmax_normalize(b) for b in self.raw_blocks(field_name, timestep)]
            self._normalized[key] = pairs
        return self._normalized[key]

    def block_array(self, keys) -> np.ndarray:
        """Stack normalized blocks for (field, timestep, block_id) keys."""
        out = []
        for field_name, ts, bid in keys:
            nb, _ = self.normalized_blocks(field_name, ts)[bid]
            out.append(nb.data)
        return np.stack(out).astype(np.float32)


def _rows_for_volume(volume, block_spec: BlockSpec, sample_seed: int,
                     codec_names: list[str], ebs: list[float]) -> list[QualityLabel]:
    blocks = sample_blocks(volume, block_spec.dims, block_spec.per_volume, sample_seed)
    rows = []
    win_ok = all(d >= SSIM_WINDOW for d in block_spec.dims)
    for blk in blocks:
        bmin = float(blk.data.min())
        bmax = float(blk.data.max())
        degenerate = bmax == bmin
        orig_bytes = 4 * blk.data.size
        for name in codec_names:
            codec = CodecId.from_name(name)
            for eb in ebs:
                out = compress_roundtrip(codec, blk, eb)
                cr = quality.compression_ratio(orig_bytes, out.compressed_bytes)
                if degenerate:
                    psnr_db = UNDEFINED
                    ssim = UNDEFINED
                else:
                    psnr_db = quality.psnr(blk.data, out.reconstruction)
                    ssim = quality.ssim3d(blk.data, out.reconstruction) if win_ok else UNDEFINED
                rows.append(
                    QualityLabel(
                        field_name=volume.field_name,
                        timestep=volume.timestep,
                        block_id=blk.block_id,
                        codec=name,
                        eb_rel=float(eb),
                        eb_abs=float(out.eb.abs),
                        cr=cr,
                        psnr_db=psnr_db,
                        ssim=ssim,
                        block_min=bmin,
                        block_max=bmax,
                    )
                )
    return rows


def _label_volume_task(args) -> list[QualityLabel]:
    # process-pool entry point: loads the volume from disk inside the worker
    path, dims, field_name, timestep, block_spec, sample_seed, codec_names, ebs = args
    from .field import load_raw

    volume = load_raw(path, dims, field_name, timestep)
    return _rows_for_volume(volume, block_spec, sample_seed, codec_names, ebs)


def build_labels(manifest: Manifest, codecs, grid, block_spec: BlockSpec,
                 seed: int, workers: int | None = None) -> LabelTable:
    """Compress every sampled block at every (codec, eb) and record metrics.

    Work items are (field, timestep) volumes; each is pure, so results are
    identical for any worker count. Rows come back in canonical
    (field, timestep, block, codec, eb) order.
    """
    codec_names = [c.value if isinstance(c, CodecId) else str(c) for c in codecs]
    if not codec_names:
        raise ArgumentError("at least one codec is required")
    ebs = [float(e) for e in np.asarray(grid).ravel()]
    if not ebs:
        raise ArgumentError("error-bound grid is empty")
    if any(e <= 0 for e in ebs) or any(b <= a for a, b in zip(ebs, ebs[1:])):
        raise ArgumentError("error-bound grid must be strictly increasing and positive")

    items = []
    for fi, name in enumerate(manifest.field_names()):
        for ts in manifest.timesteps(name):
            items.append(
                (
                    str(manifest.volume_path(name, ts)),
                    manifest.dims,
                    name,
                    ts,
                    block_spec,
                    block_sampling_seed(seed, fi, ts),
                    codec_names,
                    ebs,
                )
            )

    if workers is None:
        workers = os.cpu_count() or 1
    workers = max(1, min(workers, len(items)))
    rows: list[QualityLabel] = []
    if workers == 1:
        for item in items:
            rows.extend(_label_volume_task(item))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for part in pool.map(_label_volume_task, items):
                rows.extend(part)
    rows.sort(key=lambda r: (r.field_name, r.timestep, r.block_id, r.codec, r.eb_rel))

    provenance = {
        "manifest_sha256": _manifest_hash(manifest),
        "codecs": codec_names,
        "eb_grid": ebs,
        "block_dims": list(block_spec.dims),
        "blocks_per_volume": block_spec.per_volume,
        "seed": int(seed),
    }
    return LabelTable(rows=rows, provenance=provenance)


def split(labels: LabelTable, spec: SplitSpec) -> tuple[LabelTable, LabelTable]:
    """Disjoint train/test partition by timestep."""
    timesteps = labels.timesteps()
    if len(timesteps) < 2:
        raise SplitError(f"need >= 2 timesteps to split, have {timesteps}")
    if spec.mode == "odd_even":
        train_ts = {t for t in timesteps if t % 2 == 1}
        test_ts = {t for t in timesteps if t % 2 == 0}
    else:
        train_ts = set(timesteps[:-1])
        test_ts = {timesteps[-1]}
    if not train_ts or not test_ts:
        raise SplitError(f"{spec.mode} split left one side empty for timesteps {timesteps}")
    train_rows = [r for r in labels.rows if r.timestep in train_ts]
    test_rows = [r for r in labels.rows if r.timestep in test_ts]
    prov = dict(labels.provenance)
    train = LabelTable(rows=train_rows, provenance={**prov, "split": [spec.mode, "train"]})
    test = LabelTable(rows=test_rows, provenance={**prov, "split": [spec.mode, "test"]})
    return train, test


# --- training ------------------------------------------------------------------


def _metric_value(row: QualityLabel, metric: str) -> float:
    return {"cr": row.cr, "psnr": row.psnr_db, "ssim": row.ssim}[metric]


def default_transform(metric: str) -> str:
    # CR spans orders of magnitude; PSNR/SSIM stay in natural units
    return "log2" if metric == "cr" else "identity"


def eb_log_range_of(labels: LabelTable) -> tuple[float, float]:
    ebs = labels.eb_values()
    lo = float(np.log10(min(ebs)))
    hi = float(np.log10(max(ebs)))
    if hi <= lo:
        lo, hi = lo - 0.5, lo + 0.5
    return lo, hi


def _block_keys(labels: LabelTable) -> list[tuple[str, int, int]]:
    return sorted({(r.field_name, r.timestep, r.block_id) for r in labels.rows})


@dataclass
class TrainingHistory:
    epoch_loss: list
    final_pair_mse: dict | None = None


def train_backbone(labels: LabelTable, dataset: Dataset,
                   backbone_cfg: BackboneConfig | None = None,
                   epochs: int = BACKBONE_EPOCHS, lr0: float = DEFAULT_LR,
                   seed: int = 0, block_batch: int = 16) -> tuple[Backbone, TrainingHistory]:
    """Phase 1: train the shared backbone with joint multi-task supervision.

    A provisional head (shared eb embedder + one linear output per
    (codec, metric) pair) consumes concat(feature, embedding); the loss is
    the mean MSE over available normalized targets. The provisional head is
    discarded and the backbone is returned frozen.
    """
    if not labels.rows:
        raise DataError("no training rows")
    if backbone_cfg is None:
        backbone_cfg = BackboneConfig(block_dims=tuple(dataset.block_spec.dims))
    codec_names = labels.codecs()
    pairs = [(c, m) for c in codec_names for m in METRICS]
    keys = _block_keys(labels)
    key_index = {k: i for i, k in enumerate(keys)}
    ebs = labels.eb_values()
    eb_index = {e: i for i, e in enumerate(ebs)}
    nb, ne, npair = len(keys), len(ebs), len(pairs)

    raw = np.zeros((nb, ne, npair), dtype=np.float64)
    mask = np.zeros((nb, ne, npair), dtype=bool)
    for r in labels.rows:
        bi = key_index[(r.field_name, r.timestep, r.block_id)]
        ei = eb_index[r.eb_rel]
        for mi, metric in enumerate(METRICS):
            v = _metric_value(r, metric)
            if is_defined(v):
                pi = pairs.index((r.codec, metric))
                raw[bi, ei, pi] = v
                mask[bi, ei, pi] = True

    target = np.zeros_like(raw)
    for pi, (codec, metric) in enumerate(pairs):
        sel = mask[:, :, pi]
        if not sel.any():
            continue
        transform = default_transform(metric)
        norm = fit_target_norm(raw[:, :, pi][sel], transform)
        target[:, :, pi][sel] = normalize_target(raw[:, :, pi][sel], transform, norm)
    target = target.astype(np.float32)
    maskf = mask.astype(np.float32)

    blocks = dataset.block_array(keys)
    backbone = Backbone(backbone_cfg, seed=seed)
    emb_cfg = EbEmbedderConfig(eb_log_range=eb_log_range_of(labels))
    embedder = EbEmbedder(emb_cfg, seed=seed, prefix="phase1.efe")
    f_dim = backbone_cfg.feature_dim + emb_cfg.embedding_dim
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    head_w = ad.Tensor(rng.normal(0.0, np.sqrt(1.0 / f_dim), (npair, f_dim)).astype(np.float32),
                       requires_grad=True)
    head_b = ad.Tensor(np.zeros(npair, np.float32), requires_grad=True)
    head_params = [ad.Parameter("phase1.head.weight", head_w), ad.Parameter("phase1.head.bias", head_b)]
    params = backbone.params + embedder.params + head_params
    state = ad.AdamState()

    u_ebs = embedder.normalize(ebs).astype(np.float32)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([seed, 12]))

    def forward_chunk(chunk: np.ndarray) -> tuple[ad.Tensor, float]:
        xb = ad.Tensor(blocks[chunk][:, None])
        feats = backbone.forward(xb)
        rep = np.repeat(np.arange(len(chunk)), ne)
        frows = ad.index_select(feats, rep)
        urows = ad.Tensor(np.tile(u_ebs, len(chunk))[:, None])
        fused = ad.concat([frows, embedder.forward(urows)], axis=1)
        preds = ad.linear(fused, head_w, head_b)
        y = ad.Tensor(target[chunk].reshape(-1, npair))
        mk = maskf[chunk].reshape(-1, npair)
        count = float(mk.sum())
        diff = ad.sub(preds, y)
        masked = ad.mul(ad.mul(diff, diff), ad.Tensor(mk))
        return ad.scale(ad.reduce_sum(masked), 1.0 / max(count, 1.0)), count

    history = []
    for epoch in range(epochs):
        lr = ad.step_decay_lr(epoch, epochs, lr0)
        perm = shuffle_rng.permutation(nb)
        total = 0.0
        weight = 0.0
        for start in range(0, nb, block_batch):
            chunk = perm[start : start + block_batch]
            ad.zero_grads(params)
            loss, count = forward_chunk(chunk)
            if count == 0:
                continue
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite phase-1 loss at epoch {epoch}")
            ad.backward(loss)
            ad.adam_step(params, state, lr)
            total += value * count
            weight += count
        history.append(total / max(weight, 1.0))

    # final per-pair fit quality on the training set (recorded, provisional)
    final_mse = {}
    preds = np.zeros((nb, ne, npair), dtype=np.float64)
    for start in range(0, nb, block_batch):
        chunk = np.arange(start, min(start + block_batch, nb))
        xb = ad.Tensor(blocks[chunk][:, None])
        feats = backbone.forward(xb)
        rep = np.repeat(np.arange(len(chunk)), ne)
        frows = ad.index_select(feats, rep)
        urows = ad.Tensor(np.tile(u_ebs, len(chunk))[:, None])
        fused = ad.concat([frows, embedder.forward(urows)], axis=1)
        out = ad.linear(fused, head_w, head_b)
        preds[chunk] = out.data.reshape(len(chunk), ne, npair)
    for pi, (codec, metric) in enumerate(pairs):
        sel = mask[:, :, pi]
        if sel.any():
            d = preds[:, :, pi][sel] - target[:, :, pi][sel]
            final_mse[f"{codec}|{metric}"] = float(np.mean(d * d))

    backbone.set_trainable(False)
    return backbone, TrainingHistory(epoch_loss=history, final_pair_mse=final_mse)


def train_head(model: SurrogateModel, labels: LabelTable, dataset: Dataset,
               codec: str, metric: str, head_cfg: HeadConfig | None = None,
               emb_cfg: EbEmbedderConfig | None = None, epochs: int = HEAD_EPOCHS,
               lr0: float = DEFAULT_LR, seed: int = 0, batch: int = 256) -> tuple[HeadBundle, TrainingHistory]:
    """Phase 2: train one (codec, metric) head on frozen backbone features."""
    if metric not in METRICS:
        raise ArgumentError(f"unknown metric {metric!r}")
    rows = [r for r in labels.rows if r.codec == codec and is_defined(_metric_value(r, metric))]
    if not rows:
        raise DataError(f"no defined ({codec},{metric}) targets in the training labels")

    hash_before = model.backbone_hash()
    keys = sorted({(r.field_name, r.timestep, r.block_id) for r in rows})
    key_index = {k: i for i, k in enumerate(keys)}
    feats = model.features(dataset.block_array(keys))

    if emb_cfg is None:
        emb_cfg = EbEmbedderConfig(eb_log_range=eb_log_range_of(labels))
    if head_cfg is None:
        head_cfg = HeadConfig(kind="moe", target_transform=default_transform(metric))
    targets_raw = np.array([_metric_value(r, metric) for r in rows], dtype=np.float64)
    head_cfg.target_norm = fit_target_norm(targets_raw, head_cfg.target_transform)
    y = normalize_target(targets_raw, head_cfg.target_transform, head_cfg.target_norm).astype(np.float32)

    bundle = make_head_bundle(codec, metric, emb_cfg, head_cfg,
                              model.backbone.cfg.feature_dim, seed=seed)
    row_feat = np.array([key_index[(r.field_name, r.timestep, r.block_id)] for r in rows])
    row_u = bundle.embedder.normalize([r.eb_rel for r in rows]).astype(np.float32)

    params = bundle.all_params()
    state = ad.AdamState()
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([seed, 21]))
    n = len(rows)
    history = []
    for epoch in range(epochs):
        lr = ad.step_decay_lr(epoch, epochs, lr0)
        perm = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            sel = perm[start : start + batch]
            ad.zero_grads(params)
            fr = ad.Tensor(feats[row_feat[sel]])
            ur = ad.Tensor(row_u[sel][:, None])
            out, _ = bundle.forward_rows(fr, ur)
            loss = ad.rmse_loss(out, ad.Tensor(y[sel][:, None]))
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite ({codec},{metric}) head loss at epoch {epoch}")
            ad.backward(loss)
            ad.adam_step(params, state, lr)
            total += value * len(sel)
        history.append(total / n)

    if model.backbone_hash() != hash_before:
        raise TrainingError("backbone parameters changed during head training")
    return bundle, TrainingHistory(epoch_loss=history)


def train_all_heads(model: SurrogateModel, labels: LabelTable, dataset: Dataset,
                    head_kind: str = "moe", epochs: int = HEAD_EPOCHS,
                    lr0: float = DEFAULT_LR, seed: int = 0) -> SurrogateModel:
    """Train one head per (codec, metric) pair present in the labels."""
    for codec in labels.codecs():
        for metric in METRICS:
            cfg = HeadConfig(kind=head_kind, target_transform=default_transform(metric))
            bundle, _ = train_head(model, labels, dataset, codec, metric,
                                   head_cfg=cfg, epochs=epochs, lr0=lr0, seed=seed)
            model.add_head(bundle)
    return model


# --- evaluation ------------------------------------------------------------------


@dataclass
class EvalReport:
    granularity: str
    mape: dict  # "codec|metric|field" -> float
    pe_curves: dict  # "codec|metric|field" -> list of {eb_rel, orig, pred, pe}
    rows: list  # per-evaluated-row dicts

    def to_json(self) -> str:
        doc = {
            "granularity": self.granularity,
            "mape": self.mape,
            "pe_curves": self.pe_curves,
            "rows": self.rows,
        }
        return json.dumps(doc, sort_keys=True, indent=1)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "EvalReport":
        doc = json.loads(Path(path).read_text())
        return cls(granularity=doc["granularity"], mape=doc["mape"],
                   pe_curves=doc["pe_curves"], rows=doc["rows"])


def _report_key(codec: str, metric: str, field_name: str) -> str:
    return f"{codec}|{metric}|{field_name}"


def _present_pairs(labels: LabelTable) -> list[tuple[str, str]]:
    pairs = set()
    for r in labels.rows:
        for metric in METRICS:
            if is_defined(_metric_value(r, metric)):
                pairs.add((r.codec, metric))
    return sorted(pairs)


def _curves_from_rows(rows: list[dict]) -> dict:
    curves: dict[str, dict[float, list]] = {}
    for row in rows:
        key = _report_key(row["codec"], row["metric"], row["field"])
        curves.setdefault(key, {}).setdefault(row["eb_rel"], []).append((row["orig"], row["pred"]))
    out = {}
    for key, by_eb in curves.items():
        pts = []
        for eb in sorted(by_eb):
            origs, preds = zip(*by_eb[eb])
            om = float(np.mean(origs))
            pm = float(np.mean(preds))
            pe = quality.percentage_error(om, pm) if om != 0 else UNDEFINED
            pts.append({"eb_rel": eb, "orig": om, "pred": pm, "pe": pe})
        out[key] = pts
    return out


def evaluate(model: SurrogateModel, labels: LabelTable, dataset: Dataset,
             granularity: str = "block", k_blocks: int | None = None,
             seed: int = 0) -> EvalReport:
    """PE per evaluated row and MAPE per (codec, metric, field).

    block granularity scores each labeled block row; field granularity
    recomputes ground truth on the full field per eb and compares it against
    the mean prediction over freshly sampled blocks.
    """
    pairs = _present_pairs(labels)
    for codec, metric in pairs:
        model.head(codec, metric)  # raises MissingHeadError up front

    out_rows: list[dict] = []
    if granularity == "block":
        keys = _block_keys(labels)
        key_index = {k: i for i, k in enumerate(keys)}
        feats = model.features(dataset.block_array(keys))
        for codec, metric in pairs:
            rows = [r for r in labels.rows if r.codec == codec and is_defined(_metric_value(r, metric))]
            bundle = model.head(codec, metric)
            by_eb: dict[float, list] = {}
            for r in rows:
                by_eb.setdefault(r.eb_rel, []).append(r)
            for eb in sorted(by_eb):
                grp = by_eb[eb]
                idx = np.array([key_index[(r.field_name, r.timestep, r.block_id)] for r in grp])
                preds = bundle.predict(feats[idx], eb)
                for r, p in zip(grp, preds):
                    orig = _metric_value(r, metric)
                    pe = quality.percentage_error(orig, float(p)) if orig != 0 else UNDEFINED
                    out_rows.append(
                        {
                            "field": r.field_name,
                            "timestep": r.timestep,
                            "block_id": r.block_id,
                            "codec": codec,
                            "metric": metric,
                            "eb_rel": r.eb_rel,
                            "orig": float(orig),
                            "pred": float(p),
                            "pe": pe,
                        }
                    )
    elif granularity == "field":
        if k_blocks is None:
            k_blocks = dataset.block_spec.per_volume
        ebs = labels.eb_values()
        codec_names = labels.codecs()
        volume_keys = sorted({(r.field_name, r.timestep) for r in labels.rows})
        for field_name, ts in volume_keys:
            volume = dataset.volume(field_name, ts)
            fresh_seed = int(
                np.random.SeedSequence([seed, 0xE5A1, dataset.field_index(field_name), ts])
                .generate_state(1, np.uint64)[0]
            )
            fresh = sample_blocks(volume, dataset.block_spec.dims, k_blocks, fresh_seed)
            arr = np.stack([minmax_normalize(b)[0].data for b in fresh])
            feats = model.features(arr)
            for codec in codec_names:
                cid = CodecId.from_name(codec)
                for eb in ebs:
                    outcome = compress_roundtrip(cid, volume, eb)
                    gt = {
                        "cr": quality.compression_ratio(4 * volume.data.size, outcome.compressed_bytes),
                        "psnr": quality.psnr(volume.data, outcome.reconstruction),
                        "ssim": quality.ssim3d(volume.data, outcome.reconstruction),
                    }
                    for metric in METRICS:
                        if (codec, metric) not in pairs or not is_defined(gt[metric]):
                            continue
                        bundle = model.head(codec, metric)
                        pred = float(np.mean(bundle.predict(feats, eb)))
                        orig = float(gt[metric])
                        pe = quality.percentage_error(orig, pred) if orig != 0 else UNDEFINED
                        out_rows.append(
                            {
                                "field": field_name,
                                "timestep": ts,
                                "block_id": None,
                                "codec": codec,
                                "metric": metric,
                                "eb_rel": float(eb),
                                "orig": orig,
                                "pred": pred,
                                "pe": pe,
                            }
                        )
    else:
        raise ArgumentError(f"unknown granularity {granularity!r}")

    mape: dict[str, float] = {}
    groups: dict[str, list] = {}
    for row in out_rows:
        if row["orig"] == 0:
            continue
        groups.setdefault(_report_key(row["codec"], row["metric"], row["field"]), []).append(
            (row["orig"], row["pred"])
        )
    for key, pair_list in sorted(groups.items()):
        mape[key] = quality.mape(pair_list)

    return EvalReport(granularity=granularity, mape=mape,
                      pe_curves=_curves_from_rows(out_rows), rows=out_rows)


# --- ablation and harnesses --------------------------------------------------------


def ablation_moe(model: SurrogateModel, train_labels: LabelTable, test_labels: LabelTable,
                 dataset: Dataset, seeds=(0,), epochs: int = DESK_HEAD_EPOCHS,
                 lr0: float = DEFAULT_LR) -> list[dict]:
    """Side-by-side MAPE of plain-MLP (B) vs MoE (M) heads, matched seeds.

    Both kinds share the same frozen backbone features; no ordering claim is
    made about which wins.
    """
    results: dict[tuple[str, str, str], dict[str, list]] = {}
    for seed in seeds:
        for kind_tag, kind in (("B", "plain_mlp"), ("M", "moe")):
            probe = SurrogateModel(model.backbone, seed=model.seed)
            for codec in train_labels.codecs():
                for metric in METRICS:
                    cfg = HeadConfig(kind=kind, target_transform=default_transform(metric))
                    bundle, _ = train_head(probe, train_labels, dataset, codec, metric,
                                           head_cfg=cfg, epochs=epochs, lr0=lr0, seed=seed)
                    probe.add_head(bundle)
            report = evaluate(probe, test_labels, dataset, granularity="block")
            for key, value in report.mape.items():
                codec, metric, field_name = key.split("|")
                results.setdefault((codec, metric, field_name), {"B": [], "M": []})[kind_tag].append(value)
    rows = []
    for (codec, metric, field_name) in sorted(results):
        r = results[(codec, metric, field_name)]
        rows.append(
            {
                "codec": codec,
                "metric": metric,
                "field": field_name,
                "B": float(np.mean(r["B"])),
                "M": float(np.mean(r["M"])),
            }
        )
    return rows


def write_ablation_csv(rows: list[dict], path) -> None:
    lines = ["codec,metric,field,B,M"]
    for r in rows:
        lines.append(f"{r['codec']},{r['metric']},{r['field']},{repr(r['B'])},{repr(r['M'])}")
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class TimingReport:
    codec: str
    metric: str
    eb_grid: list
    reps: list  # per repetition: {"gt_cumulative": [...], "surrogate_cumulative": [...]}

    def gt_per_eb(self, rep: int) -> float:
        cum = self.reps[rep]["gt_cumulative"]
        return cum[-1] / len(cum)

    def surrogate_incremental(self, rep: int) -> float:
        cum = self.reps[rep]["surrogate_cumulative"]
        if len(cum) < 2:
            return 0.0
        return (cum[-1] - cum[0]) / (len(cum) - 1)


def timing_sweep(volume, codec: str, grid, model_path, metric: str = "cr",
                 k_blocks: int = 32, block_dims=(16, 16, 16), seed: int = 0,
                 repetitions: int = 1) -> TimingReport:
    """Wall-clock comparison of ground-truth metric evaluation vs surrogate.

    Ground truth pays compress + decompress + CR/PSNR/SSIM per eb on the full
    field; the surrogate pays a one-time model load + block feature
    extraction, then per-eb head inference only.
    """
    cid = CodecId.from_name(codec)
    ebs = [float(e) for e in np.asarray(grid).ravel()]
    reps = []
    for rep in range(repetitions):
        gt_cum = []
        total = 0.0
        for eb in ebs:
            t0 = time.perf_counter()
            outcome = compress_roundtrip(cid, volume, eb)
            quality.compression_ratio(4 * volume.data.size, outcome.compressed_bytes)
            quality.psnr(volume.data, outcome.reconstruction)
            quality.ssim3d(volume.data, outcome.reconstruction)
            total += time.perf_counter() - t0
            gt_cum.append(total)

        t0 = time.perf_counter()
        model = load_model(model_path)
        bundle = model.head(codec, metric)
        blocks = sample_blocks(volume, block_dims, k_blocks, seed)
        arr = np.stack([minmax_normalize(b)[0].data for b in blocks])
        feats = model.features(arr)
        setup = time.perf_counter() - t0
        sur_cum = []
        total = setup
        for eb in ebs:
            t0 = time.perf_counter()
            float(np.mean(bundle.predict(feats, eb)))
            total += time.perf_counter() - t0
            sur_cum.append(total)
        reps.append({"gt_cumulative": gt_cum, "surrogate_cumulative": sur_cum})
    return TimingReport(codec=codec, metric=metric, eb_grid=ebs, reps=reps)


def write_timing_csv(report: TimingReport, outdir, stem: str = "timing") -> list[Path]:
    """One CSV per repetition; wall-clock columns are nondeterministic."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for rep_i, rep in enumerate(report.reps):
        lines = [
            "# wall-clock columns (*_s) are nondeterministic across runs",
            "eb_index,eb_rel,gt_cumulative_s,surrogate_cumulative_s",
        ]
        for i, eb in enumerate(report.eb_grid):
            lines.append(
                f"{i},{repr(eb)},{repr(rep['gt_cumulative'][i])},{repr(rep['surrogate_cumulative'][i])}"
            )
        path = outdir / f"{stem}_rep{rep_i}.csv"
        path.write_text("\n".join(lines) + "\n")
        paths.append(path)
    return paths


def _train_joint_single(labels: LabelTable, dataset: Dataset, codec: str, metric: str,
                        backbone_cfg: BackboneConfig, epochs: int, lr0: float,
                        seed: int, block_batch: int = 16) -> float:
    """From-scratch baseline: backbone + one real head trained jointly.

    Returns the wall-clock seconds spent; used by the training-cost harness.
    """
    rows = [r for r in labels.rows if r.codec == codec and is_defined(_metric_value(r, metric))]
    if not rows:
        raise DataError(f"no defined ({codec},{metric}) targets")
    t_start = time.perf_counter()
    keys = sorted({(r.field_name, r.timestep, r.block_id) for r in rows})
    key_index = {k: i for i, k in enumerate(keys)}
    blocks = dataset.block_array(keys)

    emb_cfg = EbEmbedderConfig(eb_log_range=eb_log_range_of(labels))
    head_cfg = HeadConfig(kind="moe", target_transform=default_transform(metric))
    targets_raw = np.array([_metric_value(r, metric) for r in rows], dtype=np.float64)
    head_cfg.target_norm = fit_target_norm(targets_raw, head_cfg.target_transform)
    y = normalize_target(targets_raw, head_cfg.target_transform, head_cfg.target_norm).astype(np.float32)

    backbone = Backbone(backbone_cfg, seed=seed)
    bundle = make_head_bundle(codec, metric, emb_cfg, head_cfg, backbone_cfg.feature_dim, seed=seed)
    params = backbone.params + bundle.all_params()
    state = ad.AdamState()
    row_block = np.array([key_index[(r.field_name, r.timestep, r.block_id)] for r in rows])
    row_u = bundle.embedder.normalize([r.eb_rel for r in rows]).astype(np.float32)
    rows_by_block: dict[int, list[int]] = {}
    for ri, bi in enumerate(row_block):
        rows_by_block.setdefault(int(bi), []).append(ri)

    shuffle_rng = np.random.default_rng(np.random.SeedSequence([seed, 31]))
    nb = len(keys)
    for epoch in range(epochs):
        lr = ad.step_decay_lr(epoch, epochs, lr0)
        perm = shuffle_rng.permutation(nb)
        for start in range(0, nb, block_batch):
            chunk = perm[start : start + block_batch]
            row_ids = np.concatenate([rows_by_block[int(b)] for b in chunk])
            local = {int(b): i for i, b in enumerate(chunk)}
            gather = np.array([local[int(b)] for b in row_block[row_ids]])
            ad.zero_grads(params)
            feats = backbone.forward(ad.Tensor(blocks[chunk][:, None]))
            fr = ad.index_select(feats, gather)
            ur = ad.Tensor(row_u[row_ids][:, None])
            out, _ = bundle.forward_rows(fr, ur)
            loss = ad.rmse_loss(out, ad.Tensor(y[row_ids][:, None]))
            if not np.isfinite(float(loss.data)):
                raise TrainingError(f"non-finite joint loss at epoch {epoch}")
            ad.backward(loss)
            ad.adam_step(params, state, lr)
    return time.perf_counter() - t_start


def training_cost_comparison(labels: LabelTable, dataset: Dataset,
                             backbone_cfg: BackboneConfig | None = None,
                             phase1_epochs: int = 12, phase2_epochs: int = 8,
                             lr0: float = DEFAULT_LR, seed: int = 0) -> dict:
    """Wall-clock cost of two-stage training vs per-task from-scratch training.

    The baseline trains backbone + head jointly per (codec, metric) task for
    the phase-1 epoch count (mirroring an equal-epoch comparison); the
    two-stage path trains the backbone once and then each head on cached
    features.
    """
    if backbone_cfg is None:
        backbone_cfg = BackboneConfig(block_dims=tuple(dataset.block_spec.dims))
    pairs = [(c, m) for c in labels.codecs() for m in METRICS]

    t0 = time.perf_counter()
    backbone, _ = train_backbone(labels, dataset, backbone_cfg,
                                 epochs=phase1_epochs, lr0=lr0, seed=seed)
    backbone_s = time.perf_counter() - t0
    model = SurrogateModel(backbone, seed=seed)
    head_times = []
    for codec, metric in pairs:
        t0 = time.perf_counter()
        bundle, _ = train_head(model, labels, dataset, codec, metric,
                               epochs=phase2_epochs, lr0=lr0, seed=seed)
        model.add_head(bundle)
        head_times.append(time.perf_counter() - t0)
    two_stage_s = backbone_s + sum(head_times)

    baseline_times = [
        _train_joint_single(labels, dataset, codec, metric, backbone_cfg,
                            epochs=phase1_epochs, lr0=lr0, seed=seed)
        for codec, metric in pairs
    ]
    baseline_s = sum(baseline_times)
    return {
        "backbone_s": backbone_s,
        "head_s": head_times,
        "two_stage_s": two_stage_s,
        "baseline_per_task_s": baseline_times,
        "baseline_s": baseline_s,
        "ratio": two_stage_s / baseline_s,
    }
