"""Command-line entry point exposing every pipeline stage.

Every subcommand routes randomness through ``--seed`` (environment variable
``DCQ_SEED`` is the fallback), materializes all defaults, and echoes the
resolved configuration to ``<outdir>/config.json``; re-running with the same
resolved config reproduces identical output bytes (wall-clock columns in
timing CSVs excepted). Exit codes: 0 success, 1 domain/pipeline error (with a
one-line ``error:<category>: ...`` tag on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .codec import CodecId
from .errors import ArgumentError, DcqError
from .field import (
    Manifest,
    ManifestField,
    SyntheticSpec,
    generate_synthetic,
    load_manifest,
    load_raw,
    minmax_normalize,
    sample_blocks,
    save_manifest,
    save_raw,
)
from .pipeline import BlockSpec, Dataset, LabelTable, SplitSpec
from .surrogate import BackboneConfig, HeadConfig, SurrogateModel, load_model, save_model

SUBCOMMANDS = (
    "gen-synthetic",
    "label",
    "train-backbone",
    "train-head",
    "predict",
    "eval",
    "ablate-moe",
    "time-sweep",
    "inspect-model",
)

_DEFAULTS = {
    "gen-synthetic": {
        "dims": "64,64,64", "timesteps": 4, "fields": 1, "n_modes": 8,
        "max_frequency": 4.0, "noise_amplitude": 0.01, "drift": 0.03,
        "name": "synth", "workers": 0,
    },
    "label": {
        "codecs": "pred-eb,xform-eb", "eb_preset": "", "eb_min": 1e-4,
        "eb_max": 1e-2, "eb_points": pl.DEFAULT_EB_POINTS,
        "block_dims": "16,16,16", "blocks_per_volume": 32, "workers": 0,
    },
    "train-backbone": {
        "epochs": pl.BACKBONE_EPOCHS, "lr": pl.DEFAULT_LR, "block_batch": 16,
        "feature_dim": 64, "desk": False, "workers": 0,
    },
    "train-head": {
        "epochs": pl.HEAD_EPOCHS, "lr": pl.DEFAULT_LR, "head_kind": "moe",
        "batch": 256, "desk": False, "workers": 0,
    },
    "predict": {"blocks": 32, "block_dims": "16,16,16", "workers": 0},
    "eval": {"granularity": "block", "k_blocks": 32, "workers": 0},
    "ablate-moe": {
        "split": "odd_even", "seeds": "", "epochs": pl.DESK_HEAD_EPOCHS,
        "lr": pl.DEFAULT_LR, "workers": 0,
    },
    "time-sweep": {
        "codec": "pred-eb", "metric": "cr", "eb_min": 1e-4, "eb_max": 1e-2,
        "eb_points": pl.DEFAULT_EB_POINTS, "k_blocks": 32,
        "block_dims": "16,16,16", "repetitions": 5, "field": "",
        "timestep": 0, "workers": 0,
    },
    "inspect-model": {"workers": 0},
}


def _dims(text: str) -> tuple[int, int, int]:
    parts = [p for p in str(text).split(",") if p]
    if len(parts) != 3:
        raise ArgumentError(f"expected three comma-separated dims, got {text!r}")
    return tuple(int(p) for p in parts)


def _build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="dcq", description=__doc__)
    sub = top.add_subparsers(dest="subcommand", required=True)

    def add(cmd, help_text, **flags):
        p = sub.add_parser(cmd, help=help_text)
        p.add_argument("--config", help="JSON config echoed by a previous run; explicit flags override")
        p.add_argument("--seed", type=int, help="root seed (fallback: env DCQ_SEED, then 0)")
        p.add_argument("--workers", type=int, help="max parallel label workers (0 = all cores)")
        for flag, (ftype, fhelp) in flags.items():
            arg = "--" + flag.replace("_", "-")
            if ftype is bool:
                p.add_argument(arg, action="store_true", default=argparse.SUPPRESS, help=fhelp)
            else:
                p.add_argument(arg, type=ftype, default=argparse.SUPPRESS, help=fhelp)
        return p

    add("gen-synthetic", "write seeded synthetic raw volumes plus a manifest",
        outdir=(str, "output directory"), dims=(str, "nx,ny,nz (default 64,64,64)"),
        timesteps=(int, "number of timesteps (default 4)"),
        fields=(int, "number of fields (default 1)"),
        n_modes=(int, "sinusoidal modes per field (default 8)"),
        max_frequency=(float, "max cycles per axis (default 4.0)"),
        noise_amplitude=(float, "uniform noise fraction (default 0.01)"),
        drift=(float, "per-timestep perturbation scale (default 0.03)"),
        name=(str, "dataset name (default synth)"))

    add("label", "build the ground-truth label table",
        manifest=(str, "dataset manifest JSON"), outdir=(str, "output directory"),
        codecs=(str, "comma list (default pred-eb,xform-eb)"),
        eb_preset=(str, f"one of {sorted(pl.EB_PRESETS)} (overrides eb-min/eb-max)"),
        eb_min=(float, "grid lower bound (default 1e-4)"),
        eb_max=(float, "grid upper bound (default 1e-2)"),
        eb_points=(int, "grid size (default 20)"),
        block_dims=(str, "bx,by,bz (default 16,16,16)"),
        blocks_per_volume=(int, "sampled blocks per (field, timestep) (default 32)"))

    add("train-backbone", "phase 1: train the shared feature backbone",
        labels=(str, "label CSV from `label`"), manifest=(str, "dataset manifest JSON"),
        outdir=(str, "output directory (writes model.dcqm)"),
        epochs=(int, "training epochs (default 250; --desk: 100)"),
        lr=(float, "initial learning rate (default 0.01)"),
        block_batch=(int, "blocks per optimizer step (default 16)"),
        feature_dim=(int, "backbone feature size (default 64)"),
        desk=(bool, "desk preset: fewer epochs for CI-scale runs"))

    add("train-head", "phase 2: train one (codec, metric) head",
        model=(str, "model file with a trained backbone"),
        labels=(str, "label CSV"), manifest=(str, "dataset manifest JSON"),
        codec=(str, "pred-eb or xform-eb"), metric=(str, "cr, psnr, or ssim"),
        outdir=(str, "output directory (writes model.dcqm)"),
        head_kind=(str, "moe or plain_mlp (default moe)"),
        epochs=(int, "training epochs (default 150; --desk: 60)"),
        lr=(float, "initial learning rate (default 0.01)"),
        batch=(int, "rows per optimizer step (default 256)"),
        desk=(bool, "desk preset: fewer epochs"))

    add("predict", "predict one metric value for a raw volume",
        model=(str, "model file"), codec=(str, "codec name"), metric=(str, "metric name"),
        eb=(float, "relative error bound"), input=(str, "raw volume file"),
        dims=(str, "nx,ny,nz of the raw volume"),
        blocks=(int, "blocks to sample and average (default 32)"),
        block_dims=(str, "bx,by,bz (default 16,16,16)"),
        outdir=(str, "optional directory for config echo and prediction.json"))

    add("eval", "evaluate a model against a label table",
        model=(str, "model file"), labels=(str, "label CSV"),
        manifest=(str, "dataset manifest JSON"), outdir=(str, "output directory"),
        granularity=(str, "block or field (default block)"),
        k_blocks=(int, "blocks per field for field granularity (default 32)"))

    add("ablate-moe", "train plain-MLP vs MoE heads and emit the B/M table",
        model=(str, "model file with a trained backbone"), labels=(str, "label CSV"),
        manifest=(str, "dataset manifest JSON"), outdir=(str, "output directory"),
        split=(str, "odd_even or last_timestep_out (default odd_even)"),
        seeds=(str, "comma list of head seeds (default: the root seed)"),
        epochs=(int, "head epochs per run (default 60)"),
        lr=(float, "initial learning rate (default 0.01)"))

    add("time-sweep", "compare ground-truth vs surrogate wall-clock per eb",
        model=(str, "model file with the needed head"),
        manifest=(str, "dataset manifest JSON"), outdir=(str, "output directory"),
        field=(str, "field name (default: first in manifest)"),
        timestep=(int, "timestep index (default 0)"),
        codec=(str, "codec name (default pred-eb)"), metric=(str, "metric (default cr)"),
        eb_min=(float, "grid lower bound (default 1e-4)"),
        eb_max=(float, "grid upper bound (default 1e-2)"),
        eb_points=(int, "grid size (default 20)"),
        k_blocks=(int, "surrogate blocks (default 32)"),
        block_dims=(str, "bx,by,bz (default 16,16,16)"),
        repetitions=(int, "repetitions (default 5)"))

    add("inspect-model", "print model metadata as JSON",
        model=(str, "model file"),
        outdir=(str, "optional directory for config echo"))
    return top


def _resolve(args: argparse.Namespace) -> dict:
    """Materialize the full config: defaults < --config file < explicit flags."""
    sub = args.subcommand
    resolved = dict(_DEFAULTS[sub])
    resolved["subcommand"] = sub
    if getattr(args, "config", None):
        doc = json.loads(Path(args.config).read_text())
        if doc.get("subcommand", sub) != sub:
            raise ArgumentError(
                f"config file is for subcommand {doc.get('subcommand')!r}, not {sub!r}"
            )
        for k, v in doc.items():
            if k != "subcommand":
                resolved[k] = v
    explicit = {k: v for k, v in vars(args).items()
                if k not in ("config", "subcommand") and v is not None}
    resolved.update(explicit)
    if "seed" not in resolved:
        resolved["seed"] = int(os.environ.get("DCQ_SEED", "0"))
    return resolved


def _require(cfg: dict, *keys):
    for k in keys:
        if k not in cfg or cfg[k] in (None, ""):
            raise ArgumentError(f"missing required option --{k.replace('_', '-')}")


def _echo_config(cfg: dict, outdir: Path) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.json").write_text(json.dumps(cfg, sort_keys=True, indent=2) + "\n")


def _workers(cfg: dict) -> int | None:
    w = int(cfg.get("workers", 0) or 0)
    return None if w <= 0 else w


def _grid_from(cfg: dict) -> np.ndarray:
    if cfg.get("eb_preset"):
        return pl.preset_grid(cfg["eb_preset"], int(cfg["eb_points"]))
    return pl.eb_grid(float(cfg["eb_min"]), float(cfg["eb_max"]), int(cfg["eb_points"]))


def _dataset_for(cfg: dict, labels: LabelTable, manifest: Manifest) -> Dataset:
    prov = labels.provenance
    if "block_dims" not in prov or "seed" not in prov:
        raise ArgumentError("label provenance is missing; regenerate labels with `dcq label`")
    spec = BlockSpec(dims=tuple(prov["block_dims"]), per_volume=prov["blocks_per_volume"])
    return Dataset(manifest, spec, seed=prov["seed"])


# --- subcommand bodies -----------------------------------------------------------


def _cmd_gen_synthetic(cfg: dict) -> int:
    _require(cfg, "outdir")
    outdir = Path(cfg["outdir"])
    outdir.mkdir(parents=True, exist_ok=True)
    dims = _dims(cfg["dims"])
    fields = []
    for fi in range(int(cfg["fields"])):
        fseed = int(np.random.SeedSequence([int(cfg["seed"]), 0xF1E1D, fi]).generate_state(1, np.uint64)[0])
        spec = SyntheticSpec(
            dims=dims, seed=fseed, n_modes=int(cfg["n_modes"]),
            max_frequency=float(cfg["max_frequency"]),
            noise_amplitude=float(cfg["noise_amplitude"]), drift=float(cfg["drift"]),
        )
        name = f"field{fi}"
        entries = []
        for ts in range(int(cfg["timesteps"])):
            vol = generate_synthetic(spec, ts, field_name=name)
            rel = f"{name}_t{ts}.f32"
            save_raw(vol, outdir / rel)
            entries.append((ts, rel))
        fields.append(ManifestField(name=name, timesteps=entries))
    manifest = Manifest(name=cfg["name"], dims=dims, fields=fields, base_dir=outdir)
    save_manifest(manifest, outdir / "manifest.json")
    _echo_config(cfg, outdir)
    print(json.dumps({"manifest": str(outdir / "manifest.json"),
                      "volumes": sum(len(f.timesteps) for f in fields)}, sort_keys=True))
    return 0


def _cmd_label(cfg: dict) -> int:
    _require(cfg, "manifest", "outdir")
    manifest = load_manifest(cfg["manifest"])
    outdir = Path(cfg["outdir"])
    grid = _grid_from(cfg)
    spec = BlockSpec(dims=_dims(cfg["block_dims"]), per_volume=int(cfg["blocks_per_volume"]))
    codecs = [c for c in str(cfg["codecs"]).split(",") if c]
    labels = pl.build_labels(manifest, codecs, grid, spec, seed=int(cfg["seed"]),
                             workers=_workers(cfg))
    outdir.mkdir(parents=True, exist_ok=True)
    labels.save(outdir / "labels.csv")
    _echo_config(cfg, outdir)
    print(json.dumps({"labels": str(outdir / "labels.csv"), "rows": len(labels.rows)}, sort_keys=True))
    return 0


def _cmd_train_backbone(cfg: dict) -> int:
    _require(cfg, "labels", "manifest", "outdir")
    labels = LabelTable.load(cfg["labels"])
    manifest = load_manifest(cfg["manifest"])
    dataset = _dataset_for(cfg, labels, manifest)
    epochs = pl.DESK_BACKBONE_EPOCHS if cfg.get("desk") else int(cfg["epochs"])
    bcfg = BackboneConfig(feature_dim=int(cfg["feature_dim"]),
                          block_dims=tuple(dataset.block_spec.dims))
    backbone, history = pl.train_backbone(labels, dataset, bcfg, epochs=epochs,
                                          lr0=float(cfg["lr"]), seed=int(cfg["seed"]),
                                          block_batch=int(cfg["block_batch"]))
    model = SurrogateModel(backbone, seed=int(cfg["seed"]))
    outdir = Path(cfg["outdir"])
    outdir.mkdir(parents=True, exist_ok=True)
    save_model(model, outdir / "model.dcqm")
    (outdir / "train_backbone_history.json").write_text(
        json.dumps({"epoch_loss": history.epoch_loss, "final_pair_mse": history.final_pair_mse},
                   sort_keys=True, indent=2) + "\n")
    _echo_config(cfg, outdir)
    print(json.dumps({"model": str(outdir / "model.dcqm"),
                      "final_loss": history.epoch_loss[-1]}, sort_keys=True))
    return 0


def _cmd_train_head(cfg: dict) -> int:
    _require(cfg, "model", "labels", "manifest", "codec", "metric", "outdir")
    model = load_model(cfg["model"])
    labels = LabelTable.load(cfg["labels"])
    manifest = load_manifest(cfg["manifest"])
    dataset = _dataset_for(cfg, labels, manifest)
    epochs = pl.DESK_HEAD_EPOCHS if cfg.get("desk") else int(cfg["epochs"])
    head_cfg = HeadConfig(kind=cfg["head_kind"],
                          target_transform=pl.default_transform(cfg["metric"]))
    bundle, history = pl.train_head(model, labels, dataset, cfg["codec"], cfg["metric"],
                                    head_cfg=head_cfg, epochs=epochs, lr0=float(cfg["lr"]),
                                    seed=int(cfg["seed"]), batch=int(cfg["batch"]))
    model.add_head(bundle)
    outdir = Path(cfg["outdir"])
    outdir.mkdir(parents=True, exist_ok=True)
    save_model(model, outdir / "model.dcqm")
    _echo_config(cfg, outdir)
    print(json.dumps({"model": str(outdir / "model.dcqm"),
                      "head": [cfg["codec"], cfg["metric"]],
                      "final_loss": history.epoch_loss[-1]}, sort_keys=True))
    return 0


def _cmd_predict(cfg: dict) -> int:
    _require(cfg, "model", "codec", "metric", "eb", "input", "dims")
    model = load_model(cfg["model"])
    CodecId.from_name(cfg["codec"])
    volume = load_raw(cfg["input"], _dims(cfg["dims"]))
    blocks = sample_blocks(volume, _dims(cfg["block_dims"]), int(cfg["blocks"]), int(cfg["seed"]))
    arr = np.stack([minmax_normalize(b)[0].data for b in blocks])
    preds = model.predict(cfg["codec"], cfg["metric"], arr, float(cfg["eb"]))
    result = {
        "codec": cfg["codec"],
        "metric": cfg["metric"],
        "eb_rel": float(cfg["eb"]),
        "blocks": int(cfg["blocks"]),
        "prediction": float(np.mean(preds)),
    }
    text = json.dumps(result, sort_keys=True)
    if cfg.get("outdir"):
        outdir = Path(cfg["outdir"])
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "prediction.json").write_text(text + "\n")
        _echo_config(cfg, outdir)
    print(text)
    return 0


def emit_plotdata(report: pl.EvalReport, outdir) -> list[Path]:
    """Write one (eb, ground truth, prediction, PE) CSV per curve.

    Undefined cells (e.g. PSNR on lossless rows) are left empty.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for key in sorted(report.pe_curves):
        codec, metric, field_name = key.split("|")
        lines = ["eb_rel,ground_truth,prediction,pe"]
        for pt in report.pe_curves[key]:
            cells = [repr(float(pt["eb_rel"]))]
            for col in ("orig", "pred", "pe"):
                v = pt[col]
                cells.append("" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v)))
            lines.append(",".join(cells))
        path = outdir / f"pred_{codec}_{metric}_{field_name}.csv"
        path.write_text("\n".join(lines) + "\n")
        paths.append(path)
    return paths


def _cmd_eval(cfg: dict) -> int:
    _require(cfg, "model", "labels", "manifest", "outdir")
    model = load_model(cfg["model"])
    labels = LabelTable.load(cfg["labels"])
    manifest = load_manifest(cfg["manifest"])
    dataset = _dataset_for(cfg, labels, manifest)
    report = pl.evaluate(model, labels, dataset, granularity=cfg["granularity"],
                         k_blocks=int(cfg["k_blocks"]), seed=int(cfg["seed"]))
    outdir = Path(cfg["outdir"])
    outdir.mkdir(parents=True, exist_ok=True)
    report.save(outdir / "report.json")
    emit_plotdata(report, outdir)
    _echo_config(cfg, outdir)
    print(json.dumps({"report": str(outdir / "report.json"), "mape": report.mape}, sort_keys=True))
    return 0


def _cmd_ablate_moe(cfg: dict) -> int:
    _require(cfg, "model", "labels", "manifest", "outdir")
    model = load_model(cfg["model"])
    labels = LabelTable.load(cfg["labels"])
    manifest = load_manifest(cfg["manifest"])
    dataset = _dataset_for(cfg, labels, manifest)
    train, test = pl.split(labels, SplitSpec(cfg["split"]))
    seeds = [int(s) for s in str(cfg["seeds"]).split(",") if s] or [int(cfg["seed"])]
    rows = pl.ablation_moe(model, train, test, dataset, seeds=seeds,
                           epochs=int(cfg["epochs"]), lr0=float(cfg["lr"]))
    outdir = Path(cfg["outdir"])
    outdir.mkdir(parents=True, exist_ok=True)
    pl.write_ablation_csv(rows, outdir / "ablation_moe.csv")
    _echo_config(cfg, outdir)
    print(json.dumps({"table": str(outdir / "ablation_moe.csv"), "rows": len(rows)}, sort_keys=True))
    return 0


def _cmd_time_sweep(cfg: dict) -> int:
    _require(cfg, "model", "manifest", "outdir")
    manifest = load_manifest(cfg["manifest"])
    field_name = cfg["field"] or manifest.field_names()[0]
    volume = manifest.load_volume(field_name, int(cfg["timestep"]))
    grid = pl.eb_grid(float(cfg["eb_min"]), float(cfg["eb_max"]), int(cfg["eb_points"]))
    report = pl.timing_sweep(volume, cfg["codec"], grid, cfg["model"], metric=cfg["metric"],
                             k_blocks=int(cfg["k_blocks"]), block_dims=_dims(cfg["block_dims"]),
                             seed=int(cfg["seed"]), repetitions=int(cfg["repetitions"]))
    outdir = Path(cfg["outdir"])
    paths = pl.write_timing_csv(report, outdir)
    summary = {
        "gt_per_eb_s": [report.gt_per_eb(i) for i in range(len(report.reps))],
        "surrogate_incremental_s": [report.surrogate_incremental(i) for i in range(len(report.reps))],
        "files": [str(p) for p in paths],
    }
    (outdir / "timing_summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    _echo_config(cfg, outdir)
    print(json.dumps(summary, sort_keys=True))
    return 0


def _cmd_inspect_model(cfg: dict) -> int:
    _require(cfg, "model")
    model = load_model(cfg["model"])
    doc = {
        "seed": model.seed,
        "backbone": {
            "config": model.backbone.cfg.to_dict(),
            "parameters": int(sum(p.tensor.size for p in model.backbone.params)),
            "sha256": model.backbone_hash(),
        },
        "heads": [
            {
                "codec": b.codec,
                "metric": b.metric,
                "kind": b.head_cfg.kind,
                "target_norm": list(b.head_cfg.target_norm) if b.head_cfg.target_norm else None,
                "eb_log_range": list(b.emb_cfg.eb_log_range),
                "parameters": int(sum(p.tensor.size for p in b.all_params())),
            }
            for (_, _), b in sorted(model.heads.items())
        ],
    }
    text = json.dumps(doc, sort_keys=True, indent=2)
    if cfg.get("outdir"):
        outdir = Path(cfg["outdir"])
        outdir.mkdir(parents=True, exist_ok=True)
        _echo_config(cfg, outdir)
    print(text)
    return 0


_HANDLERS = {
    "gen-synthetic": _cmd_gen_synthetic,
    "label": _cmd_label,
    "train-backbone": _cmd_train_backbone,
    "train-head": _cmd_train_head,
    "predict": _cmd_predict,
    "eval": _cmd_eval,
    "ablate-moe": _cmd_ablate_moe,
    "time-sweep": _cmd_time_sweep,
    "inspect-model": _cmd_inspect_model,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = _resolve(args)
        return _HANDLERS[args.subcommand](cfg)
    except DcqError as e:
        print(f"error:{e.category}: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error:io: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
