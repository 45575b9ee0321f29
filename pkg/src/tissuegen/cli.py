"""Command-line entry point for the full pipeline.

Commands compose through the filesystem only: datasets live under
``<root>/<dataset>/`` with a line-delimited manifest, training runs write
checkpoints plus ``metrics.log`` and ``run_summary.json`` into a run
directory, and ``serve`` exposes frozen checkpoints over HTTP.

Exit codes: 0 success, 1 validation error, 2 runtime failure. With
``TISSUEGEN_REPRO=1`` every randomized command must be given an explicit
``--seed``. All dimension strings are HEIGHTxWIDTH.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

__all__ = ["main", "build_parser"]

STAIN_BY_FLAG = {"he": "H&E", "ihc": "IHC"}


class CliError(ValueError):
    """Validation failure: bad flags, missing datasets/models, bad values."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _parse_dims(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except Exception:
        raise CliError(f"expected HxW dimensions like 64x128, got {text!r}")


def _require_seed(args):
    if os.environ.get("TISSUEGEN_REPRO") in ("1", "true", "yes") \
            and getattr(args, "seed", None) is None:
        raise CliError("TISSUEGEN_REPRO is set: this command requires an "
                       "explicit --seed")


def _seed(args, default=0) -> int:
    return default if args.seed is None else args.seed


def _manifest_for(args):
    from .data import read_manifest

    path = Path(args.root) / args.dataset / "manifest.jsonl"
    if not path.exists():
        raise CliError(f"dataset {args.dataset!r} not found: no manifest at {path}")
    return read_manifest(path)


def _load_checkpoint(path_str: str):
    from .checkpoint import Checkpoint

    path = Path(path_str)
    if not path.exists():
        raise CliError(f"checkpoint {path_str!r} not found")
    return Checkpoint.load(path)


def build_parser() -> _Parser:
    parser = _Parser(prog="tissuegen",
                     description="Coarse-to-fine tissue mask translation and "
                                 "RGB histopathology synthesis.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="patch source images into a dataset")
    p.add_argument("--source", required=True, help="directory of RGB images")
    p.add_argument("--dataset", required=True)
    p.add_argument("--stain", required=True, choices=sorted(STAIN_BY_FLAG))
    p.add_argument("--root", default="datasets")
    p.add_argument("--patch", default="512x1024", help="patch dims HxW")
    p.add_argument("--air-limit", type=float, default=0.85,
                   help="exclude patches whose air fraction exceeds this")
    p.add_argument("--threshold", type=int, default=None,
                   help="air threshold override (default 204 H&E / 235 IHC)")
    p.add_argument("--n-test", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("make-pairs", help="write coarse masks for a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--root", default="datasets")

    p = sub.add_parser("synth-corpus", help="procedural desk-scale dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dims", default="64x128", help="mask dims HxW")
    p.add_argument("--dataset", default="synth")
    p.add_argument("--root", default="datasets")
    p.add_argument("--stain", default="he", choices=sorted(STAIN_BY_FLAG))
    p.add_argument("--n-test", type=int, default=None)

    p = sub.add_parser("train", help="train one model family")
    p.add_argument("kind", choices=["pix2pix", "cyclegan", "hd"])
    p.add_argument("--dataset", required=True)
    p.add_argument("--root", default="datasets")
    p.add_argument("--config", default=None,
                   help="key=value file; overrides flags, which override defaults")
    p.add_argument("--run", default=None, help="run directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs-const", type=int, default=None)
    p.add_argument("--epochs-decay", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--patch", default=None, help="training patch dims HxW")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = sub.add_parser("generate", help="run inference on one PNG")
    p.add_argument("mode", choices=["fine", "rgb", "pipeline"])
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--rgb-model", default=None, help="RGB checkpoint (pipeline)")
    p.add_argument("--in", dest="input", required=True, help="input mask PNG")
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--fine-out", default=None, help="also write the fine mask PNG")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("evaluate", help="score checkpoints against a test split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--root", default="datasets")
    p.add_argument("--models", required=True,
                   help="comma-separated checkpoints ('identity' allowed)")
    p.add_argument("--report", default=None, help="write the table here")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--limit", type=int, default=None,
                   help="cap the number of test records")

    p = sub.add_parser("grid-report", help="projection grid similarity analysis")
    p.add_argument("--dataset", required=True)
    p.add_argument("--root", default="datasets")
    p.add_argument("--model", required=True)
    p.add_argument("--grid", default="3x3")
    p.add_argument("--plots", default=None, help="directory for plot images")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--min-count", type=int, default=5)

    p = sub.add_parser("serve", help="HTTP service over a checkpoint registry")
    p.add_argument("--registry", required=True)
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--artifacts", default=None)

    return parser


_INT_CONFIG_KEYS = {"batch_size", "epochs_const", "epochs_decay", "seed",
                    "checkpoint_every", "patch_height", "patch_width",
                    "gen_base_width", "gen_depth", "disc_base_width",
                    "disc_n_layers"}
_FLOAT_CONFIG_KEYS = {"lr0", "beta1", "beta2", "gen_dropout",
                      "binarize_threshold"}


def _train_config(args) -> "TrainConfig":
    from .losses import LossWeights
    from .training import TrainConfig

    values = {}
    if args.seed is not None:
        values["seed"] = args.seed
    if args.epochs_const is not None:
        values["epochs_const"] = args.epochs_const
    if args.epochs_decay is not None:
        values["epochs_decay"] = args.epochs_decay
    if args.checkpoint_every is not None:
        values["checkpoint_every"] = args.checkpoint_every
    if args.patch is not None:
        values["patch_height"], values["patch_width"] = _parse_dims(args.patch)
    weight_values = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file {args.config!r} not found")
        for line_no, line in enumerate(path.read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise CliError(f"{path}:{line_no}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key in ("lambda_l1", "lambda_cyc", "hd_mse", "hd_bce",
                       "hd_feat_match"):
                weight_values[key] = float(value)
            elif key in ("patch", "dims"):
                values["patch_height"], values["patch_width"] = _parse_dims(value)
            elif key in _INT_CONFIG_KEYS:
                values[key] = int(value)
            elif key in _FLOAT_CONFIG_KEYS:
                values[key] = float(value)
            elif key == "deterministic":
                values[key] = value.lower() in ("1", "true", "yes")
            else:
                raise CliError(f"{path}:{line_no}: unknown config key {key!r}")
    weights = LossWeights(
        lambda_l1=weight_values.get("lambda_l1", 100.0),
        lambda_cyc=weight_values.get("lambda_cyc", 10.0),
        hd_weights={"mse": weight_values.get("hd_mse", 1.0),
                    "bce": weight_values.get("hd_bce", 1.0),
                    "feat_match": weight_values.get("hd_feat_match", 1.0)})
    return TrainConfig(weights=weights, **values)


def _cmd_ingest(args) -> int:
    from .data import ingest_sources

    _require_seed(args)
    source = Path(args.source)
    if not source.is_dir():
        raise CliError(f"source directory {args.source!r} not found")
    patch_h, patch_w = _parse_dims(args.patch)
    manifest = ingest_sources(
        source, args.root, args.dataset, STAIN_BY_FLAG[args.stain],
        patch_h=patch_h, patch_w=patch_w, air_limit=args.air_limit,
        air_threshold=args.threshold, n_test=args.n_test, seed=_seed(args))
    print(f"ingested {len(manifest.records)} patches into "
          f"{Path(args.root) / args.dataset}")
    return 0


def _cmd_make_pairs(args) -> int:
    from .data import build_pairs

    manifest = _manifest_for(args)
    build_pairs(manifest)
    print(f"wrote {len(manifest.records)} coarse masks for {args.dataset!r}")
    return 0


def _cmd_synth_corpus(args) -> int:
    from .data import build_synth_dataset

    _require_seed(args)
    h, w = _parse_dims(args.dims)
    manifest = build_synth_dataset(
        Path(args.root), args.dataset, n=args.n, seed=_seed(args), h=h, w=w,
        stain=STAIN_BY_FLAG[args.stain], n_test=args.n_test)
    print(f"wrote procedural dataset {args.dataset!r}: "
          f"{len(manifest.records)} records at {h}x{w}")
    return 0


def _cmd_train(args) -> int:
    from .training import train_cyclegan, train_hd, train_pix2pix

    _require_seed(args)
    manifest = _manifest_for(args)
    config = _train_config(args)
    run_dir = Path(args.run) if args.run else \
        Path(args.root) / "runs" / f"{args.dataset}_{args.kind}_seed{config.seed}"
    resume = _load_checkpoint(args.resume) if args.resume else None
    trainer = {"pix2pix": train_pix2pix, "cyclegan": train_cyclegan,
               "hd": train_hd}[args.kind]
    ckpt = trainer(manifest, config, run_dir, resume_from=resume)
    summary = {
        "command": "train", "kind": args.kind, "dataset": args.dataset,
        "seed": config.seed, "epochs": config.total_epochs,
        "steps": ckpt.meta["next_step"],
        "config_digest": ckpt.meta["config_digest"],
        "metrics_digest": ckpt.meta["metrics_digest"],
        "final_checkpoint": str(run_dir / "ckpt_final"),
    }
    (run_dir / "run_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"trained {args.kind} on {args.dataset!r} for {config.total_epochs} "
          f"epochs -> {run_dir / 'ckpt_final'}")
    return 0


def _cmd_generate(args) -> int:
    from .masks import read_mask_png, write_mask_png
    from .data import write_rgb_png
    from .service import resample_mask
    from .training import infer_fine, infer_rgb

    _require_seed(args)
    input_path = Path(args.input)
    if not input_path.exists():
        raise CliError(f"input PNG {args.input!r} not found")
    mask = read_mask_png(input_path)
    ckpt = _load_checkpoint(args.model)
    seed = _seed(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    if args.mode == "fine":
        mask, resampled = resample_mask(mask, ckpt.native_dims)
        result = infer_fine(ckpt, mask, seed=seed)
        write_mask_png(result, out)
    elif args.mode == "rgb":
        mask, resampled = resample_mask(mask, ckpt.native_dims)
        write_rgb_png(infer_rgb(ckpt, mask), out)
    else:
        if not args.rgb_model:
            raise CliError("pipeline mode requires --rgb-model")
        rgb_ckpt = _load_checkpoint(args.rgb_model)
        mask, resampled = resample_mask(mask, ckpt.native_dims)
        fine = infer_fine(ckpt, mask, seed=seed)
        if args.fine_out:
            write_mask_png(fine, Path(args.fine_out))
        fine_in, _ = resample_mask(fine, rgb_ckpt.native_dims)
        write_rgb_png(infer_rgb(rgb_ckpt, fine_in), out)
    note = " (input resampled)" if resampled else ""
    print(f"wrote {out}{note}")
    return 0


def _cmd_evaluate(args) -> int:
    from .evaluation import compare_models

    _require_seed(args)
    manifest = _manifest_for(args)
    checkpoints = []
    names = []
    for token in args.models.split(","):
        token = token.strip()
        if token == "identity":
            checkpoints.append("identity")
            names.append("identity")
        else:
            checkpoints.append(_load_checkpoint(token))
            names.append(Path(token).stem if Path(token).suffix else Path(token).name)
    report = compare_models([manifest], checkpoints, method_names=names,
                            seed=_seed(args), limit=args.limit)
    table = report.to_table()
    print(table)
    if args.report:
        out = Path(args.report)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(table + "\n")
        out.with_suffix(out.suffix + ".json").write_text(report.to_json() + "\n")
    return 0


def _cmd_grid_report(args) -> int:
    import numpy as np

    from .evaluation import embed, grid_similarity, plot_grid_analysis, tsne_project
    from .evaluation import EmbeddingSet
    from .masks import read_mask_png, tissue_fraction
    from .training import infer_fine

    _require_seed(args)
    manifest = _manifest_for(args)
    ckpt = _load_checkpoint(args.model)
    rows, cols = _parse_dims(args.grid)
    seed = _seed(args)
    records = manifest.split_records("test")
    if args.limit:
        records = records[:args.limit]
    if not records:
        raise CliError(f"dataset {args.dataset!r} has no test records")
    coarse = [read_mask_png(manifest.resolve(r.coarse_mask_path)) for r in records]
    fine = [read_mask_png(manifest.resolve(r.fine_mask_path)) for r in records]
    generated = [infer_fine(ckpt, c, seed=seed + i) for i, c in enumerate(coarse)]
    real_e = embed(fine, labels=["real"] * len(fine))
    synth_e = embed(generated, labels=["synthetic"] * len(generated))
    union = EmbeddingSet(np.vstack([real_e.matrix, synth_e.matrix]),
                         real_e.extractor_id, real_e.labels + synth_e.labels)
    coords = tsne_project(union, seed=seed, perplexity=args.perplexity)
    analysis = grid_similarity(real_e, synth_e, coords, grid=(rows, cols),
                               min_count=args.min_count)
    out_dir = Path(args.out) if args.out else \
        Path(args.root) / "reports" / f"{args.dataset}_grid"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "grid.json").write_text(
        json.dumps(analysis.to_dict(), indent=2) + "\n")
    np.savetxt(out_dir / "projection.csv", coords, delimiter=",",
               header="x,y", comments="")
    if args.plots:
        plot_dir = Path(args.plots)
        plot_dir.mkdir(parents=True, exist_ok=True)
        plot_grid_analysis(analysis, len(fine), plot_dir / "projection_grid.png")
    print(f"grid report -> {out_dir}  "
          f"(global FID {analysis.global_avg:.4f}, cell avg {analysis.cell_avg:.4f})")
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import ModelRegistry, create_app

    registry_dir = Path(args.registry)
    if not registry_dir.is_dir():
        raise CliError(f"registry directory {args.registry!r} not found")
    registry = ModelRegistry.from_dir(registry_dir)
    artifacts = Path(args.artifacts) if args.artifacts else registry_dir / "artifacts"
    app = create_app(registry, artifacts)
    print(f"serving {len(registry.list_models())} models on "
          f"{args.host}:{args.port}")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


_COMMANDS = {
    "ingest": _cmd_ingest,
    "make-pairs": _cmd_make_pairs,
    "synth-corpus": _cmd_synth_corpus,
    "train": _cmd_train,
    "generate": _cmd_generate,
    "evaluate": _cmd_evaluate,
    "grid-report": _cmd_grid_report,
    "serve": _cmd_serve,
}


def main(argv=None) -> int:
    import torch

    torch.set_num_threads(1)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as exc:  # noqa: BLE001 - runtime failures exit 2
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
