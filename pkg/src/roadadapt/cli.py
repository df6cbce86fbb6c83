"""Command-line interface.

Subcommands: gen-data, train, pseudo, eval, predict, visualize. Exit code 0
on success, 2 for configuration problems (bad keys, bad values, missing
required settings), 3 for runtime failures (missing files, withheld labels,
numeric problems).

Training configuration is layered, later layers winning:
defaults < --preset < --config file < --override entries < explicit flags.
Every run writes the fully resolved configuration into its output directory;
rerunning from that echo reproduces the run exactly.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import dataio, metrics, scenegen, trainer
from .dataio import TrainConfig
from .errors import ConfigError, RoadAdaptError

DATA_ROOT_ENV = "ROADADAPT_DATA_ROOT"

# Ablation presets, expressed as dotted-key overrides on the defaults. The
# plain SFA variants drop the guidance module and with it the auxiliary
# losses; "full" is the reference configuration and overrides nothing.
PRESETS: dict[str, dict] = {
    "full": {},
    "rgb-only": {
        "model.use_sn": False,
        "model.use_ccg": False,
        "sfa.enabled": False,
        "lambda.1s": 0.0,
        "lambda.2s": 0.0,
        "lambda.1t": 0.0,
        "lambda.2t": 0.0,
    },
    "rgb-sfa": {
        "model.use_sn": False,
        "model.use_ccg": False,
        "sfa.enabled": True,
        "sfa.modalities": "rgb",
        "lambda.1s": 0.0,
        "lambda.2s": 0.0,
        "lambda.1t": 0.0,
        "lambda.2t": 0.0,
    },
    "rgb-sfa-sn": {
        "model.use_sn": True,
        "model.use_ccg": False,
        "sfa.enabled": True,
        "sfa.modalities": "rgb",
        "lambda.1s": 0.0,
        "lambda.2s": 0.0,
        "lambda.1t": 0.0,
        "lambda.2t": 0.0,
    },
    "sfa-sn-only": {
        "model.use_sn": True,
        "model.use_ccg": False,
        "sfa.enabled": True,
        "sfa.modalities": "sn",
        "lambda.1s": 0.0,
        "lambda.2s": 0.0,
        "lambda.1t": 0.0,
        "lambda.2t": 0.0,
    },
    "sfa-both": {
        "model.use_sn": True,
        "model.use_ccg": False,
        "sfa.enabled": True,
        "sfa.modalities": "both",
        "lambda.1s": 0.0,
        "lambda.2s": 0.0,
        "lambda.1t": 0.0,
        "lambda.2t": 0.0,
    },
}


def ablation_preset(name: str) -> dict:
    """Dotted-key overrides for a named experiment variant."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}, expected one of {sorted(PRESETS)}")
    return dict(PRESETS[name])


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="roadadapt",
        description="Cross-modality domain adaptation for freespace detection.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic two-domain benchmark")
    p.add_argument("--out", required=True, help="output root; three split dirs are created")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--counts",
        default="64,64,32",
        help="sample counts as source-train,target-train,target-eval",
    )
    p.add_argument("--size", default="64x64", help="image size as HEIGHTxWIDTH")
    p.add_argument(
        "--no-sn-cache",
        action="store_true",
        help="skip writing surface-normal caches (they are derived on demand)",
    )

    p = sub.add_parser("train", help="run the full training round schedule")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="run directory for logs and checkpoints")
    p.add_argument("--resume", help="checkpoint to continue from (next round onward)")
    p.add_argument("--verbose", action="store_true", help="print per-epoch progress")

    p = sub.add_parser("pseudo", help="write a pseudo-label store from a checkpoint")
    p.add_argument("--checkpoint", "--ckpt", required=True)
    p.add_argument("--data", help="benchmark root (defaults to the checkpoint's)")
    p.add_argument("--out", required=True, help="run directory to place the store in")
    p.add_argument("--alpha", type=float, help="confidence threshold override")
    p.add_argument(
        "--round",
        type=int,
        help="round that will consume the store (default: checkpoint round + 1)",
    )

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled split")
    p.add_argument("--checkpoint", "--ckpt", required=True)
    p.add_argument("--data", help="benchmark root (defaults to the checkpoint's)")
    p.add_argument("--split", default="target-eval", choices=sorted(dataio.ROLES))
    p.add_argument("--out", help="also write the scores to this JSON file")

    p = sub.add_parser("predict", help="write probability and prediction maps")
    p.add_argument("--checkpoint", "--ckpt", required=True)
    p.add_argument("--data", help="benchmark root (defaults to the checkpoint's)")
    p.add_argument("--split", default="target-eval", choices=sorted(dataio.ROLES))
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)

    p = sub.add_parser("visualize", help="write error overlays (TP green, FN blue, FP red)")
    p.add_argument("--checkpoint", "--ckpt", required=True)
    p.add_argument("--data", help="benchmark root (defaults to the checkpoint's)")
    p.add_argument("--split", default="target-eval", choices=sorted(dataio.ROLES))
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    return parser


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help=f"benchmark root (or set {DATA_ROOT_ENV})")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named experiment variant")
    p.add_argument("--config", help="JSON file of dotted config keys")
    p.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="set one dotted config key (repeatable)",
    )
    p.add_argument("--backbone", choices=["small-cnn", "small-cnn-ms"])
    p.add_argument("--rounds", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int)
    for lam in ("1s", "2s", "3s", "1t", "2t", "3t", "4"):
        p.add_argument(f"--lambda.{lam}", dest=f"lambda_{lam}", type=float)


def resolve_train_config(args: argparse.Namespace) -> TrainConfig:
    entries: dict = {}
    if args.preset:
        entries.update(ablation_preset(args.preset))
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        loaded = json.loads(path.read_text()) if path.read_text().strip() else {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file must hold a JSON object: {path}")
        entries.update(loaded)
    for spec in args.override:
        key, value = dataio.parse_override(spec)
        entries[key] = value
    flags = {
        "model.backbone": args.backbone,
        "trainer.rounds": args.rounds,
        "trainer.alpha": args.alpha,
        "trainer.seed": args.seed,
        "lambda.1s": args.lambda_1s,
        "lambda.2s": args.lambda_2s,
        "lambda.3s": args.lambda_3s,
        "lambda.1t": args.lambda_1t,
        "lambda.2t": args.lambda_2t,
        "lambda.3t": args.lambda_3t,
        "lambda.4": args.lambda_4,
    }
    for key, value in flags.items():
        if value is not None:
            entries[key] = value
    if args.data:
        entries["data.root"] = args.data
    cfg = dataio.config_from_dotted(entries)
    if not cfg.data_root:
        env_root = os.environ.get(DATA_ROOT_ENV, "")
        if env_root:
            cfg.data_root = env_root
    if not cfg.data_root:
        raise ConfigError(
            f"no data root: pass --data, set data.root, or export {DATA_ROOT_ENV}"
        )
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# subcommand implementations


def cmd_gen_data(args: argparse.Namespace) -> int:
    try:
        counts = [int(x) for x in args.counts.split(",")]
        height, width = (int(x) for x in args.size.lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"bad --counts or --size value: {exc}") from exc
    if len(counts) != 3:
        raise ConfigError("--counts needs three comma-separated integers")
    bench = scenegen.default_benchmark_config(seed=args.seed)
    bench["counts"] = {
        "source-train": counts[0],
        "target-train": counts[1],
        "target-eval": counts[2],
    }
    for domain in ("source", "target"):
        bench[domain]["height"] = height
        bench[domain]["width"] = width
    layouts = scenegen.generate_benchmark(bench, args.out, write_sn=not args.no_sn_cache)
    for role in dataio.ROLES:
        print(f"{role}: {len(layouts[role].ids)} samples at {layouts[role].root}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_train_config(args)
    resume = Path(args.resume) if args.resume else None
    results = trainer.run_rounds(cfg, Path(args.out), resume=resume, quiet=not args.verbose)
    for result in results:
        line = {"round": result.round_index, **result.scores}
        print(json.dumps(line, sort_keys=True))
    return 0


def _load_run(checkpoint: str, data: str | None):
    model, cfg, payload = trainer.model_from_checkpoint(Path(checkpoint))
    root = data or cfg.data_root or os.environ.get(DATA_ROOT_ENV, "")
    if not root:
        raise ConfigError("no data root: pass --data or set data.root in the checkpoint")
    layouts = trainer.open_benchmark(Path(root))
    return model, cfg, payload, layouts


def _load_eval_split(layouts, cfg: TrainConfig, split: str, want_label: bool):
    return trainer.load_split(layouts[split], need_normals=cfg.use_sn, want_label=want_label)


def cmd_pseudo(args: argparse.Namespace) -> int:
    model, cfg, payload, layouts = _load_run(args.checkpoint, args.data)
    if args.alpha is not None:
        cfg.alpha = args.alpha
        cfg.validate()
    consumed = args.round if args.round is not None else int(payload["round"]) + 1
    if consumed < 2:
        raise ConfigError("pseudo labels are consumed from round 2 onward")
    target_train = _load_eval_split(layouts, cfg, "target-train", want_label=False)
    store_dir = trainer.write_pseudo_store(
        model, target_train, Path(args.out), consumed_in_round=consumed, cfg=cfg
    )
    print(f"wrote {len(target_train)} pseudo labels to {store_dir}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model, cfg, _payload, layouts = _load_run(args.checkpoint, args.data)
    split = _load_eval_split(layouts, cfg, args.split, want_label=True)
    scores = trainer.evaluate(model, split)
    text = json.dumps(scores, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    model, cfg, _payload, layouts = _load_run(args.checkpoint, args.data)
    split = _load_eval_split(layouts, cfg, args.split, want_label=False)
    probs = trainer.predict_probs(model, split)
    out = Path(args.out)
    (out / "prob").mkdir(parents=True, exist_ok=True)
    (out / "pred").mkdir(parents=True, exist_ok=True)
    for i, sample_id in enumerate(split.ids):
        dataio.save_gray(out / "prob" / f"{sample_id}.png", probs[i])
        pred = (probs[i] >= args.threshold).astype(np.uint8)
        dataio.save_label(out / "pred" / f"{sample_id}.png", pred)
    print(f"wrote {len(split.ids)} predictions to {out}")
    return 0


def cmd_visualize(args: argparse.Namespace) -> int:
    model, cfg, _payload, layouts = _load_run(args.checkpoint, args.data)
    split = _load_eval_split(layouts, cfg, args.split, want_label=True)
    probs = trainer.predict_probs(model, split)
    gts = split.label.numpy().astype(np.uint8)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, sample_id in enumerate(split.ids):
        pred = (probs[i] >= args.threshold).astype(np.uint8)
        rgb = split.rgb[i].permute(1, 2, 0).numpy()
        tinted = metrics.overlay(pred, gts[i], rgb)
        dataio.save_rgb(out / f"{sample_id}.png", tinted)
    extras = _write_debug_maps(model, cfg, split, out)
    print(f"wrote {len(split.ids)} overlays to {out}" + extras)
    return 0


def _write_debug_maps(model, cfg: TrainConfig, split, out: Path) -> str:
    """Cross-guidance attention and discriminator score maps as gray PNGs."""
    import torch
    import torch.nn.functional as F

    size = split.image_size
    written = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(split), 8):
            sl = slice(start, start + 8)
            sn = None if split.sn is None else split.sn[sl]
            output = model(split.rgb[sl], sn)
            maps: dict[str, torch.Tensor] = {}
            if output.attn_rgb is not None:
                maps["attention/rgb"] = output.attn_rgb
                maps["attention/sn"] = output.attn_sn
            for modality, disc in model.discriminators.items():
                feats = trainer._aligned_features(
                    output, modality, cfg.sfa_stage, cfg, detach=True
                )
                maps[f"discriminator/{modality}"] = disc(feats)
            for name, values in maps.items():
                big = F.interpolate(
                    values.unsqueeze(1), size=size, mode="bilinear", align_corners=False
                ).squeeze(1)
                directory = out / name
                directory.mkdir(parents=True, exist_ok=True)
                for j, sample_id in enumerate(split.ids[sl]):
                    dataio.save_gray(directory / f"{sample_id}.png", big[j].numpy())
                if name not in written:
                    written.append(name)
    return f" (+ {', '.join(written)})" if written else ""


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "pseudo": cmd_pseudo,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "visualize": cmd_visualize,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RoadAdaptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
