"""Run the ablation ladder on a generated benchmark and tabulate target F1.

Generates the two-domain benchmark (unless --data points at an existing one),
trains every requested preset with a shared seed, and writes a markdown
results table plus a machine-readable JSON summary into the output directory.

Usage:
    python scripts/run_ablations.py --out runs/ablations
    python scripts/run_ablations.py --out runs/ablations --rounds 2 --presets full,rgb-only
"""

import argparse
import json
import sys
import time
from pathlib import Path

import torch

from roadadapt import cli, dataio, scenegen, trainer

DEFAULT_LADDER = ("rgb-only", "rgb-sfa", "rgb-sfa-sn", "full", "sfa-sn-only", "sfa-both")


def parse_args(argv):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True, help="directory for runs and the results table")
    parser.add_argument("--data", default=None, help="existing benchmark root (default: generate one under --out)")
    parser.add_argument("--seed", type=int, default=0, help="benchmark and training seed")
    parser.add_argument("--rounds", type=int, default=1, help="self-training rounds per preset")
    parser.add_argument(
        "--presets",
        default=",".join(DEFAULT_LADDER),
        help="comma-separated preset names (default: the full ladder)",
    )
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    torch.set_num_threads(1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.data is None:
        bench = out / "bench"
        if not bench.exists():
            print(f"generating benchmark at {bench}")
            scenegen.generate_benchmark(scenegen.default_benchmark_config(seed=args.seed), bench, write_sn=True)
    else:
        bench = Path(args.data)

    presets = [p.strip() for p in args.presets.split(",") if p.strip()]
    rows = []
    for preset in presets:
        entries = cli.ablation_preset(preset)
        entries["data.root"] = str(bench)
        entries["trainer.rounds"] = args.rounds
        entries["trainer.seed"] = args.seed
        cfg = dataio.config_from_dotted(entries)
        run_dir = out / "runs" / preset
        print(f"training {preset} ({args.rounds} round{'s' if args.rounds != 1 else ''}) -> {run_dir}")
        t0 = time.monotonic()
        results = trainer.run_rounds(cfg, run_dir)
        elapsed = time.monotonic() - t0
        final = results[-1].scores
        rows.append(
            {
                "preset": preset,
                "f1_by_round": {r.round_index: r.scores["F1"] for r in results},
                "scores": final,
                "seconds": round(elapsed, 1),
            }
        )
        print(f"  F1={final['F1']:.4f} MaxF={final['MaxF']:.4f} ({elapsed:.0f}s)")

    lines = [
        f"# Ablation ladder (seed {args.seed}, {args.rounds} round{'s' if args.rounds != 1 else ''})",
        "",
        "| preset | " + " | ".join(f"F1 r{r}" for r in range(1, args.rounds + 1)) + " | PRE | REC | IoU | MaxF |",
        "|---|" + "---|" * (args.rounds + 4),
    ]
    for row in rows:
        per_round = " | ".join(f"{row['f1_by_round'].get(r, float('nan')):.4f}" for r in range(1, args.rounds + 1))
        s = row["scores"]
        lines.append(
            f"| {row['preset']} | {per_round} | {s['PRE']:.4f} | {s['REC']:.4f} | {s['IoU']:.4f} | {s['MaxF']:.4f} |"
        )
    table = "\n".join(lines) + "\n"
    (out / "ablations.md").write_text(table)
    (out / "ablations.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    print()
    print(table)
    print(f"wrote {out / 'ablations.md'}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
