"""Command-line surface: dataset generation, pretraining, training, synthesis,
evaluation and the ablation harness.

Subcommands:
    gen-data               render a synthetic paired-face dataset
    pretrain-conditioners  train identity/expression/landmark/eval backbones
    train                  run the cycle-diffusion trainer
    synthesize             checkpoint + identity image(s) + style image(s) -> grid
    evaluate               full metric report on the test split
    ablate                 the four component-toggle rows; optional cycle-vs-
                           baseline aligned-score curves across seeds

`--data` defaults to $CYCLEFUSE_DATA_ROOT when unset.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

logger = logging.getLogger(__name__)


def _data_root(value: str | None) -> Path:
    root = value or os.environ.get("CYCLEFUSE_DATA_ROOT")
    if not root:
        raise SystemExit(
            "no dataset given: pass --data or set CYCLEFUSE_DATA_ROOT"
        )
    return Path(root)


def cmd_gen_data(args) -> int:
    from .data import generate_synthetic_dataset

    manifest = generate_synthetic_dataset(
        args.identities, args.expressions, args.resolution, args.seed,
        Path(args.out), num_points=args.landmarks,
        test_fraction=args.test_fraction,
    )
    print(f"wrote {len(manifest.entries)} images to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    from .config import ModelConfig
    from .pretrain import PretrainConfig, pretrain_conditioners

    model = ModelConfig(
        resolution=args.resolution, token_dim=args.token_dim,
        head_count=args.heads, num_landmarks=args.landmarks,
        trunk_width=args.trunk_width, eval_feature_dim=args.eval_dim,
    )
    cfg = PretrainConfig(
        steps_identity=args.steps, steps_expression=args.steps,
        steps_landmark=args.landmark_steps, steps_eval=args.steps,
        batch_size=args.batch_size, lr=args.lr, seed=args.seed,
    )
    out = pretrain_conditioners(_data_root(args.data), Path(args.out), model, cfg)
    print(f"conditioners saved to {out}")
    return 0


def _train_config_from_args(args):
    from .config import (
        AblationFlags,
        LossWeights,
        ModelConfig,
        ScheduleConfig,
        TrainConfig,
        load_train_config,
    )

    if args.config:
        cfg = load_train_config(args.config)
    else:
        cfg = TrainConfig()
    if args.data or os.environ.get("CYCLEFUSE_DATA_ROOT"):
        cfg.data_root = str(_data_root(args.data))
    if args.out:
        cfg.run_dir = args.out
    if args.conditioners:
        cfg.conditioners = args.conditioners

    overrides = {
        "steps": args.steps, "batch_size": args.batch_size, "lr": args.lr,
        "seed": args.seed, "afid_interval": args.afid_interval,
        "checkpoint_interval": args.checkpoint_interval,
    }
    for name, value in overrides.items():
        if value is not None:
            setattr(cfg, name, value)

    if args.t_steps is not None or args.beta_start is not None or args.beta_end is not None:
        cfg.schedule = ScheduleConfig(
            steps=args.t_steps or cfg.schedule.steps,
            beta_start=args.beta_start or cfg.schedule.beta_start,
            beta_end=args.beta_end or cfg.schedule.beta_end,
        )
    if args.resolution is not None or args.token_dim is not None:
        cfg.model = dataclasses.replace(
            cfg.model,
            **{k: v for k, v in (
                ("resolution", args.resolution), ("token_dim", args.token_dim),
            ) if v is not None},
        )
    if args.lam is not None or args.gamma is not None or args.sigma is not None:
        w = cfg.weights
        cfg.weights = LossWeights(
            lam=w.lam if args.lam is None else args.lam,
            gamma=w.gamma if args.gamma is None else args.gamma,
            sigma=w.sigma if args.sigma is None else args.sigma,
        )
    cfg.flags = AblationFlags(
        landmarks=cfg.flags.landmarks and not args.no_lm,
        cross_fusion=cfg.flags.cross_fusion and not args.no_cf,
        cycle=cfg.flags.cycle and not args.no_cd,
    )
    if not cfg.data_root:
        raise SystemExit("no dataset given: pass --data or set CYCLEFUSE_DATA_ROOT")
    if not cfg.run_dir:
        raise SystemExit("pass --out for the run directory")
    return cfg


def cmd_train(args) -> int:
    from .config import save_train_config
    from .trainer import train

    cfg = _train_config_from_args(args)
    Path(cfg.run_dir).mkdir(parents=True, exist_ok=True)
    save_train_config(cfg, Path(cfg.run_dir) / "config.json")
    result = train(cfg)
    print(f"final checkpoint: {result.final_checkpoint}")
    return 0


def cmd_synthesize(args) -> int:
    from .data import load_image, quantize, save_image
    from .pipeline import Synthesizer

    synth = Synthesizer.from_checkpoint(Path(args.checkpoint))
    id_images = [load_image(Path(p)) for p in args.id_image]
    style_images = [load_image(Path(p)) for p in args.style_image]

    rows = []
    for i, idi in enumerate(id_images):
        outs = []
        for j, sty in enumerate(style_images):
            out = synth.generate(
                idi.unsqueeze(0), sty.unsqueeze(0),
                seed=args.seed + i * len(style_images) + j,
            )[0]
            outs.append(out)
        rows.append(torch.cat(outs, dim=-1))
    grid = torch.cat(rows, dim=-2)
    img01 = (grid.numpy() + 1.0) / 2.0
    save_image(img01, Path(args.out))
    print(f"wrote {len(id_images)}x{len(style_images)} grid to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    from .data import load_manifest
    from .metrics import evaluate

    manifest = load_manifest(_data_root(args.data))
    report = evaluate(
        Path(args.checkpoint), manifest.split("test"),
        pairing_seed=args.seed, batch_size=args.batch_size,
        report_path=Path(args.out),
    )
    print(json.dumps(dataclasses.asdict(report), indent=2))
    print(f"report written to {args.out}")
    return 0


ABLATION_ROWS = (
    ("full", dict()),
    ("no-lm", dict(landmarks=False)),
    ("no-cf", dict(cross_fusion=False)),
    ("no-cd", dict(cycle=False)),
)


def cmd_ablate(args) -> int:
    from .config import AblationFlags, ScheduleConfig, TrainConfig
    from .data import load_manifest
    from .metrics import evaluate
    from .trainer import train

    data_root = _data_root(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(data_root)

    def base_config(run_name: str, seed: int, flags: AblationFlags) -> TrainConfig:
        cfg = TrainConfig(
            data_root=str(data_root),
            run_dir=str(out_dir / run_name),
            conditioners=args.conditioners,
            steps=args.steps,
            batch_size=args.batch_size,
            seed=seed,
            flags=flags,
            schedule=ScheduleConfig(steps=args.t_steps),
            eval_batch=args.eval_batch,
        )
        return cfg

    rows = []
    for name, toggles in ABLATION_ROWS:
        flags = AblationFlags(**{**dict(landmarks=True, cross_fusion=True,
                                        cycle=True), **toggles})
        cfg = base_config(f"row-{name}", args.seed, flags)
        result = train(cfg)
        report = evaluate(
            result.final_checkpoint, manifest.split("test"),
            pairing_seed=args.seed, batch_size=args.eval_batch,
            report_path=out_dir / f"report-{name}.json",
        )
        rows.append({"variant": name,
                     "flags": dataclasses.asdict(flags),
                     **report.metric_columns()})
        logger.info("ablation row %s: afid %.3f", name, report.afid)

    (out_dir / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    _print_table(rows)

    if args.cycle_curves:
        curves = _cycle_curves(args, base_config)
        (out_dir / "curves.json").write_text(json.dumps(curves, indent=2) + "\n")
        _plot_curves(curves, out_dir / "curves.png")
        summary = curves["summary"]
        print(
            "cycle mean final afid {:.3f} vs baseline {:.3f} -> cycle_leq_baseline={}".format(
                summary["cycle_mean_final_afid"],
                summary["baseline_mean_final_afid"],
                summary["cycle_leq_baseline"],
            )
        )
    return 0


def _cycle_curves(args, base_config) -> dict:
    """Cycle-on vs cycle-off aligned-score trajectories at matched steps."""
    from .config import AblationFlags
    from .trainer import train

    seeds = args.seeds
    variants = {
        "cycle": AblationFlags(landmarks=True, cross_fusion=True, cycle=True),
        "baseline": AblationFlags(landmarks=True, cross_fusion=True, cycle=False),
    }
    curves: dict = {"variants": {}, "seeds": seeds, "steps": args.steps,
                    "afid_interval": args.afid_interval}
    finals: dict[str, list[float]] = {}
    for vname, flags in variants.items():
        runs = []
        for seed in seeds:
            cfg = base_config(f"curve-{vname}-seed{seed}", seed, flags)
            cfg.afid_interval = args.afid_interval
            result = train(cfg)
            runs.append({"seed": seed,
                         "curve": [[s, v] for s, v in result.afid_history]})
            finals.setdefault(vname, []).append(result.afid_history[-1][1])
        curves["variants"][vname] = runs
    cycle_mean = float(np.mean(finals["cycle"]))
    base_mean = float(np.mean(finals["baseline"]))
    curves["summary"] = {
        "cycle_mean_final_afid": cycle_mean,
        "baseline_mean_final_afid": base_mean,
        "cycle_leq_baseline": bool(cycle_mean <= base_mean),
    }
    return curves


def _plot_curves(curves: dict, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    colors = {"cycle": "tab:blue", "baseline": "tab:orange"}
    for vname, runs in curves["variants"].items():
        for run in runs:
            pts = np.asarray(run["curve"])
            ax.plot(pts[:, 0], pts[:, 1], color=colors[vname], alpha=0.4)
        mean = np.mean([np.asarray(r["curve"])[:, 1] for r in runs], axis=0)
        steps = np.asarray(runs[0]["curve"])[:, 0]
        ax.plot(steps, mean, color=colors[vname], linewidth=2, label=vname)
    ax.set_xlabel("training step")
    ax.set_ylabel("aligned FID")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _print_table(rows: list[dict]) -> None:
    cols = ["variant", "afid", "psnr_id", "psnr_style", "ssim_id", "ssim_style",
            "lpips_like_id", "lpips_like_style", "pl_like_id", "pl_like_style"]
    header = "  ".join(f"{c:>16}" for c in cols)
    print(header)
    print("-" * len(header))
    for row in rows:
        cells = []
        for c in cols:
            v = row[c]
            cells.append(f"{v:>16}" if isinstance(v, str) else f"{v:>16.4f}")
        print("  ".join(cells))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cyclefuse",
        description="cycle-trained cross-fusion diffusion for face synthesis",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic paired-face dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--identities", type=int, default=10)
    p.add_argument("--expressions", type=int, default=8)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--landmarks", type=int, default=20)
    p.add_argument("--test-fraction", type=float, default=0.12)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-conditioners", help="train the extractors")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--token-dim", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--landmarks", type=int, default=20)
    p.add_argument("--trunk-width", type=int, default=32)
    p.add_argument("--eval-dim", type=int, default=64)
    p.add_argument("--steps", type=int, default=250)
    p.add_argument("--landmark-steps", type=int, default=700)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="run the cycle-diffusion trainer")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--config", help="JSON train config; flags override it")
    p.add_argument("--conditioners")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--t-steps", type=int)
    p.add_argument("--beta-start", type=float)
    p.add_argument("--beta-end", type=float)
    p.add_argument("--resolution", type=int)
    p.add_argument("--token-dim", type=int)
    p.add_argument("--sigma", type=float, dest="sigma")
    p.add_argument("--lambda", type=float, dest="lam")
    p.add_argument("--gamma", type=float, dest="gamma")
    p.add_argument("--no-lm", action="store_true", help="drop landmark features/loss")
    p.add_argument("--no-cf", action="store_true", help="concatenate instead of fusing")
    p.add_argument("--no-cd", action="store_true", help="skip the cycle pass")
    p.add_argument("--afid-interval", type=int)
    p.add_argument("--checkpoint-interval", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize", help="generate an identity x style grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--id-image", nargs="+", required=True)
    p.add_argument("--style-image", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", help="full metric report on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=16)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="component-toggle table and cycle curves")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--conditioners")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--t-steps", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--eval-batch", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2],
                   help="seeds for --cycle-curves")
    p.add_argument("--cycle-curves", action="store_true",
                   help="also run cycle-on vs cycle-off aligned-score curves")
    p.add_argument("--afid-interval", type=int, default=100)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(asctime)s %(name)s %(message)s"
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except SystemExit as exc:
        if exc.code and not isinstance(exc.code, int):
            print(str(exc.code), file=sys.stderr)
            return 1
        return int(exc.code or 0)
    except Exception as exc:  # surface a diagnostic, nonzero exit
        logger.error("command failed: %s", exc)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
