"""Command-line interface.

Subcommands: synth-gen, train, score, eval, inspect. Exit codes: 0 on
success, 1 for runtime/domain failures, 2 for usage errors. All randomness
flows from --seed; reruns with identical flags produce byte-identical
artifacts. Stdout carries a short human summary, files carry the machine
outputs, stderr carries diagnostics.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import feature_io, model_core
from .config import RunConfig, load_config
from .confident import ConfidenceState, refresh_confidence, write_confidence_csv
from .errors import CozadError
from .evaluation import MapConfig, evaluate
from .feature_io import SynthConfig, read_feature_file, synth_generate, write_feature_file
from .meta import train
from .model_core import NoiseConfig, load_checkpoint, save_checkpoint


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file (flags override it)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None, help="worker cap (default 1)")


def _resolve_config(args, extra: dict | None = None) -> RunConfig:
    overrides = {"seed": args.seed, "threads": getattr(args, "threads", None)}
    overrides.update(extra or {})
    return load_config(path=args.config, overrides=overrides)


def cmd_synth_gen(args) -> int:
    cfg = SynthConfig(
        n_normal=args.n_normal,
        n_anomalous=args.n_anomalous,
        feat_dim=args.feat_dim,
        grid_h=args.grid_h,
        grid_w=args.grid_w,
        n_clusters=args.n_clusters,
        anomaly_shift=args.anomaly_shift,
        noise_std=args.noise_std,
        subspace_dim=args.subspace_dim,
        seed=args.seed if args.seed is not None else 0,
    )
    dataset = synth_generate(cfg)
    write_feature_file(dataset, args.out)
    print(
        f"wrote {args.out}: {dataset.n_images} images "
        f"({cfg.n_normal} normal, {cfg.n_anomalous} anomalous), "
        f"grid {dataset.grid_h}x{dataset.grid_w}, feat_dim {dataset.feat_dim}, "
        f"seed {cfg.seed}"
    )
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(
        args,
        {
            "epochs": args.epochs,
            "batch_size": args.batch_size,
            "use_confident": False if args.no_confident else None,
            "use_meta": False if args.no_meta else None,
            "use_contrastive": False if args.no_contrastive else None,
        },
    )
    dataset = read_feature_file(args.data)
    params, report = train(
        dataset,
        cfg.meta_config(),
        cfg.contrastive_config(),
        cfg.reg_config(),
        NoiseConfig.from_seed(cfg.sigma, cfg.seed),
        kappa=cfg.kappa,
        window=cfg.window,
        th_pos=cfg.th_pos,
        th_neg=cfg.th_neg,
        weight_decay=cfg.weight_decay,
        adapted_dim=cfg.adapted_dim or None,
        hidden_dim=cfg.hidden_dim or None,
        use_confident=cfg.use_confident,
        use_meta=cfg.use_meta,
        use_contrastive=cfg.use_contrastive,
    )
    save_checkpoint(params, args.out)
    report.checkpoint_path = str(args.out)
    report.config = cfg.as_dict()
    written = [str(args.out)]
    if args.report:
        from . import report as report_mod

        written += report_mod.write_train_outputs(report, args.report, figures=not args.no_figures)
    last_val = report.val_loss[-1]
    val_part = "" if last_val is None else f", final query loss {last_val:.6f}"
    print(
        f"trained {report.epochs} epochs on {dataset.n_images} images, "
        f"final support loss {report.train_loss[-1]:.6f}{val_part}; wrote "
        + ", ".join(written)
    )
    return 0


def _load_checkpoint_for(data: feature_io.FeatureDataset, path):
    params, _ = load_checkpoint(path)
    if params.feat_dim != data.feat_dim:
        raise CozadError(
            f"checkpoint feat_dim {params.feat_dim} does not match "
            f"data feat_dim {data.feat_dim}"
        )
    return params


def cmd_score(args) -> int:
    dataset = read_feature_file(args.data)
    params = _load_checkpoint_for(dataset, args.checkpoint)
    from .report import write_scores_csv

    n, gh, gw = dataset.n_images, dataset.grid_h, dataset.grid_w
    scores = model_core.anomaly_score(params, dataset.patch_matrix()).reshape(n, gh, gw)
    image_scores = scores.reshape(n, -1).max(axis=1)
    write_scores_csv(args.out, image_scores, dataset.image_labels)
    written = [str(args.out)]
    if args.maps:
        maps = feature_io.FeatureDataset(
            scores[..., None].astype(np.float32), meta="anomaly score maps"
        )
        write_feature_file(maps, args.maps)
        written.append(str(args.maps))
    print(f"scored {n} images; wrote " + ", ".join(written))
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args, {"smooth_sigma": args.smooth_sigma})
    dataset = read_feature_file(args.data)
    params = _load_checkpoint_for(dataset, args.checkpoint)
    sr = evaluate(params, dataset, MapConfig(smooth_sigma=cfg.smooth_sigma))
    from .report import write_eval_outputs

    written = write_eval_outputs(sr, args.out, args.csv, figures=not args.no_figures)
    i_part = "undefined" if sr.i_auroc is None else f"{sr.i_auroc:.4f}"
    p_part = "undefined" if sr.p_auroc is None else f"{sr.p_auroc:.4f}"
    print(f"i_auroc {i_part}, p_auroc {p_part}; wrote " + ", ".join(written))
    return 0


def _sniff_magic(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read(4)


def cmd_inspect(args) -> int:
    feature_path = None
    checkpoint_path = None
    for path in args.files:
        magic = _sniff_magic(path)
        if magic == feature_io.MAGIC:
            feature_path = path
        elif magic == model_core.MAGIC_MODEL:
            checkpoint_path = path
        else:
            raise CozadError(f"{path}: unrecognized magic {magic!r}")
    dataset = None
    if feature_path:
        dataset = read_feature_file(feature_path)
        print(
            f"{feature_path}: feature file, n_images={dataset.n_images} "
            f"grid={dataset.grid_h}x{dataset.grid_w} feat_dim={dataset.feat_dim} "
            f"labels={'yes' if dataset.image_labels is not None else 'no'} "
            f"masks={'yes' if dataset.pixel_masks is not None else 'no'} "
            f"meta={dataset.meta!r}"
        )
    params = None
    if checkpoint_path:
        params, adam = load_checkpoint(checkpoint_path)
        print(
            f"{checkpoint_path}: checkpoint, feat_dim={params.feat_dim} "
            f"adapted_dim={params.adapted_dim} hidden_dim={params.hidden_dim} "
            f"optimizer_state={'yes' if adam is not None else 'no'}"
        )
    if dataset is not None and params is not None:
        if params.feat_dim != dataset.feat_dim:
            raise CozadError(
                f"checkpoint feat_dim {params.feat_dim} does not match "
                f"data feat_dim {dataset.feat_dim}"
            )
        cfg = _resolve_config(args)
        n_patches = dataset.n_images * dataset.patches_per_image
        state = refresh_confidence(
            ConfidenceState(np.ones(n_patches), kappa=cfg.kappa), params, dataset, epoch=0
        )
        scores = model_core.anomaly_score(params, dataset.patch_matrix())
        if args.confidence_out:
            with open(args.confidence_out, "w", newline="") as fh:
                write_confidence_csv(fh, scores, state.weights, state.tau, state.last_refresh_epoch)
            print(f"wrote confidence dump to {args.confidence_out}")
        else:
            write_confidence_csv(sys.stdout, scores, state.weights, state.tau, state.last_refresh_epoch)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cozad", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    defaults = SynthConfig()
    p = sub.add_parser("synth-gen", help="generate a synthetic feature dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-normal", type=int, default=defaults.n_normal)
    p.add_argument("--n-anomalous", type=int, default=defaults.n_anomalous)
    p.add_argument("--feat-dim", type=int, default=defaults.feat_dim)
    p.add_argument("--grid-h", type=int, default=defaults.grid_h)
    p.add_argument("--grid-w", type=int, default=defaults.grid_w)
    p.add_argument("--n-clusters", type=int, default=defaults.n_clusters)
    p.add_argument("--anomaly-shift", type=float, default=defaults.anomaly_shift)
    p.add_argument("--noise-std", type=float, default=defaults.noise_std)
    p.add_argument("--subspace-dim", type=int, default=defaults.subspace_dim)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train", help="train on an all-normal feature file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path (COZM)")
    p.add_argument("--report", help="training report JSON path")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--no-confident", action="store_true")
    p.add_argument("--no-meta", action="store_true")
    p.add_argument("--no-contrastive", action="store_true")
    p.add_argument("--no-figures", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="write per-image scores for a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="per-image CSV path")
    p.add_argument("--maps", help="optional raw anomaly-map dump (COZF floats)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="compute AUROC metrics for a labeled dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.add_argument("--csv", help="optional per-image score CSV")
    p.add_argument("--smooth-sigma", type=float, default=None)
    p.add_argument("--no-figures", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="print file headers; dump confidence CSV")
    p.add_argument("files", nargs="+", help="COZF and/or COZM files")
    p.add_argument("--confidence-out", help="confidence CSV path (default stdout)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CozadError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
