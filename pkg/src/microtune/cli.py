"""Command-line entry points: generate, train, evaluate, ablate, export.

Exit codes: 0 success, 2 configuration/input error, 1 runtime failure.
``MICROTUNE_SEED`` provides the seed when no flag or config sets one. Flags
override config-file values; the merged configuration is echoed to
``config.txt`` in the output directory in its canonical form.

Export formats: saliency masks as P2 rasters plus a ``masks.csv`` of
``image_id,n_selected,fiedler_gap`` rows; per-image attention files with one
``index,weight`` row per patch token plus the trailing empty token; and a
``pl_curve.csv`` of ``epoch,pl_accuracy`` rows joined from the audit log.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time
import tracemalloc
from pathlib import Path

import numpy as np

from .classifier import init_classifiers, load_descriptions
from .config import ConfigError, RunConfig, dump_config, load_config
from .encoder import EncoderConfig
from .formats import write_mask_pgm
from .saliency import export_saliency_mask
from .synthdata import SynthSpec, generate
from .trainer import (
    TrainingDiverged,
    evaluate,
    init_train_state,
    load_checkpoint,
    load_dataset,
    run_training,
)

__all__ = ["main"]


def _env_seed() -> int | None:
    raw = os.environ.get("MICROTUNE_SEED")
    return int(raw) if raw else None


def _cap_threads(n: int) -> None:
    if n and n > 0:
        try:
            import threadpoolctl

            threadpoolctl.threadpool_limits(n)
        except ImportError:
            os.environ.setdefault("OMP_NUM_THREADS", str(n))


def _merged_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    for field in dataclasses.fields(RunConfig):
        flag = getattr(args, field.name, None)
        if flag is not None:
            setattr(cfg, field.name, flag)
    if getattr(args, "seed", None) is None and args.config is None:
        env = _env_seed()
        if env is not None:
            cfg.seed = env
    return cfg


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--train-manifest", dest="train_manifest")
    p.add_argument("--test-manifest", dest="test_manifest")
    p.add_argument("--descriptions")
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--encoder-seed", dest="encoder_seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--n-crops", dest="n_crops", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument(
        "--fusion", dest="fusion_mode", choices=("symmetric", "global-only", "local-only")
    )
    p.add_argument("--pl-source", dest="pl_source", choices=("frozen", "learnable"))
    p.add_argument("--pl-view", dest="pl_view", choices=("multi", "single"))
    p.add_argument("--affinity-mode", dest="affinity_mode", choices=("auto", "dense", "grid"))
    p.add_argument("--dataset-mode", dest="dataset_mode", choices=("image", "feature"))
    p.add_argument("--threads", type=int)
    p.add_argument("--dump-config", action="store_true", help="print the merged config and exit")


def _require_inputs(cfg: RunConfig) -> None:
    for label, path in (
        ("train manifest", cfg.train_manifest),
        ("test manifest", cfg.test_manifest),
        ("description file", cfg.descriptions),
    ):
        if not path:
            raise ConfigError(f"{label} not set")
        if not Path(path).exists():
            raise ConfigError(f"{label} missing: {path}")


def cmd_generate(args) -> int:
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    spec = SynthSpec(
        classes=args.classes,
        images_per_class=args.per_class,
        image_side=args.side,
        glyph_side=args.glyph,
        description_noise=args.description_noise,
        seed=seed,
    )
    enc = EncoderConfig(seed=args.encoder_seed)
    out = generate(spec, args.out, enc)
    print(f"dataset written to {out.root}")
    print(f"  train manifest: {out.train_manifest}")
    print(f"  test manifest:  {out.test_manifest}")
    print(f"  descriptions:   {out.descriptions_path}")
    return 0


def cmd_train(args) -> int:
    cfg = _merged_config(args)
    if args.dump_config:
        sys.stdout.write(dump_config(cfg))
        return 0
    _cap_threads(cfg.threads)
    _require_inputs(cfg)
    cfg.validate()
    result = run_training(cfg, cfg.train_manifest, cfg.test_manifest, cfg.descriptions, cfg.out_dir)
    (result.out_dir / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    print(
        f"trained {cfg.epochs} epochs: top-1 {result.baseline_top1:.4f} -> {result.final_top1:.4f}"
        f" (metrics: {result.metrics_path})"
    )
    return 0


def cmd_evaluate(args) -> int:
    cfg = _merged_config(args)
    _cap_threads(cfg.threads)
    _require_inputs(cfg)
    state = _restore_state(cfg, args.checkpoint)
    test_set = load_dataset(cfg.test_manifest, cfg.dataset_mode)
    print(f"top-1 {evaluate(test_set, state):.4f} on {len(test_set)} images")
    return 0


def _restore_state(cfg: RunConfig, checkpoint: str | None):
    bank = init_classifiers(load_descriptions(cfg.descriptions))
    state = init_train_state(cfg, bank, n_train=1)
    if checkpoint:
        if not Path(checkpoint).exists():
            raise ConfigError(f"checkpoint missing: {checkpoint}")
        load_checkpoint(checkpoint, state)
    return state


def cmd_ablate(args) -> int:
    cfg = _merged_config(args)
    _cap_threads(cfg.threads)
    _require_inputs(cfg)
    sweeps = []
    for spec in args.sweep or []:
        if "=" not in spec:
            raise ConfigError(f"sweep spec must be key=v1,v2,...: {spec!r}")
        key, raw = spec.split("=", 1)
        key = key.strip()
        values = [v for v in (s.strip() for s in raw.split(",")) if v]
        if not values or not hasattr(cfg, key):
            raise ConfigError(f"bad sweep spec: {spec!r}")
        sweeps.append((key, values))
    if not sweeps:
        raise ConfigError("empty sweep grid")

    grid = [{}]
    for key, values in sweeps:
        grid = [dict(point, **{key: v}) for point in grid for v in values]

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table_path = out_dir / "ablation.csv"
    with open(table_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("setting,eval_top1,wall_time_s,peak_mem_mb\n")
        for i, point in enumerate(grid):
            run_cfg = dataclasses.replace(cfg)
            for key, raw in point.items():
                current = getattr(run_cfg, key)
                setattr(run_cfg, key, type(current)(raw) if not isinstance(current, bool) else raw in ("true", "1"))
            run_cfg.validate()
            setting = ";".join(f"{k}={v}" for k, v in point.items())
            tracemalloc.start()
            t0 = time.perf_counter()
            result = run_training(
                run_cfg, cfg.train_manifest, cfg.test_manifest, cfg.descriptions,
                out_dir / f"sweep{i:02d}",
            )
            wall = time.perf_counter() - t0
            peak = tracemalloc.get_traced_memory()[1] / 1e6
            tracemalloc.stop()
            fh.write(f"{setting},{result.final_top1:.10g},{wall:.10g},{peak:.10g}\n")
            print(f"{setting}: top-1 {result.final_top1:.4f} in {wall:.1f}s")
    print(f"ablation table: {table_path}")
    return 0


def cmd_export(args) -> int:
    cfg = _merged_config(args)
    _cap_threads(cfg.threads)
    if not cfg.descriptions or not Path(cfg.descriptions).exists():
        raise ConfigError(f"description file missing: {cfg.descriptions}")
    if not cfg.train_manifest or not Path(cfg.train_manifest).exists():
        raise ConfigError(f"train manifest missing: {cfg.train_manifest}")
    out_dir = Path(cfg.export_dir or (Path(cfg.out_dir) / "export"))
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.what == "pl-curve":
        audit_path = Path(args.audit or (Path(cfg.out_dir) / "audit.csv"))
        if not audit_path.exists():
            raise ConfigError(f"audit log missing: {audit_path}")
        return _export_pl_curve(cfg, audit_path, out_dir)

    state = _restore_state(cfg, args.checkpoint)
    dataset = load_dataset(cfg.train_manifest, cfg.dataset_mode)
    limit = args.limit if args.limit else len(dataset)

    from .traingraph import fusion_forward

    if args.what == "masks":
        rows = []
        for i in range(min(limit, len(dataset))):
            record = dataset.records[i]
            _, cache = fusion_forward(_single_view(state, dataset, i), state.pipe)
            part = cache.partitions[0]
            side = state.weights.config.grid_side
            write_mask_pgm(out_dir / f"{record.image_id}_mask.pgm", export_saliency_mask(part, side))
            rows.append((record.image_id, part.selected.size, part.fiedler_gap))
        with open(out_dir / "masks.csv", "w", encoding="utf-8", newline="\n") as fh:
            for image_id, n_sel, gap in rows:
                fh.write(f"{image_id},{n_sel},{gap:.10g}\n")
        print(f"wrote {len(rows)} masks to {out_dir}")
        return 0

    if args.what == "attention":
        count = 0
        for i in range(min(limit, len(dataset))):
            record = dataset.records[i]
            _, cache = fusion_forward(_single_view(state, dataset, i), state.pipe)
            attn = cache.attention[0]
            with open(out_dir / f"{record.image_id}_attention.csv", "w", encoding="utf-8", newline="\n") as fh:
                for j, w in enumerate(attn):
                    fh.write(f"{j},{w:.10g}\n")
            count += 1
        print(f"wrote {count} attention files to {out_dir}")
        return 0

    raise ConfigError(f"unknown export kind {args.what!r}")


def _single_view(state, dataset, index):
    from .trainer import _weak_views

    return _weak_views(state, dataset, [index])


def _export_pl_curve(cfg: RunConfig, audit_path: Path, out_dir: Path) -> int:
    from .formats import read_manifest

    labels = {}
    for image_id, _, label in read_manifest(cfg.train_manifest):
        labels[image_id] = label
    per_epoch: dict[int, list[bool]] = {}
    with open(audit_path, "r", encoding="utf-8") as fh:
        next(fh)  # header
        for line in fh:
            epoch_s, image_id, label_s, _, _ = line.rstrip("\n").split(",")
            truth = labels.get(image_id, -1)
            if truth >= 0:
                per_epoch.setdefault(int(epoch_s), []).append(int(label_s) == truth)
    curve_path = out_dir / "pl_curve.csv"
    with open(curve_path, "w", encoding="utf-8", newline="\n") as fh:
        for epoch in sorted(per_epoch):
            acc = float(np.mean(per_epoch[epoch]))
            fh.write(f"{epoch},{acc:.10g}\n")
    print(f"pl curve: {curve_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="microtune", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic fine-grained dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=8)
    g.add_argument("--per-class", dest="per_class", type=int, default=40)
    g.add_argument("--side", type=int, default=56)
    g.add_argument("--glyph", type=int, default=8)
    g.add_argument("--description-noise", dest="description_noise", type=float, default=0.6)
    g.add_argument("--seed", type=int)
    g.add_argument("--encoder-seed", dest="encoder_seed", type=int, default=7)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="run the self-training loop")
    _add_run_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="top-1 accuracy of a checkpoint")
    _add_run_flags(e)
    e.add_argument("--checkpoint")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="sweep settings and tabulate accuracy/cost")
    _add_run_flags(a)
    a.add_argument("--sweep", action="append", help="key=v1,v2,... (repeatable)")
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("export", help="export masks, attention maps, or the PL curve")
    _add_run_flags(x)
    x.add_argument("--what", choices=("masks", "attention", "pl-curve"), required=True)
    x.add_argument("--checkpoint")
    x.add_argument("--audit")
    x.add_argument("--limit", type=int, default=0)
    x.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        note = f" (last checkpoint: {exc.last_checkpoint})" if exc.last_checkpoint else ""
        print(f"error: {exc}{note}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
