"""Command-line entry points wiring all modules into reproducible experiments.

Subcommands: phantom-gen, train, eval, stage, progress-sim, synth, ablation.
Every artifact-producing command writes a run_record.json (command line,
config snapshot, seeds, input content hashes, output paths, wall time) next
to its outputs. Data artifacts are byte-reproducible given --seed in
single-threaded mode; the run record itself carries the wall time and is the
one file excluded from that guarantee.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch

from .defsim import DefsimConfig, simulate_progression
from .phantom import PhantomConfig, generate_dataset
from .segnet import SegNetConfig
from .staging import classify_stage, evaluate_cases
from .synthgan import SynthConfig, fit_gan, load_generator, save_generator, synthesize
from .trainer import (
    ABLATION_ROWS,
    TrainConfig,
    ablation_report_dict,
    fit,
    load_manifest_pools,
    run_ablation,
)
from .volgrid import Case, Role, load_volume_pack, save_volume_pack


def _configure_threads(args) -> None:
    if getattr(args, "single_thread", False):
        torch.set_num_threads(1)
        return
    cap = os.environ.get("STAGEKIT_THREADS")
    if cap:
        torch.set_num_threads(max(1, int(cap)))


def _hash_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_inputs(paths) -> dict[str, str]:
    hashes = {}
    for p in paths:
        p = Path(p)
        if p.is_file():
            hashes[str(p)] = _hash_file(p)
        elif p.is_dir():
            for f in sorted(p.rglob("*")):
                if f.is_file():
                    hashes[str(f)] = _hash_file(f)
    return hashes


def _write_run_record(out_dir, argv, config_snapshot, seeds, inputs, outputs, started):
    record = {
        "command_line": list(argv),
        "config": config_snapshot,
        "seeds": seeds,
        "input_hashes": _hash_inputs(inputs),
        "output_paths": [str(p) for p in outputs],
        "wall_time_s": round(time.time() - started, 3),
    }
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_record.json").write_text(json.dumps(record, indent=2, sort_keys=True))


def _parse_counts(text: str) -> dict[str, tuple[int, int]]:
    """Parse 'A=20:8/12,B=20:8/12' into {pool: (n_t2, n_t3)} with n checks."""
    counts = {}
    for item in text.split(","):
        pool, spec_ = item.split("=")
        total, mix = spec_.split(":")
        t2, t3 = mix.split("/")
        t2, t3 = int(t2), int(t3)
        if int(total) != t2 + t3:
            raise ValueError(f"pool {pool}: total {total} != {t2}+{t3}")
        counts[pool.strip()] = (t2, t3)
    return counts


def _load_train_config(args) -> TrainConfig:
    base = TrainConfig.phantom_profile() if args.profile == "phantom" else TrainConfig()
    if args.config is not None:
        raw = json.loads(Path(args.config).read_text())
        net = SegNetConfig(**raw.pop("net")) if "net" in raw else base.net
        for key in list(raw):
            if not hasattr(base, key):
                raise ValueError(f"unknown TrainConfig field {key!r} in {args.config}")
        base = replace(base, net=net, **{k: v for k, v in raw.items()})
    if args.seed is not None:
        base = replace(base, seed=args.seed)
    return base


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------


def _cmd_phantom_gen(args, argv) -> int:
    started = time.time()
    counts = _parse_counts(args.counts)
    cfg = PhantomConfig(shape=(args.grid,) * 3, spacing_mm=args.spacing)
    manifest = generate_dataset(counts, args.out, args.seed, cfg)
    _write_run_record(
        args.out, argv, {"counts": manifest["counts"], "grid": args.grid, "spacing": args.spacing},
        {"seed": args.seed}, [], [args.out], started,
    )
    print(json.dumps({"pools": {k: len(v) for k, v in manifest["pools"].items()}}))
    return 0


def _cmd_train(args, argv) -> int:
    started = time.time()
    config = _load_train_config(args)
    pools = load_manifest_pools(args.manifest)
    labeled = pools.get("A", []) + pools.get("D", [])
    datasets = {
        "labeled_train": labeled,
        "stage_only": pools.get("C", []),
        "validation": pools.get("B", []),
    }
    ckpt = fit(datasets, config, run_dir=args.out)
    _write_run_record(
        args.out, argv, asdict(config), {"seed": config.seed}, [args.manifest], [args.out], started
    )
    print(json.dumps({"best_iteration": ckpt.iteration, "validation_dice": ckpt.validation_dice}))
    return 0


def _cmd_eval(args, argv) -> int:
    started = time.time()
    pred_packs = sorted(p for p in Path(args.preds).iterdir() if (p / "header.json").is_file())
    preds_by_id = {}
    for p in pred_packs:
        case = load_volume_pack(p)
        if case.labels is None:
            raise ValueError(f"prediction pack {p} carries no label masks")
        preds_by_id[case.id] = case.labels
    ref_packs = sorted(p for p in Path(args.refs).iterdir() if (p / "header.json").is_file())
    refs = [load_volume_pack(p) for p in ref_packs]
    missing = [r.id for r in refs if r.id not in preds_by_id]
    if missing:
        raise ValueError(f"no prediction for reference cases {missing}")
    preds = [preds_by_id[r.id] for r in refs]
    report = evaluate_cases(preds, refs, args.threshold, args.min_invasion_voxels)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    _write_run_record(
        out.parent, argv, {"threshold": args.threshold}, {}, [args.preds, args.refs], [out], started
    )
    print(json.dumps(report.to_dict()["dice"]))
    return 0


def _cmd_stage(args, argv) -> int:
    case = load_volume_pack(args.pred)
    if case.labels is None:
        raise ValueError(f"pack {args.pred} carries no label masks to stage")
    stage = classify_stage(case.labels, args.threshold, args.min_invasion_voxels)
    print(stage.value)
    return 0


def _cmd_progress_sim(args, argv) -> int:
    started = time.time()
    case = load_volume_pack(getattr(args, "in"))
    cfg = DefsimConfig()
    rng = np.random.default_rng(args.seed)
    out_case, provenance = simulate_progression(
        case, args.steps, rng, cfg, return_provenance=True
    )
    save_volume_pack(out_case, args.out)
    provenance["seed"] = args.seed
    Path(args.out, "provenance.json").write_text(json.dumps(provenance, indent=2, sort_keys=True))
    _write_run_record(
        args.out, argv, {"steps": args.steps}, {"seed": args.seed}, [getattr(args, "in")],
        [args.out], started,
    )
    print(json.dumps({"stage": out_case.stage.value, "redraws": provenance["redraws"]}))
    return 0


def _cmd_synth(args, argv) -> int:
    started = time.time()
    gen = load_generator(args.gen_ckpt)
    case = load_volume_pack(args.labels)
    if case.labels is None:
        raise ValueError(f"pack {args.labels} carries no labels to condition on")
    image = synthesize(gen, case.labels, args.seed)
    out_case = Case(
        id=case.id, image=image, labels=case.labels, stage=case.stage, role=Role.GENERATED
    )
    save_volume_pack(out_case, args.out)
    _write_run_record(
        args.out, argv, {}, {"seed": args.seed},
        [args.labels, str(args.gen_ckpt) + ".json", str(args.gen_ckpt) + ".weights.raw"],
        [args.out], started,
    )
    print(json.dumps({"shape": list(image.shape)}))
    return 0


def build_pool_d(
    pools: dict,
    out_dir,
    n_cases: int,
    gan_steps: int = 500,
    seed: int = 0,
    defsim_cfg: DefsimConfig | None = None,
    synth_cfg: SynthConfig | None = None,
    gan_crop_zyx=(32, 32, 32),
):
    """Fill pool D: train the synthesis GAN on pool A, deform pool-A cancer
    labels into advanced-stage labels, and synthesize matching images.

    Returns (list of generated Cases, generator, telemetry). Pool D derives
    from pool A only, keeping the evaluation pools unseen by the generator.
    """
    defsim_cfg = defsim_cfg or DefsimConfig()
    synth_cfg = synth_cfg or SynthConfig()
    sources = sorted(pools["A"], key=lambda c: c.id)
    if not sources:
        raise ValueError("pool A is empty; cannot build pool D")
    gen, telemetry = fit_gan(sources, synth_cfg, gan_steps, seed, crop_zyx=gan_crop_zyx)
    out_dir = Path(out_dir)
    cases = []
    for i in range(n_cases):
        src = sources[i % len(sources)]
        rng = np.random.default_rng(np.random.SeedSequence([seed, 523, i]))
        generated = simulate_progression(src, defsim_cfg.steps, rng, defsim_cfg)
        generated.id = f"D{i:03d}"
        generated.image = synthesize(gen, generated.labels, seed=seed * 100003 + i)
        save_volume_pack(generated, out_dir / "D" / generated.id)
        cases.append(generated)
    return cases, gen, telemetry


def _cmd_ablation(args, argv) -> int:
    started = time.time()
    config = _load_train_config(args)
    pools = load_manifest_pools(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if not pools.get("D") and not args.skip_pool_d:
        n_d = args.pool_d_size if args.pool_d_size is not None else len(pools["A"])
        d_cases, gen, _ = build_pool_d(
            pools, out_dir, n_d, gan_steps=args.gan_steps, seed=config.seed
        )
        pools["D"] = d_cases
        save_generator(gen, out_dir / "generator", step=args.gan_steps)

    rows = ABLATION_ROWS if pools.get("D") else ("baseline", "semi_supervised")
    reports, audit = run_ablation(
        config, pools, k=args.folds, out_dir=out_dir, rows=rows, return_audit=True
    )
    _write_run_record(
        out_dir, argv, asdict(config), {"seed": config.seed}, [args.manifest], [out_dir], started
    )
    print(json.dumps(ablation_report_dict(reports, audit)["rows"], indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stagekit", description=__doc__)
    parser.add_argument("--single-thread", action="store_true",
                        help="force 1 torch thread (bit-reproducible mode)")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("phantom-gen", help="generate a phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--counts", required=True, help="e.g. A=20:8/12,B=20:8/12,C=20:10/10")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=int, default=64)
    p.add_argument("--spacing", type=float, default=0.5)
    p.set_defaults(func=_cmd_phantom_gen)

    p = sub.add_parser("train", help="train one segmentation model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON of TrainConfig overrides")
    p.add_argument("--profile", choices=("phantom", "full"), default="phantom")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate prediction packs against references")
    p.add_argument("--preds", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--out", default="report.json")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--min-invasion-voxels", type=int, default=1)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("stage", help="classify the T-stage of one pack's masks")
    p.add_argument("--pred", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--min-invasion-voxels", type=int, default=1)
    p.set_defaults(func=_cmd_stage)

    p = sub.add_parser("progress-sim", help="simulate cancer progression on a pack")
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_progress_sim)

    p = sub.add_parser("synth", help="synthesize an image for a label pack")
    p.add_argument("--gen-ckpt", required=True, help="generator checkpoint stem")
    p.add_argument("--labels", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("ablation", help="run the three-row ablation study end-to-end")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--profile", choices=("phantom", "full"), default="phantom")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--gan-steps", type=int, default=500)
    p.add_argument("--pool-d-size", type=int, default=None)
    p.add_argument("--skip-pool-d", action="store_true",
                   help="skip pool-D generation (drops the data_augmentation row)")
    p.set_defaults(func=_cmd_ablation)
    return parser


def cmd_dispatch(argv) -> int:
    """Run one subcommand; exit code 0 on success, 2 on usage errors,
    1 with an error JSON on stderr otherwise."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    _configure_threads(args)
    try:
        return args.func(args, argv)
    except Exception as exc:  # noqa: BLE001 - boundary: report as machine-readable JSON
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1


def main() -> None:
    sys.exit(cmd_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
