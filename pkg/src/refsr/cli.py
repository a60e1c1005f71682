"""Command-line experiment harness."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

from . import substrate


def _load_manifest(args):
    from .experiment import ExperimentManifest

    manifest = ExperimentManifest.load(args.manifest) if args.manifest else ExperimentManifest()
    if args.seed is not None:
        manifest.phantom = dataclasses.replace(manifest.phantom, seed=args.seed)
        manifest.train = dataclasses.replace(manifest.train, seed=args.seed)
    if getattr(args, "cases", None) is not None:
        manifest.n_cases = args.cases
    if args.output is not None:
        manifest.output_dir = str(args.output)
    return manifest


def _prepare_output(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise SystemExit(f"refusing to write into non-empty directory {path} (use --force)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_phantom(args) -> int:
    from .core import normalize_case
    from .phantom import make_noisy_case, save_case

    manifest = _load_manifest(args)
    out = _prepare_output(Path(manifest.output_dir), args.force)
    for i in range(manifest.n_cases):
        cfg = dataclasses.replace(manifest.phantom, seed=manifest.phantom.seed + i)
        case_id = f"case_{i:03d}"
        case, tensors = make_noisy_case(cfg, case_id)
        case = normalize_case(case)
        save_case(case, out / case_id, tensors=tensors, cfg=cfg)
        print(f"wrote {out / case_id}")
    return 0


def cmd_degrade(args) -> int:
    from .degrade import DegradeConfig, degrade_case
    from .phantom import load_case, save_case

    cfg = DegradeConfig(**json.loads(Path(args.config).read_text())) if args.config else DegradeConfig()
    out = _prepare_output(Path(args.output), args.force)
    for case_dir in sorted(Path(args.input).iterdir()):
        if not (case_dir / "case.json").exists():
            continue
        case, _ = load_case(case_dir)
        pair = degrade_case(case, cfg)
        save_case(pair.lr, out / case.case_id / "lr")
        save_case(pair.lr_on_hr_grid, out / case.case_id / "bilinear")
        print(f"degraded {case.case_id}: {pair.hr.dims} -> {pair.lr.dims}")
    return 0


def cmd_run_ablation(args) -> int:
    from .experiment import run_ablation

    manifest = _load_manifest(args)
    if args.dry_run:
        manifest.validate()
        # exercise the config constructors end to end without computing
        from .experiment import conventional_config, proposed_config

        proposed_config(manifest.train)
        conventional_config(manifest.train)
        print("manifest OK")
        return 0
    out = _prepare_output(Path(manifest.output_dir), args.force)
    t0 = time.time()
    result = run_ablation(manifest, out)
    print(f"finished in {time.time() - t0:.1f}s; tables in {out}")
    for key, stats in sorted(result.table1.items()):
        print(f"  table1 {key}: psnr {stats['psnr_mean']:.3f} ({stats['psnr_std']:.3f}) "
              f"ssim {stats['ssim_mean']:.4f} ({stats['ssim_std']:.4f})")
    for key, stats in sorted(result.table2.items()):
        print(f"  table2 {key}: psnr {stats['psnr_mean']:.3f} ({stats['psnr_std']:.3f}) "
              f"ssim {stats['ssim_mean']:.4f} ({stats['ssim_std']:.4f})")
    print(f"ordering {'HOLDS' if result.ordering_ok else 'VIOLATED'}")
    return 0 if result.ordering_ok else 1


def cmd_train(args) -> int:
    from .degrade import DegradeConfig, degrade_case
    from .experiment import _gather_pairs, conventional_config, proposed_config
    from .phantom import load_case
    from .train import save_model, split_cases, train, write_log_csv

    manifest = _load_manifest(args)
    cfg = proposed_config(manifest.train) if args.mode == "proposed" else conventional_config(manifest.train)
    case_dirs = sorted(d for d in Path(args.data).iterdir() if (d / "case.json").exists())
    degraded = {}
    for d in case_dirs:
        case, _ = load_case(d)
        degraded[case.case_id] = degrade_case(case, manifest.degrade)
    split = split_cases(sorted(degraded), cfg.split_ratio, cfg.seed)
    train_pairs = _gather_pairs(degraded, split["train"], cfg.mode, cfg.train_b_values)
    val_pairs = _gather_pairs(degraded, split["val"], cfg.mode, cfg.train_b_values)
    result = train(cfg, train_pairs, val_pairs,
                   progress=lambda log: print(f"epoch {log.epoch}: val_psnr {log.val_psnr:.2f}"))
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(out, result)
    write_log_csv(result.log, out.with_suffix(".log.csv"))
    print(f"saved {out} (best epoch {result.best_epoch}, val PSNR {result.best_val_psnr:.2f})")
    return 0


def cmd_infer(args) -> int:
    from .degrade import DegradeConfig, degrade_case
    from .phantom import load_case, save_case
    from .train import infer_volume, load_model

    gen, cfg = load_model(args.model)
    case, _ = load_case(args.case)
    pair = degrade_case(case, DegradeConfig())
    sr = infer_volume(gen, pair, cfg.mode)
    save_case(sr, args.output)
    print(f"wrote super-resolved case to {args.output}")
    return 0


def cmd_check(args) -> int:
    from .selfcheck import run_all

    t0 = time.time()
    results = run_all()
    width = max(len(r["name"]) for r in results)
    failures = 0
    for r in results:
        status = "PASS" if r["ok"] else "FAIL"
        if not r["ok"]:
            failures += 1
        print(f"{r['name']:<{width}}  {status}  value={r['value']:.3e}  tol={r['tol']:.0e}")
    print(f"{len(results) - failures}/{len(results)} checks passed in {time.time() - t0:.1f}s")
    return 0 if failures == 0 else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="refsr",
                                     description="Reference-guided volumetric DWI super-resolution harness")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, cases=True):
        p.add_argument("--manifest", type=Path, help="experiment manifest JSON")
        p.add_argument("--seed", type=int, help="override phantom/train seed")
        p.add_argument("--output", type=Path, help="output directory")
        p.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")
        if cases:
            p.add_argument("--cases", type=int, help="number of phantom cases")

    p = sub.add_parser("phantom", help="generate synthetic phantom cases")
    add_common(p)
    p.set_defaults(fn=cmd_phantom)

    p = sub.add_parser("degrade", help="volumetrically degrade saved cases")
    p.add_argument("--input", type=Path, required=True, help="directory of phantom cases")
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--config", type=Path, help="DegradeConfig JSON")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_degrade)

    p = sub.add_parser("train", help="train one super-resolution model")
    add_common(p, cases=False)
    p.add_argument("--data", type=Path, required=True, help="directory of phantom cases")
    p.add_argument("--mode", choices=("proposed", "conventional"), default="proposed")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="super-resolve one case with a trained model")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--case", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("run-ablation", help="full protocol: train both modes and evaluate")
    add_common(p)
    p.add_argument("--dry-run", action="store_true", help="validate the manifest without computing")
    p.set_defaults(fn=cmd_run_ablation)

    p = sub.add_parser("check", help="run the self-test matrix")
    p.set_defaults(fn=cmd_check)

    args = parser.parse_args(argv)
    substrate.configure_threads()
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
