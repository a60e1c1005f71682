"""End-to-end experiment harness: phantom generation, ablation training,
evaluation tables, downstream tensor-map comparison and figure montages."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import dtfit
from .core import DwiCase, normalize_case
from .degrade import DegradeConfig, DegradedCase, degrade_case
from .metrics import MetricsReport, evaluate
from .phantom import PhantomConfig, make_noisy_case
from .srnet import GeneratorConfig
from .train import TrainConfig, TrainResult, infer_volume, make_training_pairs, save_model, split_cases, train, write_log_csv


@dataclass
class ExperimentManifest:
    phantom: PhantomConfig = field(default_factory=lambda: PhantomConfig(noise_sigma=0.02))
    degrade: DegradeConfig = field(default_factory=DegradeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    n_cases: int = 10
    output_dir: str = "runs/ablation"

    def to_dict(self) -> dict:
        return {
            "phantom": self.phantom.to_dict(),
            "degrade": dataclasses.asdict(self.degrade),
            "train": self.train.to_dict(),
            "n_cases": self.n_cases,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentManifest":
        return cls(
            phantom=PhantomConfig.from_dict(d.get("phantom", {})),
            degrade=DegradeConfig(**d.get("degrade", {})),
            train=TrainConfig.from_dict(d.get("train", {})),
            n_cases=d.get("n_cases", 10),
            output_dir=d.get("output_dir", "runs/ablation"),
        )

    @classmethod
    def load(cls, path) -> "ExperimentManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")

    def validate(self) -> None:
        self.phantom.validate()
        if self.n_cases < 3:
            raise ValueError(f"need at least 3 cases, got {self.n_cases}")


def generate_cases(manifest: ExperimentManifest) -> dict:
    """Normalized noisy phantom cases keyed by case id, plus ground truth."""
    cases = {}
    for i in range(manifest.n_cases):
        cfg = dataclasses.replace(manifest.phantom, seed=manifest.phantom.seed + i)
        case_id = f"case_{i:03d}"
        case, tensors = make_noisy_case(cfg, case_id)
        cases[case_id] = {"case": normalize_case(case), "tensors": tensors, "config": cfg}
    return cases


def conventional_config(cfg: TrainConfig) -> TrainConfig:
    gen = dataclasses.replace(cfg.generator, in_channels=1)
    return dataclasses.replace(cfg, mode="conventional", generator=gen)


def proposed_config(cfg: TrainConfig) -> TrainConfig:
    gen = dataclasses.replace(cfg.generator, in_channels=2)
    return dataclasses.replace(cfg, mode="proposed", generator=gen)


def _filter_b(case: DwiCase, b: float) -> DwiCase:
    return DwiCase(case.case_id, case.b0, case.dwis_at(b), geometry=case.geometry)


def _gather_pairs(degraded: dict, ids: list, mode: str, b_values) -> list:
    pairs = []
    for cid in ids:
        pairs.extend(make_training_pairs(degraded[cid], mode, b_values))
    return pairs


def slice_montage(columns: dict, path, width_per_panel: int | None = None) -> None:
    """Side-by-side grayscale panels on a fixed [0, 1] window."""
    panels = []
    for name, img in columns.items():
        arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
        panels.append((arr * 255).astype(np.uint8))
    sep = np.full((panels[0].shape[0], 2), 255, dtype=np.uint8)
    row = panels[0]
    for p in panels[1:]:
        row = np.concatenate([row, sep, p], axis=1)
    Image.fromarray(row, mode="L").save(path)


@dataclass
class AblationResult:
    report: MetricsReport
    table1: dict
    table2: dict
    map_errors: dict
    ordering_ok: bool
    split: dict


def run_ablation(manifest: ExperimentManifest, out_dir, progress=print) -> AblationResult:
    """The full protocol: generate, split, degrade, train both modes, evaluate.

    Writes table1/table2 CSVs and JSON summaries, per-epoch logs, checkpoints
    and per-case montages under out_dir.  ordering_ok reflects the headline
    claims: proposed > conventional > bilinear at the trained b-value, and
    proposed > bilinear at the unseen b-value.
    """
    manifest.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest.save(out_dir / "manifest.json")
    b_train = manifest.train.train_b_values
    b_unseen = [b for b in manifest.train.eval_b_values if b not in b_train]

    progress(f"generating {manifest.n_cases} phantom cases ...")
    cases = generate_cases(manifest)
    split = split_cases(sorted(cases), manifest.train.split_ratio, manifest.train.seed)
    (out_dir / "split.json").write_text(json.dumps(split, sort_keys=True, indent=1) + "\n")

    degraded = {cid: degrade_case(entry["case"], manifest.degrade) for cid, entry in cases.items()}

    results: dict[str, TrainResult] = {}
    for mode, cfg in (("proposed", proposed_config(manifest.train)),
                      ("conventional", conventional_config(manifest.train))):
        progress(f"training {mode} model ({cfg.epochs} epochs) ...")
        train_pairs = _gather_pairs(degraded, split["train"], mode, b_train)
        val_pairs = _gather_pairs(degraded, split["val"], mode, b_train)
        result = train(cfg, train_pairs, val_pairs,
                       progress=lambda log: progress(
                           f"  epoch {log.epoch}: pixel {log.pixel:.2e} val_psnr {log.val_psnr:.2f}"))
        results[mode] = result
        write_log_csv(result.log, out_dir / f"train_log_{mode}.csv")
        save_model(out_dir / f"model_{mode}.ckpt", result)

    progress("running inference on the test split ...")
    hr_cases, method_cases = {}, {"bilinear": {}, "proposed": {}, "conventional": {}}
    for cid in split["test"]:
        pair = degraded[cid]
        hr_cases[cid] = pair.hr
        method_cases["bilinear"][cid] = pair.lr_on_hr_grid
        method_cases["proposed"][cid] = infer_volume(results["proposed"].generator, pair, "proposed")
        method_cases["conventional"][cid] = infer_volume(
            results["conventional"].generator, pair, "conventional", b_values=b_train)

    # trained b-value table (all three methods)
    b0_val = b_train[0]
    report1 = evaluate(
        {m: {cid: _filter_b(c, b0_val) for cid, c in cs.items()} for m, cs in method_cases.items()},
        {cid: _filter_b(c, b0_val) for cid, c in hr_cases.items()},
    )
    report1.to_csv(out_dir / "table1.csv")
    report1.to_json(out_dir / "table1.json")
    table1 = report1.summary_dict()

    # unseen b-value table (proposed vs bilinear)
    table2, report2 = {}, None
    if b_unseen:
        bu = b_unseen[0]
        report2 = evaluate(
            {m: {cid: _filter_b(c, bu) for cid, c in method_cases[m].items()} for m in ("bilinear", "proposed")},
            {cid: _filter_b(c, bu) for cid, c in hr_cases.items()},
        )
        report2.to_csv(out_dir / "table2.csv")
        report2.to_json(out_dir / "table2.json")
        table2 = report2.summary_dict()

    progress("fitting diffusion tensors on SR and baseline volumes ...")
    map_errors = downstream_map_errors(cases, hr_cases, method_cases, b_train)
    (out_dir / "map_errors.json").write_text(json.dumps(map_errors, sort_keys=True, indent=1) + "\n")

    for cid in split["test"]:
        z = hr_cases[cid].dims[0] // 2
        k = 0  # first trained-b direction
        montage_cols = {
            "bilinear": method_cases["bilinear"][cid].dwis_at(b0_val)[k].volume.data[z],
            "gt": hr_cases[cid].dwis_at(b0_val)[k].volume.data[z],
            "proposed": method_cases["proposed"][cid].dwis_at(b0_val)[k].volume.data[z],
            "conventional": method_cases["conventional"][cid].dwis_at(b0_val)[k].volume.data[z],
        }
        slice_montage(montage_cols, out_dir / f"montage_{cid}.png")

    ordering_ok = check_ordering(table1, table2, b0_val, b_unseen[0] if b_unseen else None)
    rows = report1.rows + (report2.rows if report2 else [])
    summary = {"table1": table1, "table2": table2, "map_errors": map_errors,
               "ordering_ok": ordering_ok, "split": split}
    (out_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    return AblationResult(MetricsReport(rows), table1, table2, map_errors, ordering_ok, split)


def check_ordering(table1: dict, table2: dict, b_train: float, b_unseen: float | None) -> bool:
    """The paper's headline ordering relations on the aggregated metrics."""
    t1 = {m: table1[f"{m}|b={b_train:g}"] for m in ("bilinear", "proposed", "conventional")}
    ok = (
        t1["proposed"]["psnr_mean"] > t1["conventional"]["psnr_mean"]
        and t1["conventional"]["psnr_mean"] > t1["bilinear"]["psnr_mean"]
        and t1["proposed"]["ssim_mean"] > t1["conventional"]["ssim_mean"]
        and t1["conventional"]["ssim_mean"] > t1["bilinear"]["ssim_mean"]
    )
    if b_unseen is not None and table2:
        t2 = {m: table2[f"{m}|b={b_unseen:g}"] for m in ("bilinear", "proposed")}
        ok = ok and (
            t2["proposed"]["psnr_mean"] > t2["bilinear"]["psnr_mean"]
            and t2["proposed"]["ssim_mean"] > t2["bilinear"]["ssim_mean"]
        )
    return ok


def downstream_map_errors(cases: dict, hr_cases: dict, method_cases: dict, b_train) -> dict:
    """Masked MD/FA/HA MAE of SR- and baseline-derived maps against HR-derived maps,
    averaged over the test cases."""
    sums: dict[str, dict[str, list]] = {}
    for cid in hr_cases:
        geom = cases[cid]["case"].geometry
        hr_b500 = _filter_with_b0(hr_cases[cid], b_train)
        hr_field = dtfit.fit_tensor(hr_b500)
        wall = geom.wall_mask(hr_cases[cid].dims)
        hr_maps = {"md": dtfit.md(hr_field), "fa": dtfit.fa(hr_field), "ha": dtfit.ha(hr_field, geom)}
        for method in ("bilinear", "proposed", "conventional"):
            case_m = _filter_with_b0(method_cases[method][cid], b_train)
            field_m = dtfit.fit_tensor(case_m)
            mask = wall & hr_field.mask & field_m.mask
            maps_m = {"md": dtfit.md(field_m), "fa": dtfit.fa(field_m), "ha": dtfit.ha(field_m, geom)}
            errs = dtfit.compare_maps(maps_m, hr_maps, mask)
            for name, e in errs.items():
                sums.setdefault(method, {}).setdefault(name, []).append(e["mae"])
    return {
        method: {name: {"mae": float(np.mean(v))} for name, v in per_map.items()}
        for method, per_map in sums.items()
    }


def _filter_with_b0(case: DwiCase, b_values) -> DwiCase:
    dwis = [d for d in case.dwis if d.b_value in b_values]
    return DwiCase(case.case_id, case.b0, dwis, geometry=case.geometry)
