"""Acceptance suite: the nine headline criteria, each printing one PASS/FAIL line.

Criteria 1-5 are fast property pins.  Criteria 6-8 share one desk-scale
ablation run (10 cases, 64x64x32 HR, 12 directions); criterion 9 repeats that
run with the same manifest and compares every CSV byte for byte.
"""

import dataclasses
import time

import numpy as np
import pytest

from refsr import dtfit, selfcheck
from refsr.degrade import DegradeConfig, degrade_volume, downsample_through_plane, upsample_to_grid
from refsr.core import Volume
from refsr.experiment import ExperimentManifest, run_ablation
from refsr.metrics import psnr, ssim
from refsr.phantom import PhantomConfig, make_phantom_case
from refsr.srnet import GeneratorConfig
from refsr.train import TrainConfig

# Desk-scale configuration: slim generator and short schedule so the full
# two-model ablation fits the stated CPU budget while the orderings still
# hold with wide margins.
ACCEPT_GENERATOR = GeneratorConfig(base_width=16, channel_mults=(1, 2, 2),
                                   attention_at_depth=frozenset())
ACCEPT_TRAIN = TrainConfig(epochs=3, generator=ACCEPT_GENERATOR)


def _manifest() -> ExperimentManifest:
    return ExperimentManifest(train=ACCEPT_TRAIN)


def _report(capsys, num: int, name: str, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[criterion {num}] {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {num} ({name}): {detail}"


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance") / "run1"
    t0 = time.time()
    result = run_ablation(_manifest(), out, progress=lambda *_: None)
    return result, out, time.time() - t0


def test_criterion_1_gradient_correctness(capsys):
    t0 = time.time()
    worst_prim = max(err for _, err in selfcheck.primitive_gradient_checks())
    gen_err = selfcheck.generator_loss_gradient_check()
    elapsed = time.time() - t0
    worst = max(worst_prim, gen_err)
    ok = worst < 1e-4 and elapsed < 180.0
    _report(capsys, 1, "gradient correctness", ok,
            f"max rel err {worst:.2e} < 1e-4, {elapsed:.1f}s < 180s")


def test_criterion_2_parseval(capsys):
    worst = selfcheck.parseval_check(n_pairs=100)
    _report(capsys, 2, "Parseval frequency/pixel pin", worst < 1e-6,
            f"max rel deviation {worst:.2e} < 1e-6 over 100 pairs")


def test_criterion_3_degradation_identities(capsys):
    lin = selfcheck.degradation_linearity_check()

    # constant preservation under the full 4x/4x degradation
    const = Volume(np.full((8, 32, 32), 0.7, dtype=np.float64), (1.5, 1.5, 1.5))
    cfg = DegradeConfig()
    lr, up = degrade_volume(const, cfg)
    const_err = max(np.abs(lr.data - 0.7).max(), np.abs(up.data - 0.7).max())

    # affine ramp: block mean of 4 consecutive slices of a linear-in-z ramp
    # equals the ramp at the block centre
    z = np.arange(16, dtype=np.float64)
    ramp = Volume(np.broadcast_to(z[:, None, None], (16, 8, 8)).copy(), (1.5, 1.5, 1.5))
    down = downsample_through_plane(ramp, cfg)
    affine_err = np.abs(down.data - np.array([1.5, 5.5, 9.5, 13.5])[:, None, None]).max()

    # four identical slices average to themselves
    rng = np.random.default_rng(3)
    s = rng.random((8, 8))
    stack = Volume(np.repeat(s[None], 4, axis=0), (1.5, 1.5, 1.5))
    ident_err = np.abs(downsample_through_plane(stack, cfg).data[0] - s).max()

    worst = max(lin, const_err, affine_err, ident_err)
    _report(capsys, 3, "degradation linearity and identities", worst < 1e-6,
            f"linearity {lin:.2e}, const {const_err:.2e}, affine {affine_err:.2e}, "
            f"identical-slices {ident_err:.2e}, all < 1e-6")


def test_criterion_4_ssim_oracle_and_psnr_pin(capsys):
    worst = selfcheck.ssim_oracle_check(n_pairs=50)

    rng = np.random.default_rng(5)
    x = rng.random((32, 32))
    self_ssim = ssim(x, x, data_range=1.0)

    # 10x10 zeros vs a single unit pixel: mse = 1/100 = 0.01 exactly
    a = np.zeros((10, 10))
    b = a.copy()
    b[0, 0] = 1.0
    psnr_val = psnr(a, b, data_range=1.0)

    ok = worst < 1e-8 and self_ssim == 1.0 and psnr_val == 20.0
    _report(capsys, 4, "SSIM oracle equivalence", ok,
            f"max |fast - brute| {worst:.2e} < 1e-8, ssim(x,x)={self_ssim}, "
            f"psnr(mse=0.01)={psnr_val}")


def test_criterion_5_tensor_roundtrip(capsys):
    rt = selfcheck.tensor_roundtrip_check()

    # FA of an isotropic tensor is exactly zero
    iso = np.zeros((6, 2, 2, 2))
    iso[0:3] = 1.5e-3
    iso_field = dtfit.TensorField(iso, np.ones((2, 2, 2), dtype=bool))
    fa_iso = float(np.abs(dtfit.fa(iso_field).data).max())

    # MD is invariant under a random rotation of the tensor
    rng = np.random.default_rng(9)
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    d = np.diag([1.5e-3, 0.9e-3, 0.6e-3])
    dr = q @ d @ q.T
    comp = np.array([dr[0, 0], dr[1, 1], dr[2, 2], dr[0, 1], dr[0, 2], dr[1, 2]])
    rot_field = dtfit.TensorField(np.broadcast_to(comp[:, None, None, None], (6, 1, 1, 1)).copy(),
                                  np.ones((1, 1, 1), dtype=bool))
    md_err = abs(float(dtfit.md(rot_field).data[0, 0, 0]) - float(np.trace(d) / 3.0))

    # noiseless fit recovers the configured +60 -> -60 degree helix ramp
    cfg = PhantomConfig(dims=(8, 32, 32), n_directions=12, b_values=(500.0,), seed=5)
    case, tensors = make_phantom_case(cfg, "accept5")
    field = dtfit.fit_tensor(case)
    geom = case.geometry
    mask = field.mask & tensors.mask
    ha_fit = dtfit.ha(field, geom).data
    ha_gt = dtfit.ha(tensors, geom).data
    ha_err = float(dtfit.circular_abs_diff_deg(ha_fit, ha_gt)[mask].max())

    ok = rt < 1e-9 and fa_iso == 0.0 and md_err < 1e-12 and ha_err < 1.0
    _report(capsys, 5, "tensor round-trip", ok,
            f"rel Frobenius {rt:.2e} < 1e-9, FA(iso)={fa_iso}, "
            f"MD rotation err {md_err:.2e} < 1e-12, HA ramp err {ha_err:.3f} deg < 1")


def test_criterion_6_table1_ordering(capsys, ablation):
    result, _, elapsed = ablation
    b = ACCEPT_TRAIN.train_b_values[0]
    t1 = {m: result.table1[f"{m}|b={b:g}"] for m in ("bilinear", "conventional", "proposed")}
    margin = t1["proposed"]["psnr_mean"] - t1["conventional"]["psnr_mean"]
    ok = (
        24.0 <= t1["bilinear"]["psnr_mean"] <= 29.0
        and margin >= 0.5
        and t1["conventional"]["psnr_mean"] > t1["bilinear"]["psnr_mean"]
        and t1["proposed"]["ssim_mean"] > t1["conventional"]["ssim_mean"]
        and t1["conventional"]["ssim_mean"] > t1["bilinear"]["ssim_mean"]
        and elapsed < 45 * 60
    )
    _report(capsys, 6, "Table-1 ordering at desk scale", ok,
            f"PSNR prop {t1['proposed']['psnr_mean']:.2f} > conv "
            f"{t1['conventional']['psnr_mean']:.2f} (margin {margin:.2f} >= 0.5) > bil "
            f"{t1['bilinear']['psnr_mean']:.2f} in [24, 29]; SSIM "
            f"{t1['proposed']['ssim_mean']:.3f} > {t1['conventional']['ssim_mean']:.3f} > "
            f"{t1['bilinear']['ssim_mean']:.3f}; {elapsed:.0f}s < 2700s")


def test_criterion_7_table2_generalization(capsys, ablation):
    result, _, _ = ablation
    bu = [b for b in ACCEPT_TRAIN.eval_b_values if b not in ACCEPT_TRAIN.train_b_values][0]
    t2 = {m: result.table2[f"{m}|b={bu:g}"] for m in ("bilinear", "proposed")}
    ok = (t2["proposed"]["psnr_mean"] > t2["bilinear"]["psnr_mean"]
          and t2["proposed"]["ssim_mean"] > t2["bilinear"]["ssim_mean"])
    _report(capsys, 7, "Table-2 generalization to unseen b", ok,
            f"b={bu:g}: PSNR {t2['proposed']['psnr_mean']:.2f} > "
            f"{t2['bilinear']['psnr_mean']:.2f}, SSIM {t2['proposed']['ssim_mean']:.3f} > "
            f"{t2['bilinear']['ssim_mean']:.3f}")


def test_criterion_8_downstream_maps(capsys, ablation):
    result, _, _ = ablation
    prop, bil = result.map_errors["proposed"], result.map_errors["bilinear"]
    ok = all(prop[m]["mae"] < bil[m]["mae"] for m in ("md", "fa", "ha"))
    detail = ", ".join(f"{m} {prop[m]['mae']:.3g} < {bil[m]['mae']:.3g}" for m in ("md", "fa", "ha"))
    _report(capsys, 8, "downstream MD/FA/HA improvement", ok, detail)


def test_criterion_9_determinism(capsys, ablation, tmp_path):
    _, out1, _ = ablation
    out2 = tmp_path / "run2"
    run_ablation(_manifest(), out2, progress=lambda *_: None)
    csvs = sorted(p.name for p in out1.glob("*.csv"))
    assert csvs, "first run produced no CSVs"
    mismatched = [n for n in csvs if (out1 / n).read_bytes() != (out2 / n).read_bytes()]
    _report(capsys, 9, "byte-identical rerun", not mismatched,
            f"{len(csvs)} CSVs compared ({', '.join(csvs)}); mismatched: {mismatched or 'none'}")
