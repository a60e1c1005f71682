import dataclasses

import numpy as np
import pytest
import torch

from refsr import phantom
from refsr.core import normalize_case
from refsr.degrade import DegradeConfig, degrade_case
from refsr.srnet import GeneratorConfig
from refsr.train import (
    ConfigError,
    TrainConfig,
    infer_volume,
    load_model,
    make_training_pairs,
    save_model,
    split_cases,
    train,
    write_log_csv,
)

TINY_GEN = GeneratorConfig(base_width=8, channel_mults=(1, 2), attention_at_depth=set())


@pytest.fixture(scope="module")
def tiny_pairs():
    """Two small degraded phantom cases for smoke training."""
    out = {}
    for i in range(2):
        cfg = phantom.PhantomConfig(dims=(8, 32, 32), n_directions=6, b_values=(500.0,),
                                    seed=30 + i, noise_sigma=0.02)
        case, _ = phantom.make_noisy_case(cfg, f"t{i}")
        out[f"t{i}"] = degrade_case(normalize_case(case))
    return out


class TestSplitCases:
    def test_paper_ratio_on_ten_cases(self):
        ids = [f"c{i}" for i in range(10)]
        split = split_cases(ids, (5, 2, 3), seed=1)
        assert (len(split["train"]), len(split["val"]), len(split["test"])) == (5, 2, 3)

    def test_same_seed_same_split(self):
        ids = [f"c{i}" for i in range(10)]
        assert split_cases(ids, (5, 2, 3), 7) == split_cases(ids, (5, 2, 3), 7)

    @pytest.mark.parametrize("seed", range(40))
    def test_partitions_disjoint_and_cover(self, seed):
        ids = [f"c{i}" for i in range(np.random.default_rng(seed).integers(3, 20))]
        split = split_cases(ids, (5, 2, 3), seed)
        joined = split["train"] + split["val"] + split["test"]
        assert sorted(joined) == sorted(ids)
        assert len(set(joined)) == len(joined)
        assert all(split[k] for k in ("train", "val", "test"))

    def test_too_few_cases(self):
        with pytest.raises(ConfigError):
            split_cases(["a", "b"], (5, 2, 3), 0)


class TestTrainingPairs:
    def test_pair_counting(self, tiny_pairs):
        pairs = make_training_pairs(tiny_pairs["t0"], "proposed", (500.0,))
        assert len(pairs) == 8 * 6  # slices x directions

    def test_channel_counts_per_mode(self, tiny_pairs):
        p2 = make_training_pairs(tiny_pairs["t0"], "proposed", (500.0,))
        p1 = make_training_pairs(tiny_pairs["t0"], "conventional", (500.0,))
        assert p2[0][0].shape == (2, 32, 32)
        assert p1[0][0].shape == (1, 32, 32)

    def test_b0_channel_direction_independent(self, tiny_pairs):
        pairs = make_training_pairs(tiny_pairs["t0"], "proposed", (500.0,))
        z = 3
        b0_slices = [inp[1] for k, (inp, _) in enumerate(pairs) if k % 8 == z]
        for s in b0_slices[1:]:
            assert np.array_equal(s, b0_slices[0])

    def test_b_value_filter(self, tiny_pairs):
        assert make_training_pairs(tiny_pairs["t0"], "proposed", (1000.0,)) == []


class TestTrainConfig:
    def test_lr_schedule(self):
        cfg = TrainConfig()
        assert cfg.lr_at(0) == 1e-4
        assert cfg.lr_at(19) == 1e-4
        assert cfg.lr_at(20) == 5e-5
        assert cfg.lr_at(40) == 2.5e-5

    def test_mode_channel_consistency(self):
        with pytest.raises(ConfigError):
            TrainConfig(mode="conventional", generator=GeneratorConfig(in_channels=2))

    def test_dict_roundtrip(self):
        cfg = TrainConfig(epochs=7, generator=TINY_GEN, seed=3)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


@pytest.fixture(scope="module")
def smoke_result(tiny_pairs):
    cfg = TrainConfig(mode="proposed", epochs=3, batch_size=8, seed=11,
                      generator=dataclasses.replace(TINY_GEN, in_channels=2))
    tp = make_training_pairs(tiny_pairs["t0"], "proposed", (500.0,))
    vp = make_training_pairs(tiny_pairs["t1"], "proposed", (500.0,))[:16]
    return cfg, tp, vp, train(cfg, tp, vp)


class TestTrainLoop:
    def test_pixel_loss_descends(self, smoke_result):
        _, _, _, result = smoke_result
        assert result.log[-1].pixel < result.log[0].pixel

    def test_log_schedule_and_fields(self, smoke_result):
        cfg, _, _, result = smoke_result
        assert [l.epoch for l in result.log] == list(range(cfg.epochs))
        assert all(l.lr == cfg.lr_at(l.epoch) for l in result.log)

    def test_deterministic_replay(self, smoke_result):
        cfg, tp, vp, result = smoke_result
        replay = train(cfg, tp, vp)
        for a, b in zip(result.log, replay.log):
            assert a == b
        for pa, pb in zip(result.generator.parameters(), replay.generator.parameters()):
            assert torch.equal(pa, pb)

    def test_checkpoint_roundtrip(self, smoke_result, tmp_path):
        _, _, _, result = smoke_result
        save_model(tmp_path / "m.ckpt", result)
        gen, cfg = load_model(tmp_path / "m.ckpt")
        x = torch.rand(1, 2, 32, 32)
        assert torch.allclose(gen(x), result.generator(x), atol=1e-6)
        assert cfg == result.config

    def test_log_csv_format(self, smoke_result, tmp_path):
        _, _, _, result = smoke_result
        write_log_csv(result.log, tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().strip().split("\n")
        assert lines[0].startswith("epoch,lr,pixel,freq")
        assert len(lines) == 1 + len(result.log)


class TestInference:
    def test_zero_head_generator_reproduces_bilinear(self, tiny_pairs):
        from refsr.srnet import build_generator

        gen = build_generator(dataclasses.replace(TINY_GEN, in_channels=2), seed=0)
        pair = tiny_pairs["t0"]
        sr = infer_volume(gen, pair, "proposed")
        for d_sr, d_base in zip(sr.dwis, pair.lr_on_hr_grid.dwis):
            assert np.allclose(d_sr.volume.data, d_base.volume.data, atol=1e-5)

    def test_output_dims_match_hr(self, tiny_pairs):
        from refsr.srnet import build_generator

        gen = build_generator(dataclasses.replace(TINY_GEN, in_channels=2), seed=0)
        sr = infer_volume(gen, tiny_pairs["t0"], "proposed")
        assert sr.dims == tiny_pairs["t0"].hr.dims

    def test_mode_mismatch_rejected(self, tiny_pairs):
        from refsr.srnet import build_generator

        gen = build_generator(dataclasses.replace(TINY_GEN, in_channels=1), seed=0)
        with pytest.raises(ConfigError):
            infer_volume(gen, tiny_pairs["t0"], "proposed")
