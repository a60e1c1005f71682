import numpy as np
import pytest

from refsr import dtfit, phantom
from refsr.core import DwiImage, Volume
from refsr.phantom import ConfigError, PhantomConfig, PhantomGeometry


class TestDirectionSet:
    def test_minimum_count_enforced(self):
        with pytest.raises(ConfigError):
            phantom.make_direction_set(5)

    def test_unit_norm_and_distinct(self):
        dirs = phantom.make_direction_set(6, seed=3)
        assert dirs.shape == (6, 3)
        assert np.allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-12)
        dots = dirs @ dirs.T
        np.fill_diagonal(dots, 0.0)
        assert np.all(np.arccos(np.clip(np.abs(dots), 0, 1)) > 1e-6)

    def test_second_moment_approaches_isotropy(self):
        dirs = phantom.make_direction_set(256, seed=3)
        moment = dirs.T @ dirs / len(dirs)
        assert np.max(np.abs(moment - np.eye(3) / 3)) < 0.02

    def test_deterministic_in_seed(self):
        a = phantom.make_direction_set(12, seed=9)
        b = phantom.make_direction_set(12, seed=9)
        c = phantom.make_direction_set(12, seed=10)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)


class TestPhantomCase:
    def test_bit_identical_for_identical_config(self):
        cfg = PhantomConfig(dims=(4, 32, 32), seed=7, b_values=(500.0,))
        a, ta = phantom.make_phantom_case(cfg)
        b, tb = phantom.make_phantom_case(cfg)
        assert np.array_equal(a.b0.volume.data, b.b0.volume.data)
        for da, db in zip(a.dwis, b.dwis):
            assert np.array_equal(da.volume.data, db.volume.data)
        assert np.array_equal(ta.components, tb.components)

    def test_tensor_eigenvalues_match_config(self, noiseless_phantom):
        cfg, case, tensors = noiseless_phantom
        w, _ = tensors.eigensystem()
        w = w[tensors.mask]
        assert np.allclose(w, np.array(cfg.eigenvalues_mm2_per_s), atol=1e-12)

    def test_primary_axis_is_circumferential_at_midwall(self):
        cfg = PhantomConfig(dims=(4, 48, 48), seed=11, b_values=(500.0,), edge_softness_vox=0.0)
        case, tensors = phantom.make_phantom_case(cfg)
        geom = case.geometry
        _, c_hat, _, r = dtfit.local_frame(geom, cfg.dims)
        inner = geom.inner_radius[:, None, None]
        outer = geom.outer_radius[:, None, None]
        d = (r - inner) / (outer - inner)
        mid = tensors.mask & (np.abs(d - 0.5) < 0.01)
        if np.any(mid):
            _, v = tensors.eigensystem()
            e1 = v[..., 0][mid]
            align = np.abs(np.sum(e1 * c_hat[mid], axis=-1))
            # the window admits |d - 0.5| < 0.01, i.e. helix angles up to 1.2 deg
            assert np.all(align > np.cos(np.radians(1.2)))

    def test_tensors_positive_definite(self, noiseless_phantom):
        cfg, _, tensors = noiseless_phantom
        w, _ = tensors.eigensystem()
        assert w[tensors.mask].min() >= cfg.eigenvalues_mm2_per_s[2] - 1e-15

    def test_annulus_out_of_bounds_rejected(self):
        with pytest.raises(phantom.GeometryError):
            PhantomGeometry((8.0, 8.0), np.full(4, 6.0), np.full(4, 20.0)).validate_bounds((4, 16, 16))


class TestSynthesizeDwi:
    def test_b0_returns_s0(self, noiseless_phantom):
        _, case, tensors = noiseless_phantom
        img = phantom.synthesize_dwi(tensors, case.b0.volume, 0.0, (1.0, 0.0, 0.0))
        assert np.array_equal(img.volume.data, case.b0.volume.data)

    def test_closed_form_attenuation_along_e1(self, noiseless_phantom):
        cfg, case, tensors = noiseless_phantom
        _, v = tensors.eigensystem()
        # pick one masked voxel, align g with its primary eigenvector
        idx = tuple(np.argwhere(tensors.mask)[0])
        g = v[idx][:, 0]
        img = phantom.synthesize_dwi(tensors, case.b0.volume, 500.0, g)
        expected = case.b0.volume.data[idx] * np.exp(-500.0 * cfg.eigenvalues_mm2_per_s[0])
        assert np.isclose(img.volume.data[idx], expected, rtol=1e-10)

    def test_monotone_in_b(self, noiseless_phantom):
        _, case, tensors = noiseless_phantom
        g = phantom.make_direction_set(6, 0)[0]
        prev = None
        for b in (0.0, 250.0, 500.0, 1000.0):
            s = phantom.synthesize_dwi(tensors, case.b0.volume, b, g).volume.data
            if prev is not None:
                assert np.all(s[tensors.mask] <= prev[tensors.mask] + 1e-12)
            prev = s

    def test_negative_b_rejected(self, noiseless_phantom):
        _, case, tensors = noiseless_phantom
        with pytest.raises(ConfigError):
            phantom.synthesize_dwi(tensors, case.b0.volume, -1.0, (1, 0, 0))


class TestRicianNoise:
    def test_sigma_zero_is_identity(self, noiseless_phantom):
        _, case, _ = noiseless_phantom
        assert phantom.add_rician_noise(case.dwis[0], 0.0, 1) is case.dwis[0]

    def test_deterministic_per_seed(self, noiseless_phantom):
        _, case, _ = noiseless_phantom
        a = phantom.add_rician_noise(case.dwis[0], 0.1, 7)
        b = phantom.add_rician_noise(case.dwis[0], 0.1, 7)
        c = phantom.add_rician_noise(case.dwis[0], 0.1, 8)
        assert np.array_equal(a.volume.data, b.volume.data)
        assert not np.array_equal(a.volume.data, c.volume.data)

    def test_rayleigh_mean_at_zero_signal(self):
        img = DwiImage(Volume(np.zeros((100, 100, 100))))
        noisy = phantom.add_rician_noise(img, 1.0, 3)
        assert abs(noisy.volume.data.mean() - np.sqrt(np.pi / 2)) < 0.01


def test_case_roundtrip_through_directory(tmp_path, noiseless_phantom):
    cfg, case, tensors = noiseless_phantom
    phantom.save_case(case, tmp_path / "c", tensors=tensors, cfg=cfg)
    back, tback = phantom.load_case(tmp_path / "c")
    assert back.case_id == case.case_id
    assert len(back.dwis) == len(case.dwis)
    assert np.allclose(back.b0.volume.data, case.b0.volume.data, atol=1e-7)
    assert np.array_equal(tback.mask, tensors.mask)
    assert back.geometry is not None
