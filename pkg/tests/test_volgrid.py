from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from stagekit.volgrid import (
    Case,
    ImageVolume,
    LabelVolume,
    PackCorruptionError,
    PackFormatError,
    PHANTOM_CROPS,
    Role,
    StageLabel,
    center_crop,
    crop_around_label,
    load_volume_pack,
    percentile_normalize,
    resample_isotropic,
    save_volume_pack,
)

from oracles import sort_percentile


def make_case(rng, shape=(8, 8, 8), with_labels=True, stage=None, role=Role.TRAIN_LABELED):
    image = ImageVolume(rng.random(shape, dtype=np.float32), (0.5, 0.5, 0.5))
    labels = None
    if with_labels:
        labels = LabelVolume(rng.integers(0, 64, size=shape, dtype=np.uint8), (0.5, 0.5, 0.5))
    return Case(id="case-x", image=image, labels=labels, stage=stage, role=role)


class TestVolumePack:
    def test_size_arithmetic(self, tmp_path):
        rng = np.random.default_rng(0)
        case = make_case(rng, with_labels=False)
        save_volume_pack(case, tmp_path / "p")
        assert (tmp_path / "p" / "image.raw").stat().st_size == 8 * 8 * 8 * 4
        loaded = load_volume_pack(tmp_path / "p")
        assert loaded.image.data.size == 512
        assert loaded.image.spacing_mm == (0.5, 0.5, 0.5)

    def test_declared_labels_but_missing_file(self, tmp_path):
        rng = np.random.default_rng(1)
        case = make_case(rng, with_labels=True)
        save_volume_pack(case, tmp_path / "p")
        (tmp_path / "p" / "labels.raw").unlink()
        with pytest.raises(PackCorruptionError):
            load_volume_pack(tmp_path / "p")

    def test_truncated_image_is_corruption(self, tmp_path):
        rng = np.random.default_rng(2)
        save_volume_pack(make_case(rng), tmp_path / "p")
        raw = (tmp_path / "p" / "image.raw").read_bytes()
        (tmp_path / "p" / "image.raw").write_bytes(raw[:-4])
        with pytest.raises(PackCorruptionError):
            load_volume_pack(tmp_path / "p")

    def test_missing_header(self, tmp_path):
        with pytest.raises(PackFormatError):
            load_volume_pack(tmp_path)

    def test_header_omits_label_entry_without_labels(self, tmp_path):
        rng = np.random.default_rng(3)
        save_volume_pack(make_case(rng, with_labels=False), tmp_path / "p")
        header = json.loads((tmp_path / "p" / "header.json").read_text())
        assert "label_bits" not in header and "label_dtype" not in header
        assert not (tmp_path / "p" / "labels.raw").exists()

    def test_non_finite_image_rejected(self, tmp_path):
        rng = np.random.default_rng(4)
        case = make_case(rng, with_labels=False)
        case.image.data[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            save_volume_pack(case, tmp_path / "p")

    @settings(max_examples=20, deadline=None)
    @given(
        seed=st.integers(0, 2**31 - 1),
        with_labels=st.booleans(),
        stage=st.sampled_from([None, StageLabel.UNDER_T2, StageLabel.OVER_T3]),
        role=st.sampled_from([Role.TRAIN_LABELED, Role.EVAL, Role.STAGE_ONLY]),
    )
    def test_round_trip_bit_exact(self, tmp_path_factory, seed, with_labels, stage, role):
        rng = np.random.default_rng(seed)
        case = make_case(rng, shape=(5, 6, 7), with_labels=with_labels, stage=stage, role=role)
        path = tmp_path_factory.mktemp("pack") / "p"
        save_volume_pack(case, path)
        loaded = load_volume_pack(path)
        assert loaded.id == case.id
        assert loaded.role is case.role and loaded.stage is case.stage
        assert loaded.image.data.tobytes() == case.image.data.tobytes()
        assert loaded.image.spacing_mm == case.image.spacing_mm
        if with_labels:
            assert loaded.labels.data.tobytes() == case.labels.data.tobytes()
        else:
            assert loaded.labels is None

    def test_generated_role_requires_labels(self):
        rng = np.random.default_rng(5)
        with pytest.raises(ValueError):
            make_case(rng, with_labels=False, role=Role.GENERATED)


class TestResample:
    def test_factor_two(self):
        img = ImageVolume(np.random.default_rng(0).random((10, 10, 10), dtype=np.float32), (1.0, 1.0, 1.0))
        out = resample_isotropic(img, 0.5)
        assert out.shape == (20, 20, 20)
        assert out.spacing_mm == (0.5, 0.5, 0.5)

    def test_identity_bit_equal(self):
        img = ImageVolume(np.random.default_rng(1).random((6, 6, 6), dtype=np.float32), (0.5, 0.5, 0.5))
        out = resample_isotropic(img, 0.5)
        assert np.array_equal(out.data, img.data)

    def test_constant_stays_constant(self):
        img = ImageVolume(np.full((7, 9, 11), 0.37, dtype=np.float32), (1.0, 0.8, 1.3))
        out = resample_isotropic(img, 0.5)
        assert np.allclose(out.data, 0.37, atol=1e-6)

    def test_labels_nearest_per_bit(self):
        rng = np.random.default_rng(2)
        lab = LabelVolume(rng.integers(0, 8, size=(6, 6, 6), dtype=np.uint8), (1.0, 1.0, 1.0))
        out = resample_isotropic(lab, 0.5)
        assert out.shape == (12, 12, 12)
        assert set(np.unique(out.data)) <= set(np.unique(lab.data))

    def test_sphere_topology_preserved(self):
        z, y, x = np.mgrid[0:24, 0:24, 0:24]
        sphere = ((z - 12) ** 2 + (y - 12) ** 2 + (x - 12) ** 2) <= 5**2
        lab = LabelVolume(sphere.astype(np.uint8), (1.0, 1.0, 1.0))
        out = resample_isotropic(lab, 0.5)
        _, n = ndimage.label(out.data & 1)
        assert n == 1

    def test_degenerate_output_shape(self):
        img = ImageVolume(np.zeros((1, 8, 8), dtype=np.float32), (0.1, 1.0, 1.0))
        with pytest.raises(ValueError):
            resample_isotropic(img, 0.5)


class TestCrop:
    def test_interior_crop_centered(self, phantom_t3):
        out = crop_around_label(phantom_t3, "TRAIN", (32, 32, 32))
        assert out.image.shape == (32, 32, 32)
        centroid = ndimage.center_of_mass(out.labels.mask("cancer"))
        assert all(abs(c - 15.5) < 2.0 for c in centroid)

    def test_corner_centroid_padded(self):
        labels = np.zeros((16, 16, 16), dtype=np.uint8)
        labels[0, 0, 0] = 1 << 2
        case = Case(
            id="corner",
            image=ImageVolume(np.ones((16, 16, 16), dtype=np.float32), (0.5,) * 3),
            labels=LabelVolume(labels, (0.5,) * 3),
        )
        out = crop_around_label(case, "TRAIN", (12, 12, 12))
        assert out.image.shape == (12, 12, 12)
        assert out.labels.mask("cancer").sum() == 1

    def test_phantom_crop_retains_cancer(self, phantom_t3):
        out = crop_around_label(phantom_t3, "TRAIN", PHANTOM_CROPS["TRAIN"])
        assert out.image.shape == PHANTOM_CROPS["TRAIN"]
        assert out.labels.mask("cancer").sum() == phantom_t3.labels.mask("cancer").sum()

    def test_empty_cancer_mentions_rectum_fallback(self):
        case = Case(
            id="empty",
            image=ImageVolume(np.zeros((8, 8, 8), dtype=np.float32), (0.5,) * 3),
            labels=LabelVolume(np.zeros((8, 8, 8), dtype=np.uint8), (0.5,) * 3),
        )
        with pytest.raises(ValueError, match="rectum centroid"):
            crop_around_label(case, "TRAIN", (4, 4, 4))

    def test_center_crop_shape(self, phantom_t2):
        out = center_crop(phantom_t2, (48, 40, 40))
        assert out.image.shape == (48, 40, 40)

    @settings(max_examples=15, deadline=None)
    @given(
        nz=st.integers(3, 20), ny=st.integers(3, 20), nx=st.integers(3, 20),
        cz=st.integers(0, 19), cy=st.integers(0, 19), cx=st.integers(0, 19),
    )
    def test_output_shape_exact_for_every_geometry(self, nz, ny, nx, cz, cy, cx):
        shape = (20, 20, 20)
        labels = np.zeros(shape, dtype=np.uint8)
        labels[cz, cy, cx] = 1 << 2
        case = Case(
            id="g",
            image=ImageVolume(np.ones(shape, dtype=np.float32), (0.5,) * 3),
            labels=LabelVolume(labels, (0.5,) * 3),
        )
        out = crop_around_label(case, "EVAL", (nz, ny, nx))
        assert out.image.shape == (nz, ny, nx)
        assert out.labels.shape == (nz, ny, nx)


class TestPercentileNormalize:
    def test_linear_map_midpoint(self):
        data = np.linspace(0.0, 100.0, 21 * 21 * 21, dtype=np.float32).reshape(21, 21, 21)
        out = percentile_normalize(ImageVolume(data, (1.0,) * 3), p_low=0.0, p_high=100.0)
        mid = out.data[data == 50.0]
        assert np.allclose(mid, 0.5, atol=1e-6)

    def test_constant_maps_to_zero(self):
        out = percentile_normalize(ImageVolume(np.full((5, 5, 5), 3.3, np.float32), (1.0,) * 3))
        assert np.array_equal(out.data, np.zeros((5, 5, 5), np.float32))

    def test_percentiles_against_sort_oracle(self):
        rng = np.random.default_rng(7)
        data = rng.normal(50.0, 20.0, size=(17, 19, 23)).astype(np.float32)
        img = ImageVolume(data, (1.0,) * 3)
        out = percentile_normalize(img, 1.0, 99.0)
        lo = sort_percentile(data, 1.0, mode="higher")
        hi = sort_percentile(data, 99.0, mode="lower")
        expected = np.clip((data.astype(np.float64) - lo) / (hi - lo), 0, 1)
        assert np.abs(out.data - expected).max() < 1e-6
        # the implementation's percentile thresholds land exactly on 0 and 1
        assert abs(sort_percentile(out.data, 1.0, mode="higher")) < 1e-6
        assert abs(sort_percentile(out.data, 99.0, mode="lower") - 1.0) < 1e-6

    def test_idempotent_within_tolerance(self):
        rng = np.random.default_rng(8)
        img = ImageVolume(rng.random((16, 16, 16), dtype=np.float32) * 7.0, (1.0,) * 3)
        once = percentile_normalize(img)
        twice = percentile_normalize(once)
        assert np.abs(once.data - twice.data).max() <= 1e-6

    def test_rejects_bad_bounds(self):
        img = ImageVolume(np.zeros((4, 4, 4), np.float32), (1.0,) * 3)
        with pytest.raises(ValueError):
            percentile_normalize(img, 99.0, 1.0)
