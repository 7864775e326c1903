import numpy as np
import pytest

from mitopatch.augment import (
    AugmentConfig,
    brightness_contrast,
    dihedral,
    eval_transform,
    random_crop_fraction,
    resize_bilinear,
    train_transform,
)
from mitopatch.stain import StainParams

from conftest import make_stain_patch


def random_patch(seed=0, h=224, w=224):
    return np.random.default_rng(seed).integers(0, 256, (h, w, 3)).astype(np.uint8)


class TestRandomCrop:
    def test_window_side(self):
        out = random_crop_fraction(random_patch(), 0.6, np.random.default_rng(0))
        assert out.shape == (134, 134, 3)

    def test_fraction_one_is_identity(self):
        p = random_patch(h=30, w=50)
        out = random_crop_fraction(p, 1.0, np.random.default_rng(0))
        assert np.array_equal(out, p)

    def test_determinism(self):
        p = random_patch()
        a = random_crop_fraction(p, 0.6, np.random.default_rng(42))
        b = random_crop_fraction(p, 0.6, np.random.default_rng(42))
        assert np.array_equal(a, b)

    def test_crop_is_a_window_of_the_input(self):
        p = random_patch(h=40, w=60)
        out = random_crop_fraction(p, 0.5, np.random.default_rng(5))
        side = out.shape[0]
        assert side == 20
        found = any(
            np.array_equal(p[t : t + side, l : l + side], out)
            for t in range(40 - side + 1)
            for l in range(60 - side + 1)
        )
        assert found

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            random_crop_fraction(random_patch(), 0.0, np.random.default_rng(0))


class TestDihedral:
    def test_identity(self):
        p = random_patch(h=16, w=16)
        assert np.array_equal(dihedral(p, 0, False, False), p)

    def test_rotation_group_order(self):
        p = random_patch(h=17, w=17)
        out = p
        for _ in range(4):
            out = dihedral(out, 1, False, False)
        assert np.array_equal(out, p)

    def test_flips_are_involutions(self):
        p = random_patch(h=12, w=20)
        assert np.array_equal(dihedral(dihedral(p, 0, True, False), 0, True, False), p)
        assert np.array_equal(dihedral(dihedral(p, 0, False, True), 0, False, True), p)

    def test_inverse_rotation(self):
        p = random_patch(h=9, w=9)
        assert np.array_equal(dihedral(dihedral(p, 1, False, False), 3, False, False), p)


class TestBrightnessContrast:
    def test_identity_factors(self):
        p = random_patch(h=8, w=8)
        assert np.array_equal(brightness_contrast(p, 1.0, 1.0), p)

    def test_symmetry_about_pivot(self):
        # a 127.5-symmetric pair stays symmetric under any contrast
        pair = np.array([[[100] * 3, [155] * 3]], np.uint8)
        out = brightness_contrast(pair, 1.0, 1.7)
        assert int(out[0, 0, 0]) + int(out[0, 1, 0]) == 255

    def test_clamp(self):
        p = np.full((1, 1, 3), 200, np.uint8)
        assert brightness_contrast(p, 2.0, 1.0)[0, 0, 0] == 255

    def test_nonpositive_factors_rejected(self):
        with pytest.raises(ValueError):
            brightness_contrast(random_patch(h=2, w=2), 0.0, 1.0)


class TestResizeBilinear:
    def test_same_size_identity(self):
        p = random_patch(h=33, w=21)
        assert np.array_equal(resize_bilinear(p, 33, 21), p)

    def test_constant_stays_constant(self):
        p = np.full((13, 29, 3), 77, np.uint8)
        for out_h, out_w in [(5, 5), (26, 58), (1, 1)]:
            out = resize_bilinear(p, out_h, out_w)
            assert out.shape == (out_h, out_w, 3)
            assert np.all(out == 77)

    def test_checkerboard_center_sample(self):
        cb = np.array(
            [[[0] * 3, [255] * 3], [[255] * 3, [0] * 3]], dtype=np.uint8
        )
        out = resize_bilinear(cb, 1, 1)
        assert out[0, 0, 0] == 128

    def test_downsample_then_shape(self):
        out = resize_bilinear(random_patch(h=64, w=48), 32, 24)
        assert out.shape == (32, 24, 3)


class TestTransforms:
    def test_train_shape_contract(self):
        cfg = AugmentConfig(normalize_train=False)
        for h, w in [(2, 2), (64, 64), (100, 224)]:
            t = train_transform(
                random_patch(h=h, w=w), cfg, StainParams(), np.random.default_rng(0)
            )
            assert t.shape == (3, 224, 224)

    def test_train_determinism(self):
        cfg = AugmentConfig(out_size=32)
        p = make_stain_patch(np.random.default_rng(3), side=48)
        a = train_transform(p, cfg, StainParams(), np.random.default_rng(9))
        b = train_transform(p, cfg, StainParams(), np.random.default_rng(9))
        assert np.array_equal(a, b)

    def test_degenerate_train_equals_eval(self):
        cfg = AugmentConfig(
            crop_fraction=1.0,
            p_dihedral=0.0,
            brightness_range=(1.0, 1.0),
            contrast_range=(1.0, 1.0),
            out_size=48,
            normalize_train=False,
        )
        p = random_patch(h=50, w=70)
        t = train_transform(p, cfg, StainParams(), np.random.default_rng(0))
        e = eval_transform(p, cfg)
        assert np.array_equal(t, e)

    def test_eval_deterministic(self):
        cfg = AugmentConfig(out_size=32)
        p = random_patch(h=64, w=64)
        assert np.array_equal(eval_transform(p, cfg), eval_transform(p, cfg))

    def test_eval_standardization_hand_value(self):
        cfg = AugmentConfig(out_size=10)
        t = eval_transform(np.zeros((10, 10, 3), np.uint8), cfg)
        assert t[0, 0, 0] == pytest.approx(-0.485 / 0.229, abs=1e-12)
        assert t[1, 0, 0] == pytest.approx(-0.456 / 0.224, abs=1e-12)
        assert t[2, 0, 0] == pytest.approx(-0.406 / 0.225, abs=1e-12)

    def test_near_mean_channel_is_near_zero(self):
        cfg = AugmentConfig(out_size=10)
        t = eval_transform(np.full((10, 10, 3), 124, np.uint8), cfg)
        assert abs(t[0, 0, 0]) <= 0.02

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AugmentConfig(crop_fraction=0.0)
        with pytest.raises(ValueError):
            AugmentConfig(brightness_range=(1.2, 0.8))
        with pytest.raises(ValueError):
            AugmentConfig(std=(0.0, 1.0, 1.0))
