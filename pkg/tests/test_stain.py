import numpy as np
import pytest

from mitopatch.errors import DegenerateStains, InsufficientTissue
from mitopatch.stain import (
    DEFAULT_TARGET_MATRIX,
    DEFAULT_TARGET_MAX_CONC,
    StainParams,
    compute_concentrations,
    estimate_stain_matrix,
    normalize_or_passthrough,
    normalize_patch,
    od_to_rgb,
    perturb_stains,
    rgb_to_od,
    stain_angle_deg,
)

from conftest import make_od_image, make_stain_patch


class TestOdConversion:
    def test_white_is_zero_absorbance(self):
        od = rgb_to_od(np.full((1, 1, 3), 255, np.uint8))
        assert np.all(od == 0.0)

    def test_midgray_hand_value(self):
        od = rgb_to_od(np.full((1, 1, 3), 128, np.uint8))
        assert od[0, 0, 0] == pytest.approx(-np.log(128 / 255), abs=1e-12)
        assert od[0, 0, 0] == pytest.approx(0.6892, abs=1e-4)

    def test_black_clamps_to_one(self):
        od = rgb_to_od(np.zeros((1, 1, 3), np.uint8))
        assert od[0, 0, 0] == pytest.approx(-np.log(1 / 255), abs=1e-12)
        assert od[0, 0, 0] == pytest.approx(5.5413, abs=1e-4)

    def test_zero_od_is_white(self):
        assert np.all(od_to_rgb(np.zeros((2, 2, 3))) == 255)

    def test_round_trip_exact_above_clamp_floor(self):
        vals = np.arange(1, 256, dtype=np.uint8)
        patch = np.stack([vals] * 3, axis=-1)[None]
        assert np.array_equal(od_to_rgb(rgb_to_od(patch)), patch)

    def test_inverse_of_hand_value(self):
        rgb = od_to_rgb(np.full((1, 1, 3), 0.6892))
        assert rgb[0, 0, 0] == 128

    def test_nonpositive_i0_rejected(self):
        with pytest.raises(ValueError):
            rgb_to_od(np.zeros((1, 1, 3), np.uint8), i0=0.0)


class TestEstimateStainMatrix:
    def test_construct_then_recover(self, rng):
        od, _ = make_od_image(rng, DEFAULT_TARGET_MATRIX)
        est = estimate_stain_matrix(od)
        for j in range(2):
            assert stain_angle_deg(est[:, j], DEFAULT_TARGET_MATRIX[:, j]) < 2.0

    def test_output_invariants(self, rng):
        for seed in range(10):
            local = np.random.default_rng(seed)
            od, _ = make_od_image(local, DEFAULT_TARGET_MATRIX)
            est = estimate_stain_matrix(od)
            np.testing.assert_allclose(np.linalg.norm(est, axis=0), 1.0, atol=1e-9)
            assert np.all(est >= 0.0)
            # hematoxylin-first by the red-channel rule
            assert est[0, 0] >= est[0, 1]

    def test_white_image_is_insufficient_tissue(self):
        od = rgb_to_od(np.full((10, 10, 3), 255, np.uint8))
        with pytest.raises(InsufficientTissue):
            estimate_stain_matrix(od)

    def test_single_ray_is_degenerate(self):
        direction = np.array([0.5, 0.6, 0.7])
        scales = np.linspace(0.5, 2.0, 100)[:, None]
        od = (scales * direction).reshape(10, 10, 3)
        with pytest.raises(DegenerateStains):
            estimate_stain_matrix(od)

    def test_too_few_tissue_pixels(self):
        od = np.zeros((5, 5, 3))
        od[:2, :2] = 1.0  # 4 tissue pixels only
        with pytest.raises(InsufficientTissue):
            estimate_stain_matrix(od)


class TestComputeConcentrations:
    def test_exact_unmixing_in_span(self, rng):
        od, conc = make_od_image(rng, DEFAULT_TARGET_MATRIX)
        rec = compute_concentrations(od, DEFAULT_TARGET_MATRIX)
        np.testing.assert_allclose(rec, conc, atol=1e-9)

    def test_zero_od_gives_zero(self):
        rec = compute_concentrations(np.zeros((4, 4, 3)), DEFAULT_TARGET_MATRIX)
        assert np.all(rec == 0.0)

    def test_off_span_matches_dense_least_squares(self, rng):
        od, _ = make_od_image(rng, DEFAULT_TARGET_MATRIX)
        od = od + rng.uniform(0.0, 0.3, od.shape)  # push off the stain plane
        rec = compute_concentrations(od, DEFAULT_TARGET_MATRIX)
        flat = od.reshape(-1, 3).T
        lstsq = np.linalg.lstsq(DEFAULT_TARGET_MATRIX, flat, rcond=None)[0]
        np.testing.assert_allclose(rec, np.maximum(lstsq, 0.0), atol=1e-9)

    def test_collinear_matrix_is_degenerate(self):
        v = np.array([0.6, 0.7, 0.38])
        v = v / np.linalg.norm(v)
        bad = np.stack([v, v], axis=1)
        with pytest.raises(DegenerateStains):
            compute_concentrations(np.zeros((2, 2, 3)), bad)


class TestNormalizePatch:
    def test_fixed_point_on_target_basis(self, rng):
        patch = make_stain_patch(rng, match_target_scale=True)
        out = normalize_patch(patch)
        mae = np.abs(out.astype(float) - patch.astype(float)).mean()
        assert mae <= 2.0

    def test_source_invariance(self, rng):
        # two patches with identical concentrations under different bases
        from conftest import make_stain_concentrations

        conc = make_stain_concentrations(rng, 40 * 40)
        rotated = DEFAULT_TARGET_MATRIX.copy()
        rotated[:, 0] = rotated[:, 0] + 0.12 * rotated[:, 1]
        rotated[:, 1] = rotated[:, 1] + 0.08 * DEFAULT_TARGET_MATRIX[:, 0]
        rotated /= np.linalg.norm(rotated, axis=0, keepdims=True)
        outs = []
        for basis in (DEFAULT_TARGET_MATRIX, rotated):
            od = (basis @ conc).T.reshape(40, 40, 3)
            outs.append(normalize_patch(od_to_rgb(od)).astype(float))
        mae = np.abs(outs[0] - outs[1]).mean()
        assert mae <= 4.0

    def test_scale_consistency(self, rng):
        from conftest import make_stain_concentrations

        conc = make_stain_concentrations(rng, 40 * 40, max_amp=1.3)
        outs = []
        for k in (1.0, 1.5):
            od = (DEFAULT_TARGET_MATRIX @ (k * conc)).T.reshape(40, 40, 3)
            outs.append(normalize_patch(od_to_rgb(od)).astype(float))
        assert np.abs(outs[0] - outs[1]).mean() <= 2.0

    def test_untissued_patch_passthrough(self):
        white = np.full((16, 16, 3), 255, np.uint8)
        out, ok = normalize_or_passthrough(white)
        assert not ok
        assert np.array_equal(out, white)

    def test_purity(self, rng):
        patch = make_stain_patch(rng)
        a = normalize_patch(patch)
        b = normalize_patch(patch)
        assert np.array_equal(a, b)


class TestPerturbStains:
    def test_identity_perturbation_matches_reconstruction(self, rng):
        patch = make_stain_patch(rng)
        out = perturb_stains(patch, 0.0, 0.0, np.random.default_rng(0))
        od = rgb_to_od(patch)
        src = estimate_stain_matrix(od)
        conc = compute_concentrations(od, src)
        recon = od_to_rgb((src @ conc).T.reshape(patch.shape))
        assert np.abs(out.astype(int) - recon.astype(int)).max() <= 1

    def test_determinism(self, rng):
        patch = make_stain_patch(rng)
        a = perturb_stains(patch, 0.2, 0.05, np.random.default_rng(7))
        b = perturb_stains(patch, 0.2, 0.05, np.random.default_rng(7))
        assert np.array_equal(a, b)

    def test_scale_window(self, rng):
        patch = make_stain_patch(rng, side=48)
        src = estimate_stain_matrix(rgb_to_od(patch))
        before = compute_concentrations(rgb_to_od(patch), src)
        for seed in range(5):
            out = perturb_stains(patch, 0.2, 0.0, np.random.default_rng(seed))
            after = compute_concentrations(rgb_to_od(out), src)
            for s in range(2):
                ratio = np.percentile(after[s], 99) / np.percentile(before[s], 99)
                assert 0.8 <= ratio <= 1.2

    def test_untissued_passthrough(self):
        white = np.full((16, 16, 3), 255, np.uint8)
        out = perturb_stains(white, 0.2, 0.05, np.random.default_rng(0))
        assert np.array_equal(out, white)

    def test_bad_sigma_rejected(self, rng):
        patch = make_stain_patch(rng)
        with pytest.raises(ValueError):
            perturb_stains(patch, 1.0, 0.0, np.random.default_rng(0))
        with pytest.raises(ValueError):
            perturb_stains(patch, 0.1, -0.1, np.random.default_rng(0))


class TestStainParams:
    def test_defaults_valid(self):
        params = StainParams()
        assert params.i0 == 255.0
        assert params.beta == 0.15
        np.testing.assert_allclose(
            np.linalg.norm(params.target_matrix, axis=0), 1.0, atol=1e-9
        )
        np.testing.assert_allclose(params.target_max_conc, DEFAULT_TARGET_MAX_CONC)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"beta": 0.0},
            {"alpha_percentile": 0.0},
            {"alpha_percentile": 50.0},
            {"conc_percentile": 0.0},
            {"conc_percentile": 101.0},
            {"i0": -1.0},
        ],
    )
    def test_invalid_params_rejected(self, kwargs):
        with pytest.raises(ValueError):
            StainParams(**kwargs)
