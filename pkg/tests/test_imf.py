import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from expinterp.dataio import SynthConfig, synth_scene
from expinterp.imf import (CODES, CrfModel, ImfError, ImfTable, ScatterPlot, compose,
                           estimate_pair_imf, eval_linear, fit_double_sigmoid, functional_sqrt,
                           imf_from_crf, imf_from_scatter, invert, medium_imfs,
                           medium_imfs_from_crf, parse_crf, scatter_from_exposures)
from expinterp.imgcore import ExposureImage


def gamma_table(ratio, gamma=2.2):
    """Closed-form IMF of the CRF 255 e^(1/gamma)."""
    return np.minimum(CODES * ratio ** (1.0 / gamma), 255.0)


def table(values):
    return ImfTable(np.asarray(values, dtype=np.float64))


def assert_monotone(imf):
    assert np.all(np.diff(imf.values, axis=1) >= 0)
    assert imf.values.min() >= 0 and imf.values.max() <= 255


class TestImfTable:
    def test_identity(self):
        np.testing.assert_array_equal(ImfTable.identity().values[1], CODES)

    def test_broadcasts_single_channel(self):
        assert ImfTable(CODES).values.shape == (3, 256)

    def test_rejects_bad_shape(self):
        with pytest.raises(ImfError):
            ImfTable(np.zeros((3, 10)))

    def test_rejects_non_finite(self):
        v = CODES.copy()
        v[3] = np.inf
        with pytest.raises(ImfError):
            ImfTable(v)

    def test_csv_round_trip(self, tmp_path, rng):
        imf = ImfTable(np.sort(rng.uniform(0, 255, (3, 256)), axis=1))
        text = imf.to_csv(tmp_path / "t.csv")
        lines = text.splitlines()
        assert lines[0] == "imf-v1"
        assert len(lines) == 769
        assert lines[1].startswith("0,0,")
        np.testing.assert_array_equal(ImfTable.from_csv(tmp_path / "t.csv").values, imf.values)

    def test_csv_accepts_column_row(self):
        text = ImfTable.identity().to_csv()
        body = text.split("\n", 1)[1]
        back = ImfTable.from_csv("imf-v1\nchannel,z,value\n" + body)
        np.testing.assert_array_equal(back.values, ImfTable.identity().values)

    def test_csv_rejects_missing_rows(self):
        text = ImfTable.identity().to_csv()
        with pytest.raises(ImfError):
            ImfTable.from_csv("\n".join(text.splitlines()[:-1]))

    def test_apply_and_evaluate(self):
        imf = table(np.minimum(2 * CODES, 255))
        codes = np.array([[[0, 10, 200]]], dtype=np.uint8)
        np.testing.assert_array_equal(imf.apply(codes), [[[0, 20, 255]]])
        assert imf.evaluate(10.5, 0) == pytest.approx(21.0)


class TestCrf:
    def test_gamma_samples(self):
        crf = CrfModel.gamma(2.2)
        assert crf.irradiance.size == 1024
        assert crf.forward(0.0, 0) == 0.0
        assert crf.forward(1.0, 2) == pytest.approx(255.0)
        assert crf.forward(0.5, 1) == pytest.approx(255 * 0.5 ** (1 / 2.2), abs=0.05)

    def test_rejects_non_increasing(self):
        with pytest.raises(ImfError):
            CrfModel(np.array([0.0, 0.5, 0.5, 1.0]), np.array([0.0, 10.0, 20.0, 255.0]))

    def test_rejects_bad_endpoints(self):
        with pytest.raises(ImfError):
            CrfModel(np.array([0.0, 1.0]), np.array([1.0, 255.0]))
        with pytest.raises(ImfError):
            CrfModel(np.array([0.0, 1.0]), np.array([0.0, 250.0]))

    def test_parse(self):
        assert isinstance(parse_crf("gamma:1.8"), CrfModel)
        with pytest.raises(ImfError):
            parse_crf("spline:3")


class TestImfFromCrf:
    def test_unit_ratio_is_identity(self):
        imf = imf_from_crf(CrfModel.gamma(2.2), 1.0)
        np.testing.assert_allclose(imf.values, np.tile(CODES, (3, 1)), atol=0.5)

    def test_gamma_closed_form(self):
        imf = imf_from_crf(CrfModel.gamma(2.2), 0.25)
        expected = 200 * 0.25 ** (1 / 2.2)
        assert expected == pytest.approx(106.5, abs=0.05)
        assert imf.evaluate(200, 0) == pytest.approx(expected, abs=0.1)

    def test_black_maps_to_black(self):
        for ratio in (0.1, 1.0, 4.0, 16.0):
            np.testing.assert_array_equal(imf_from_crf(CrfModel.gamma(2.2), ratio).values[:, 0], 0)

    def test_matches_closed_form_everywhere(self):
        imf = imf_from_crf(CrfModel.gamma(2.2), 4.0)
        np.testing.assert_allclose(imf.values[0], gamma_table(4.0), atol=0.3)

    @pytest.mark.parametrize("ratio", [2.0, 4.0, 16.0])
    def test_ratio_round_trip(self, ratio):
        crf = CrfModel.gamma(2.2)
        up, down = imf_from_crf(crf, ratio), imf_from_crf(crf, 1 / ratio)
        z = CODES[up.values[0] < 255]
        np.testing.assert_allclose(down.evaluate(up.values[0][z.astype(int)], 0), z, atol=1.0)

    def test_rejects_bad_ratio(self):
        with pytest.raises(ImfError):
            imf_from_crf(CrfModel.gamma(2.2), 0.0)

    def test_medium_pair(self):
        d2m, b2m = medium_imfs_from_crf(CrfModel.gamma(2.2), 1.0, 16.0)
        np.testing.assert_allclose(d2m.values[0], gamma_table(4.0), atol=0.3)
        np.testing.assert_allclose(b2m.values[0], gamma_table(0.25), atol=0.3)


class TestEstimatePairImf:
    def test_identical_images_give_identity(self, clean_scene):
        img = clean_scene.truth
        imf = estimate_pair_imf(img, ExposureImage(img.data, img.exposure_time))
        span = slice(5, 251)
        np.testing.assert_allclose(imf.values[:, span], np.tile(CODES[span], (3, 1)), atol=1.0)

    def test_gamma_ratio_four(self):
        scene = synth_scene(SynthConfig(seed=3, ratio=4.0, noise=0.0))
        imf = estimate_pair_imf(scene.dark, scene.bright)
        expected = 255 * (4 * (CODES / 255) ** 2.2) ** (1 / 2.2)
        for c in range(3):
            d = scene.dark.data[..., c]
            b = scene.bright.data[..., c]
            seen = np.unique(d[(d >= 5) & (b <= 250)])
            assert np.max(np.abs(imf.values[c, seen] - expected[seen])) <= 2.0

    def test_two_level_image(self):
        dark = np.zeros((4, 4, 3), np.uint8)
        dark[:2], dark[2:] = 10, 20
        bright = np.where(dark == 10, 40, 80).astype(np.uint8)
        imf = estimate_pair_imf(ExposureImage(dark, 1.0), ExposureImage(bright, 4.0))
        assert_monotone(imf)
        # brute force: each level holds half the mass, whose centre lands on the
        # matching bright level; linear in between, through the origin below
        for c in range(3):
            assert imf.values[c, 10] == pytest.approx(40.0)
            assert imf.values[c, 20] == pytest.approx(80.0)
            assert imf.values[c, 15] == pytest.approx(60.0)
            assert imf.values[c, 5] == pytest.approx(20.0)
            assert imf.values[c, 30] == pytest.approx(120.0)

    def test_noisy_estimate_is_monotone(self, noisy_scene):
        assert_monotone(estimate_pair_imf(noisy_scene.dark, noisy_scene.bright))

    def test_saturated_channel(self):
        dark = np.full((4, 4, 3), 100, np.uint8)
        bright = dark.copy()
        bright[..., 1] = 255
        with pytest.raises(ImfError, match="saturated"):
            estimate_pair_imf(ExposureImage(dark, 1.0), ExposureImage(bright, 2.0))

    def test_shape_mismatch(self):
        a = ExposureImage(np.full((4, 4, 3), 100, np.uint8), 1.0)
        b = ExposureImage(np.full((4, 5, 3), 100, np.uint8), 2.0)
        with pytest.raises(ImfError):
            estimate_pair_imf(a, b)

    def test_time_order(self):
        a = ExposureImage(np.full((4, 4, 3), 100, np.uint8), 2.0)
        b = ExposureImage(np.full((4, 4, 3), 100, np.uint8), 1.0)
        with pytest.raises(ImfError):
            estimate_pair_imf(a, b)


class TestInvert:
    def test_identity(self):
        np.testing.assert_allclose(invert(ImfTable.identity()).values, ImfTable.identity().values)

    def test_doubling(self):
        inv = invert(table(np.minimum(2 * CODES, 255)))
        # brute-force preimage scan on a fine grid of the piecewise-linear table
        fine = np.linspace(0, 255, 255 * 64 + 1)
        vals = np.interp(fine, CODES, np.minimum(2 * CODES, 255))
        for v in range(0, 255):
            pre = fine[np.abs(vals - v) < 1e-9]
            assert inv.values[0, v] == pytest.approx(0.5 * (pre.min() + pre.max()), abs=1e-6)
            assert abs(inv.values[0, v] - v / 2) <= 0.5

    def test_plateau_midpoint_at_top(self):
        inv = invert(table(np.minimum(2 * CODES, 255)))
        # the preimage of 255 is the whole plateau [128, 255]
        assert inv.values[0, 255] == pytest.approx(191.5)

    def test_double_inversion(self):
        lam = gamma_table(4.0)
        back = invert(invert(table(lam)))
        strict = np.nonzero(np.diff(lam) > 0)[0]
        np.testing.assert_allclose(back.values[0, strict], lam[strict], atol=1.0)

    def test_rejects_non_monotone(self):
        v = CODES.copy()
        v[100] = 0
        with pytest.raises(ImfError):
            invert(ImfTable(v))


class TestFunctionalSqrt:
    def test_identity(self):
        np.testing.assert_allclose(functional_sqrt(ImfTable.identity()).values,
                                   ImfTable.identity().values, atol=1e-6)

    def test_linear_table(self):
        g = functional_sqrt(table(np.minimum(4 * CODES, 255)))
        z = np.arange(0, 63)
        np.testing.assert_allclose(g.values[0, z], 2 * z, atol=1.0)

    def test_gamma_sixteen_to_four(self):
        g = functional_sqrt(table(gamma_table(16.0)))
        unclipped = gamma_table(4.0) < 250
        np.testing.assert_allclose(g.values[:, unclipped], np.tile(gamma_table(4.0)[unclipped], (3, 1)),
                                   atol=2.0)

    @settings(max_examples=15, deadline=None)
    @given(gamma=st.floats(1.5, 3.0), ratio=st.floats(2.0, 32.0))
    def test_composition_bound(self, gamma, ratio):
        lam = imf_from_crf(CrfModel.gamma(gamma), ratio)
        g = functional_sqrt(lam)
        assert_monotone(g)
        for c in range(3):
            unclipped = lam.values[c] < 250
            gg = np.interp(g.values[c], CODES, g.values[c])
            assert np.max(np.abs(gg - lam.values[c])[unclipped]) <= 1.0

    def test_rejects_non_monotone(self):
        v = CODES.copy()
        v[10] = 200
        with pytest.raises(ImfError):
            functional_sqrt(ImfTable(v))

    def test_medium_imfs_consistency(self):
        d2b = table(gamma_table(16.0))
        d2m, b2m = medium_imfs(d2b)
        np.testing.assert_allclose(b2m.values[0, 50:250], gamma_table(0.25)[50:250], atol=2.0)
        # bright->mid after dark->bright lands on dark->mid
        chained = compose(b2m, d2b)
        ok = d2b.values[0] < 250
        np.testing.assert_allclose(chained.values[0, ok], d2m.values[0, ok], atol=1.5)


class TestScatter:
    def _points(self, x, z):
        return ScatterPlot([x] * 3, [z] * 3)

    def test_sorted_on_construction(self):
        sp = self._points([3.0, 1.0, 2.0], [30.0, 10.0, 20.0])
        np.testing.assert_array_equal(sp.x[0], [1, 2, 3])
        np.testing.assert_array_equal(sp.z[0], [10, 20, 30])

    def test_needs_two_points(self):
        with pytest.raises(ImfError):
            self._points([1.0], [1.0])

    def test_exact_at_known_points(self, rng):
        x = np.sort(rng.uniform(0, 1, 20))
        z = np.sort(rng.uniform(0, 255, 20))
        np.testing.assert_array_equal(eval_linear(self._points(x, z), x), z)

    def test_midpoint(self):
        assert eval_linear(self._points([0.0, 1.0], [0.0, 10.0]), 0.5) == 5.0

    def test_clamped(self):
        sp = self._points([1.0, 2.0], [7.0, 9.0])
        assert eval_linear(sp, 0.0) == 7.0
        assert eval_linear(sp, 5.0) == 9.0

    def test_ties_averaged(self):
        sp = self._points([0.0, 1.0, 1.0, 2.0], [0.0, 4.0, 6.0, 10.0])
        assert eval_linear(sp, 1.0) == 5.0

    def test_from_exposures(self, clean_scene):
        sp = scatter_from_exposures([clean_scene.dark, clean_scene.bright], clean_scene.radiance)
        assert sp.x[0][0] == 0 and sp.z[0][0] == 0
        assert np.all(np.diff(sp.x[0]) >= 0)
        # a code's mean exposure sits near the CRF preimage of that code
        crf = clean_scene.crf
        np.testing.assert_allclose(sp.x[0][1:], crf.inverse(sp.z[0][1:], 0),
                                   rtol=0.2, atol=1e-3)


class TestDoubleSigmoid:
    def test_recovers_known_curve(self):
        k = np.array([140.0, 3.0, -9.0, 115.0, 6.0, -8.0])
        x = np.linspace(0, 1.5, 60)
        z = k[0] / (1 + np.exp(k[1] + k[2] * x)) + k[3] / (1 + np.exp(k[4] + k[5] * x))
        params = fit_double_sigmoid(ScatterPlot([x] * 3, [z] * 3))
        for p in params:
            assert p.rms < 0.5
            np.testing.assert_allclose(p(x), z, atol=1.5)

    def test_constant_scatter(self):
        x = np.linspace(0, 1, 10)
        params = fit_double_sigmoid(ScatterPlot([x] * 3, [np.full(10, 42.0)] * 3))
        for p in params:
            assert p.rms == 0.0
            np.testing.assert_allclose(p(x), 42.0)

    def test_needs_six_points(self):
        x = np.linspace(0, 1, 5)
        with pytest.raises(ImfError):
            fit_double_sigmoid(ScatterPlot([x] * 3, [x] * 3))

    def test_linear_beats_sigmoid_on_gamma_scatter(self, clean_scene):
        sp = scatter_from_exposures([clean_scene.dark, clean_scene.bright], clean_scene.radiance)
        params = fit_double_sigmoid(sp)
        crf = clean_scene.crf
        for c in range(3):
            grid = np.linspace(sp.x[c][0], sp.x[c][-1], 500)
            truth = crf.forward(grid, c)
            rms_lin = np.sqrt(np.mean((eval_linear(sp, grid, c) - truth) ** 2))
            rms_sig = np.sqrt(np.mean((params[c](grid) - truth) ** 2))
            assert rms_lin <= rms_sig

    @pytest.mark.parametrize("method", ["linear", "sigmoid"])
    def test_scatter_imf_is_monotone(self, clean_scene, method):
        sp = scatter_from_exposures([clean_scene.dark, clean_scene.bright], clean_scene.radiance)
        assert_monotone(imf_from_scatter(sp, 4.0, method))

    def test_unknown_method(self, clean_scene):
        sp = scatter_from_exposures([clean_scene.dark, clean_scene.bright], clean_scene.radiance)
        with pytest.raises(ImfError):
            imf_from_scatter(sp, 4.0, "cubic")
