import math

import numpy as np
import pytest

from expinterp.losses import (FeatureExtractor, LossError, LossWeights, PsiParams, color_loss,
                              color_loss_grad, composite_loss, composite_loss_grad, feature_loss,
                              feature_loss_grad, l1_loss, l1_loss_grad, l2_loss, l2_loss_grad,
                              psi, psi_prime, reconstruction_loss, reconstruction_loss_grad)

P = PsiParams()
C = P.c


def fd_grad(f, x, h=1e-4):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)


@pytest.fixture
def images(rng):
    y = rng.uniform(0, 255, (8, 8, 3))
    y0 = rng.uniform(0, 255, (8, 8, 3))
    r = y - y0 + rng.normal(0, 8, (8, 8, 3))
    return y, y0, r


class TestParams:
    def test_rejects_non_positive_c(self):
        with pytest.raises(LossError):
            PsiParams(0.0)

    def test_rejects_negative_weights(self):
        with pytest.raises(LossError):
            LossWeights(-0.1, 0.0)

    def test_rescale(self):
        assert PsiParams().rescaled(1 / 255).c == pytest.approx(5 / 255)


class TestPsi:
    def test_examples(self):
        assert psi(0.0) == pytest.approx(C / 2)
        assert psi(C) == pytest.approx(C)
        assert psi_prime(C) == 1.0
        assert psi(10 * C) == 10 * C
        assert psi_prime(-10 * C) == -1.0

    def test_continuity_at_threshold(self):
        for z in (C, -C):
            inner = (z * z + C * C) / (2 * C)
            assert abs(inner - abs(z)) < 1e-12
            assert abs(psi(np.nextafter(z, 0)) - psi(np.nextafter(z, 2 * z))) < 1e-12
            assert abs(psi_prime(np.nextafter(z, 0)) - psi_prime(np.nextafter(z, 2 * z))) < 1e-12

    def test_shape_properties(self):
        z = np.linspace(-5 * C, 5 * C, 20001)
        v, d = psi(z), psi_prime(z)
        np.testing.assert_allclose(v, v[::-1], atol=1e-12)
        assert np.all(np.abs(d) <= 1.0)
        assert np.all(np.diff(v, 2) >= -1e-12)  # convex
        assert np.all(v >= np.maximum(np.abs(z), C / 2) - 1e-12)
        # derivative is the slope of psi
        mid = 0.5 * (z[1:] + z[:-1])
        np.testing.assert_allclose(np.diff(v) / np.diff(z), psi_prime(mid), atol=1e-6)


class TestReconstruction:
    def test_floor(self, images):
        y, y0, _ = images
        assert reconstruction_loss(y, y0, y - y0) == pytest.approx(C / 2)

    def test_outer_branch(self, images):
        y, y0, _ = images
        assert reconstruction_loss(y, y0, y - y0 - 2 * C) == pytest.approx(2 * C)

    def test_loop_oracle(self, images):
        y, y0, r = images
        total = 0.0
        for v in (y - y0 - r).ravel():
            total += abs(v) if abs(v) > C else (v * v + C * C) / (2 * C)
        assert reconstruction_loss(y, y0, r) == pytest.approx(total / y.size, rel=1e-12)

    def test_shape_mismatch(self, images):
        y, y0, r = images
        with pytest.raises(LossError):
            reconstruction_loss(y, y0, r[:4])


class TestPlainLosses:
    def test_identical(self, images):
        y = images[0]
        assert l1_loss(y, y) == 0.0 and l2_loss(y, y) == 0.0

    def test_constant_difference(self, images):
        y = images[0]
        assert l1_loss(y, y - 3.0) == pytest.approx(3.0)
        assert l2_loss(y, y - 3.0) == pytest.approx(3.0)

    def test_loop_oracle(self, images):
        y, pred = images[0], images[1]
        diffs = [a - b for a, b in zip(y.ravel(), pred.ravel())]
        assert l1_loss(y, pred) == pytest.approx(sum(abs(d) for d in diffs) / len(diffs))
        assert l2_loss(y, pred) == pytest.approx(math.sqrt(sum(d * d for d in diffs) / len(diffs)))


class TestColorLoss:
    def test_identical(self, images):
        assert color_loss(images[0], images[0]) == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal(self):
        y = np.zeros((4, 4, 3))
        p = np.zeros((4, 4, 3))
        y[..., 0] = 1.0
        p[..., 1] = 1.0
        assert color_loss(y, p) == pytest.approx(math.pi / 2)

    def test_scale_invariance(self, images, rng):
        y, p = images[0], images[1]
        scale = rng.uniform(0.1, 10.0, (8, 8, 1))
        assert color_loss(y, 2 * y) == pytest.approx(0.0, abs=1e-12)
        assert color_loss(y, scale * p) == pytest.approx(color_loss(y, p), abs=1e-12)

    def test_black_pixels_count_zero(self):
        y = np.zeros((2, 2, 3))
        p = np.ones((2, 2, 3))
        assert color_loss(y, p) == 0.0

    def test_arccos_oracle(self, images):
        y, p = images[0], images[1]
        angles = []
        for a, b in zip(y.reshape(-1, 3), p.reshape(-1, 3)):
            cos = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
            angles.append(math.acos(min(1.0, max(-1.0, cos))))
        assert color_loss(y, p) == pytest.approx(np.mean(angles), abs=1e-10)

    def test_needs_three_channels(self):
        with pytest.raises(LossError):
            color_loss(np.ones((2, 2, 2)), np.ones((2, 2, 2)))


def _conv_loop(x, k):
    """Direct reflect-101 'same' correlation, x (H, W, Ci), k (s, s, Ci, Co)."""
    s = k.shape[0]
    p = s // 2
    h, w, _ = x.shape
    out = np.zeros((h, w, k.shape[3]))

    def ref(i, n):
        return -i if i < 0 else (2 * (n - 1) - i if i >= n else i)

    for yy in range(h):
        for xx in range(w):
            for i in range(s):
                for j in range(s):
                    out[yy, xx] += x[ref(yy + i - p, h), ref(xx + j - p, w)] @ k[i, j]
    return out


def _features_loop(fx, x):
    feats = [_conv_loop(x, fx.kernels[0])]
    for k in fx.kernels[1:]:
        act = np.maximum(feats[-1], 0.0)
        h, w = act.shape[0] // 2, act.shape[1] // 2
        pooled = np.array([[act[2 * i:2 * i + 2, 2 * j:2 * j + 2].mean(axis=(0, 1))
                            for j in range(w)] for i in range(h)])
        feats.append(_conv_loop(pooled, k))
    return feats


class TestFeatureLoss:
    def test_identical(self, images):
        assert feature_loss(FeatureExtractor.random(), images[0], images[0]) == 0.0

    def test_identity_extractor_is_mse(self, images):
        y, p = images[0], images[1]
        assert feature_loss(FeatureExtractor.identity(), y, p) == pytest.approx(np.mean((y - p) ** 2))

    def test_brute_force_oracle(self, images):
        fx = FeatureExtractor.random(seed=3)
        y, p = images[0], images[1]
        fy, fp = _features_loop(fx, y), _features_loop(fx, p)
        for got, want in zip(fx.features(y), fy):
            np.testing.assert_allclose(got, want, atol=1e-9)
        expected = np.mean([np.mean((a - b) ** 2) for a, b in zip(fy, fp)])
        assert feature_loss(fx, y, p) == pytest.approx(expected, rel=1e-10)

    def test_deterministic_seed(self):
        a, b = FeatureExtractor.random(seed=5), FeatureExtractor.random(seed=5)
        for ka, kb in zip(a.kernels, b.kernels):
            np.testing.assert_array_equal(ka, kb)
        assert [k.shape[3] for k in a.kernels] == [8, 16, 16]

    def test_batched_matches_single(self, images):
        fx = FeatureExtractor.random()
        batch = np.stack([images[0], images[1]])
        single = fx.features(images[1])
        for got, want in zip(fx.features(batch), single):
            np.testing.assert_allclose(got[1], want, atol=1e-12)


class TestGradients:
    """Analytic gradients against central differences, h = 1e-4, float64."""

    def test_reconstruction(self, images):
        y, y0, r = images
        g = reconstruction_loss_grad(y, y0, r)
        assert rel_err(g, fd_grad(lambda v: reconstruction_loss(y, y0, v), r.copy())) < 1e-4

    def test_l1(self, images):
        y, p, _ = images
        g = l1_loss_grad(y, p)
        assert rel_err(g, fd_grad(lambda v: l1_loss(y, v), p.copy())) < 1e-4

    def test_l2(self, images):
        y, p, _ = images
        g = l2_loss_grad(y, p)
        assert rel_err(g, fd_grad(lambda v: l2_loss(y, v), p.copy())) < 1e-4

    def test_color(self, images):
        y, p, _ = images
        g = color_loss_grad(y, p)
        assert rel_err(g, fd_grad(lambda v: color_loss(y, v), p.copy())) < 1e-4

    def test_feature(self, images):
        fx = FeatureExtractor.random()
        y, p, _ = images
        g = feature_loss_grad(fx, y, p)
        assert rel_err(g, fd_grad(lambda v: feature_loss(fx, y, v), p.copy())) < 1e-4

    @pytest.mark.parametrize("recon", ["hybrid", "l1", "l2"])
    def test_composite(self, images, recon):
        fx = FeatureExtractor.random()
        y, y0, r = images
        w = LossWeights(0.3, 0.2)
        _, g = composite_loss_grad(y, y0, r, P, w, fx, recon)
        fd = fd_grad(lambda v: composite_loss(y, y0, v, P, w, fx, recon).total, r.copy())
        assert rel_err(g, fd) < 1e-4

    def test_batched_composite(self, rng):
        y = rng.uniform(0, 1, (2, 8, 8, 3))
        y0 = rng.uniform(0, 1, (2, 8, 8, 3))
        r = rng.normal(0, 0.05, y.shape)
        fx = FeatureExtractor.random()
        p = P.rescaled(1 / 255)
        _, g = composite_loss_grad(y, y0, r, p, LossWeights(), fx)
        fd = fd_grad(lambda v: composite_loss(y, y0, v, p, LossWeights(), fx).total, r.copy(),
                     h=1e-6)
        assert rel_err(g, fd) < 1e-4


class TestComposite:
    def test_zero_weights(self, images):
        y, y0, r = images
        br = composite_loss(y, y0, r, P, LossWeights(0.0, 0.0), FeatureExtractor.random())
        assert br.total == pytest.approx(reconstruction_loss(y, y0, r))

    def test_perfect_prediction(self, images):
        y, y0, _ = images
        br = composite_loss(y, y0, y - y0, P, LossWeights(), FeatureExtractor.random())
        assert br.total == pytest.approx(C / 2)
        assert br.l_c == pytest.approx(0.0, abs=1e-12) and br.l_f == pytest.approx(0.0, abs=1e-20)

    def test_default_recombination(self, images):
        y, y0, r = images
        fx = FeatureExtractor.random()
        br = composite_loss(y, y0, r, P, LossWeights(), fx)
        pred = y0 + r
        expected = (reconstruction_loss(y, y0, r) + 0.01 * color_loss(y, pred)
                    + 0.01 * feature_loss(fx, y, pred))
        assert br.total == pytest.approx(expected, rel=1e-12)
        assert set(br.as_dict()) == {"l_d", "l_r", "l_c", "l_f"}

    def test_non_finite_aborts(self, images):
        y, y0, r = images
        r = r.copy()
        r[0, 0, 0] = np.inf
        with pytest.raises(LossError):
            composite_loss_grad(y, y0, r)

    def test_unknown_recon(self, images):
        with pytest.raises(LossError):
            composite_loss(*images, recon="huber")
