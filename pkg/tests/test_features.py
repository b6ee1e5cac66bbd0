import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mixnet.features import (
    LDA,
    FeaturePipeline,
    LdaTransform,
    MeanNormalizer,
    Splicer,
    generalized_eigh,
    lda_apply,
    lda_fit,
    mean_normalize,
    splice,
)
from mixnet.linalg import ShapeError, make_rng

frames = arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 4)),
                elements=st.floats(-1e3, 1e3))


def random_spd(rng, d, cond=1e3):
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return (q * np.geomspace(1.0, cond, d)) @ q.T


class TestMeanNormalize:
    def test_constant_sequence_gives_zeros(self):
        assert not mean_normalize(np.full((5, 3), 7.25)).any()

    def test_per_utterance(self):
        X = np.array([[1.0], [3.0], [10.0], [20.0], [30.0]])
        assert mean_normalize(X, [2, 3]).ravel().tolist() == [-1.0, 1.0, -10.0, 0.0, 10.0]

    @settings(max_examples=30, deadline=None)
    @given(frames)
    def test_zero_mean(self, X):
        assert np.abs(mean_normalize(X).mean(axis=0)).max() <= 1e-9 * max(1.0, np.abs(X).max())

    def test_rejects_empty_and_bad_lengths(self):
        with pytest.raises(ValueError):
            mean_normalize(np.empty((0, 2)))
        with pytest.raises(ValueError):
            mean_normalize(np.ones((4, 2)), [3, 2])


class TestSplice:
    def test_zero_context_is_identity(self):
        X = make_rng(0).standard_normal((6, 3))
        assert np.array_equal(splice(X, 0), X)

    def test_edge_replication(self):
        a, b, c = [1.0, 2.0], [3.0, 4.0], [5.0, 6.0]
        out = splice(np.array([a, b, c]), 1)
        assert out.tolist() == [a + a + b, a + b + c, b + c + c]

    def test_utterances_do_not_leak(self):
        X = np.arange(5, dtype=float)[:, None]
        out = splice(X, 1, [2, 3])
        assert out.tolist() == [[0, 0, 1], [0, 1, 1], [2, 2, 3], [2, 3, 4], [3, 4, 4]]

    @settings(max_examples=30, deadline=None)
    @given(frames, st.integers(0, 3))
    def test_center_block_is_input(self, X, k):
        d = X.shape[1]
        assert np.array_equal(splice(X, k)[:, k * d:(k + 1) * d], X)

    def test_negative_context_rejected(self):
        with pytest.raises(ValueError):
            splice(np.ones((2, 2)), -1)


class TestGeneralizedEigh:
    def test_two_class_closed_form(self):
        within = np.diag([1.0, 4.0])
        mu = np.array([[1.0, 0.0], [-1.0, 0.0]])
        between = sum(0.5 * np.outer(m, m) for m in mu)
        lam, V, eps = generalized_eigh(between, within)
        oracle = np.linalg.solve(within, mu[0] - mu[1])
        w = V[:, 0]
        cos = abs(w @ oracle) / (np.linalg.norm(w) * np.linalg.norm(oracle))
        assert eps == 0.0
        assert cos > 1 - 1e-9

    @pytest.mark.parametrize("seed", range(10))
    def test_residual_on_random_spd(self, seed):
        rng = make_rng(seed)
        d = 2 + seed
        within = random_spd(rng, d)
        M = rng.standard_normal((d, 3))
        between = M @ M.T
        lam, V, eps = generalized_eigh(between, within)
        assert eps == 0.0
        assert np.all(np.diff(lam) <= 0)
        for k in range(d):
            w = V[:, k]
            assert np.linalg.norm(between @ w - lam[k] * within @ w) < 1e-8
        np.testing.assert_allclose(V.T @ within @ V, np.eye(d), atol=1e-9)
        np.testing.assert_allclose(lam, scipy.linalg.eigh(between, within, eigvals_only=True)[::-1],
                                   rtol=1e-9, atol=1e-9)

    def test_singular_within_regularized(self):
        within = np.diag([1.0, 0.0, 2.0])
        lam, V, eps = generalized_eigh(np.eye(3), within)
        assert eps == pytest.approx(1e-6)

    def test_degenerate_within_names_dimension(self):
        within = np.diag([0.0, 0.0])
        with pytest.raises(np.linalg.LinAlgError, match="dimension 0"):
            generalized_eigh(np.eye(2), within)

    def test_unregularized_raises(self):
        with pytest.raises(np.linalg.LinAlgError):
            generalized_eigh(np.eye(2), np.diag([1.0, 0.0]), regularize=False)


class TestLdaFit:
    def sample(self, rng, n=4000):
        y = rng.integers(0, 2, n)
        X = rng.standard_normal((n, 2)) * [1.0, 2.0]
        X[:, 0] += np.where(y == 0, 1.0, -1.0)
        return X, y

    def test_sampled_two_class_direction(self):
        X, y = self.sample(make_rng(1))
        t = lda_fit(X, y)
        m0, m1 = X[y == 0].mean(0), X[y == 1].mean(0)
        Sw = sum(((X[y == c] - X[y == c].mean(0)).T @ (X[y == c] - X[y == c].mean(0))) for c in (0, 1)) / len(y)
        oracle = np.linalg.solve(Sw, m0 - m1)
        w = t.matrix[0]
        assert abs(w @ oracle) / (np.linalg.norm(w) * np.linalg.norm(oracle)) > 1 - 1e-9
        assert abs(w[0]) > 0.99 * np.linalg.norm(w)

    def test_equal_means_give_zero_eigenvalues(self):
        rng = make_rng(2)
        A, B = rng.standard_normal((2, 100, 3))
        X = np.vstack([A, -A, B, -B])
        y = np.repeat([0, 1], 200)
        assert np.abs(lda_fit(X, y).eigenvalues).max() < 1e-12

    def test_full_dimension_is_invertible(self):
        rng = make_rng(3)
        X = rng.standard_normal((600, 5))
        y = rng.integers(0, 4, 600)
        X += y[:, None] * rng.standard_normal(5)
        t = lda_fit(X, y)
        assert t.matrix.shape == (5, 5)
        assert abs(np.linalg.det(t.matrix)) > 1e-6

    def test_identity_transform_is_noop(self):
        X = make_rng(4).standard_normal((7, 3))
        t = LdaTransform(np.eye(3), np.zeros(3), None, None, None)
        assert np.array_equal(lda_apply(t, X), X)

    def test_apply_shape_error(self):
        t = LdaTransform(np.eye(3), np.zeros(3), None, None, None)
        with pytest.raises(ShapeError):
            lda_apply(t, np.ones((2, 4)))

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            lda_fit(np.ones((3, 2)), [0, 0, 0])


class TestTransformers:
    def test_pipeline_order(self):
        rng = make_rng(5)
        X = rng.standard_normal((90, 3)) + rng.standard_normal(3)
        y = rng.integers(0, 3, 90)
        X += y[:, None]
        lengths = [30, 60]
        pipe = FeaturePipeline(context=1).fit(X, y, lengths)
        Z = splice(mean_normalize(X, lengths), 1, lengths)
        expected = lda_apply(lda_fit(Z, y), Z)
        np.testing.assert_array_equal(pipe.transform(X, lengths), expected)
        assert pipe.n_features_out_ == 9

    def test_pipeline_without_lda(self):
        X = make_rng(6).standard_normal((10, 2))
        out = FeaturePipeline(context=2, use_lda=False).fit_transform(X)
        np.testing.assert_array_equal(out, splice(mean_normalize(X), 2))

    def test_pipeline_rejects_wrong_width(self):
        rng = make_rng(7)
        pipe = FeaturePipeline(0).fit(rng.standard_normal((20, 2)), np.arange(20) % 2)
        with pytest.raises(ShapeError):
            pipe.transform(np.ones((3, 3)))

    def test_sklearn_params(self):
        assert FeaturePipeline(context=3).get_params() == {"context": 3, "use_lda": True}
        assert Splicer(2).get_params() == {"context": 2}
        assert LDA().get_params() == {"n_components": None}

    def test_lda_estimator(self):
        rng = make_rng(8)
        X = rng.standard_normal((100, 4))
        y = rng.integers(0, 2, 100)
        assert LDA(n_components=2).fit_transform(X, y).shape == (100, 2)
        assert MeanNormalizer().fit_transform(X).shape == (100, 4)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            mean_normalize(np.array([[np.nan, 1.0]]))
