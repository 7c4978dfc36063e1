import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from egorse import gp
from egorse.gp import Doe, GpConfig, GpHyperparams

from oracles import central_difference, dense_lml, dense_predict


def random_model(seed, n=5, dim=2):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (n, dim))
    y = np.sin(3 * X[:, 0]) + X[:, -1] ** 2 + 0.1 * rng.standard_normal(n)
    return gp.fit_gp(Doe(X, y), GpConfig(n_starts=3), rng)


class TestDoe:
    def test_rejects_duplicates(self):
        with pytest.raises(gp.DuplicatePointError):
            Doe([[0.0, 0.0], [0.0, 0.0]], [1.0, 2.0])

    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError):
            Doe([[0.0], [1.0]], [1.0])

    def test_append_and_read_only(self):
        d = Doe([[0.0], [1.0]], [1.0, 2.0]).append([0.5], 3.0)
        assert len(d) == 3 and d.y_min == 1.0
        with pytest.raises(ValueError):
            d.points[0, 0] = 5.0
        with pytest.raises(gp.DuplicatePointError):
            d.append([0.5], 0.0)


class TestLikelihood:
    def test_single_point_zero_residual(self):
        hp = GpHyperparams(np.array([1.0]), 1.0, 1e-14, mean=2.0)
        val = gp.log_marginal_likelihood(hp, Doe([[0.3]], [2.0]))
        assert val == pytest.approx(-0.9189385332046727, abs=1e-10)

    def test_two_distant_points(self):
        hp = GpHyperparams(np.array([0.01]), 1.0, 0.0, mean=0.0)
        val = gp.log_marginal_likelihood(hp, Doe([[0.0], [1.0]], [1.0, 1.0]))
        assert val == pytest.approx(-2.8378770664093453, abs=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_dense_inverse(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.uniform(-1, 1, (8, 3))
        y = rng.standard_normal(8)
        ls = rng.uniform(0.3, 2.0, 3)
        for mean in (None, 0.4):
            hp = GpHyperparams(ls, 1.7, 1e-6, mean)
            got = gp.log_marginal_likelihood(hp, Doe(X, y))
            assert got == pytest.approx(dense_lml(X, y, ls, 1.7, 1e-6, mean), abs=1e-8)


class TestFit:
    def test_constant_outputs(self):
        m = gp.fit_gp(Doe([[0.0], [1.0]], [0.0, 0.0]))
        for u in np.linspace(-3, 3, 13):
            assert abs(gp.predict(m, [u])[0]) < 1e-6

    def test_sine_leave_one_out(self):
        X = np.linspace(-1, 1, 12)[:, None]
        y = np.sin(6 * X[:, 0])
        errs = []
        for i in range(12):
            keep = np.arange(12) != i
            m = gp.fit_gp(Doe(X[keep], y[keep]), rng=np.random.default_rng(i))
            errs.append(abs(gp.predict(m, X[i])[0] - y[i]))
        assert np.mean(errs) < 0.05

    def test_beats_true_hyperparameters(self):
        rng = np.random.default_rng(11)
        X = rng.uniform(-1, 1, (10, 1))
        K = np.exp(-0.5 * ((X - X.T) / 0.4) ** 2) + 1e-10 * np.eye(10)
        y = np.linalg.cholesky(K) @ rng.standard_normal(10)
        m = gp.fit_gp(Doe(X, y), rng=rng)
        doe = Doe(X, y)
        truth = gp.log_marginal_likelihood(GpHyperparams(np.array([0.4]), 1.0, 1e-8), doe)
        fitted = gp.log_marginal_likelihood(m.hyperparams, doe)
        assert fitted >= truth - 1e-6

    def test_never_worse_than_starts(self):
        m = random_model(3, n=12)
        assert m.fit_info["lml"] >= max(m.fit_info["start_lml"]) - 1e-12

    def test_deterministic(self):
        a, b = random_model(5), random_model(5)
        assert np.array_equal(a.lengthscales, b.lengthscales)
        assert np.array_equal(a.chol_factor, b.chol_factor)
        assert a.kernel_variance == b.kernel_variance

    def test_chol_diagonal_positive(self):
        assert np.all(np.diag(random_model(1).chol_factor) > 0)


class TestPredict:
    def test_interpolates_training_points(self):
        for seed in range(5):
            m = random_model(seed, n=15)
            mean, std = gp.predict_many(m, m.training_doe.points)
            tol = 10 * np.sqrt(m.nugget * m.kernel_variance)
            assert np.all(np.abs(mean - m.training_doe.outputs) <= tol)
            assert np.all(std <= 10 * np.sqrt(m.nugget))

    def test_far_field(self):
        m = random_model(2)
        far = 25 * np.max(m.lengthscales) * np.ones(2)
        mean, std = gp.predict(m, far)
        assert mean == pytest.approx(m.prior_mean_value, abs=1e-6)
        assert std == pytest.approx(np.sqrt(m.kernel_variance), abs=1e-6)

    def test_three_point_dense_oracle(self):
        X = np.array([[-0.5], [0.1], [0.8]])
        y = np.array([1.0, -0.3, 0.6])
        hp = GpHyperparams(np.array([0.45]), 2.0, 1e-8, mean=0.2)
        m = gp.model_from_hyperparams(Doe(X, y), hp)
        for u in (-1.0, 0.0, 0.33, 1.5):
            want = dense_predict(X, y, 0.45, 2.0, 1e-8, 0.2, np.array([u]))
            got = gp.predict(m, [u])
            assert got[0] == pytest.approx(want[0], abs=1e-10)
            assert got[1] == pytest.approx(want[1], abs=1e-10)

    def test_std_non_negative(self):
        rng = np.random.default_rng(0)
        for seed in range(3):
            m = random_model(seed)
            _, std = gp.predict_many(m, rng.uniform(-2, 2, (10_000, 2)))
            assert np.all(std >= 0)

    def test_wrong_dimension(self):
        with pytest.raises(ValueError):
            gp.predict(random_model(0), [0.0, 0.0, 0.0])


class TestGradient:
    def test_symmetric_midpoint(self):
        hp = GpHyperparams(np.array([0.7]), 1.3, 1e-8, mean=0.0)
        m = gp.model_from_hyperparams(Doe([[-0.5], [0.5]], [1.0, 1.0]), hp)
        assert abs(gp.predict_gradient(m, [0.0]).grad_mean[0]) < 1e-10
        m = gp.fit_gp(Doe([[-0.5], [0.5]], [1.0, 1.0]))
        assert abs(gp.predict_gradient(m, [0.0]).grad_mean[0]) < 1e-10

    def test_constant_doe(self):
        m = gp.fit_gp(Doe([[0.0, 0.0], [1.0, 0.5], [0.2, 0.9]], [2.0, 2.0, 2.0]))
        for u in ([0.3, 0.3], [-1.0, 2.0]):
            assert np.allclose(gp.predict_gradient(m, u).grad_mean, 0.0, atol=1e-10)

    @pytest.mark.parametrize("seed", range(4))
    def test_finite_differences(self, seed):
        m = random_model(seed)
        rng = np.random.default_rng(100 + seed)
        for u in rng.uniform(-1, 1, (10, 2)):
            pg = gp.predict_gradient(m, u)
            fd_m = central_difference(lambda z: gp.predict(m, z)[0], u)
            fd_s = central_difference(lambda z: gp.predict(m, z)[1], u)
            assert np.allclose(pg.grad_mean, fd_m, rtol=1e-4, atol=1e-6)
            assert np.allclose(pg.grad_std, fd_s, rtol=1e-4, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 8), st.integers(1, 3))
def test_property_interpolation_and_variance(seed, n, dim):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (n, dim))
    y = rng.standard_normal(n)
    m = gp.fit_gp(Doe(X, y), GpConfig(n_starts=2), rng)
    mean, std = gp.predict_many(m, X)
    assert np.all(np.abs(mean - y) <= 10 * np.sqrt(m.nugget * m.kernel_variance) + 1e-12)
    _, std = gp.predict_many(m, rng.uniform(-3, 3, (200, dim)))
    assert np.all(std >= 0) and np.all(np.isfinite(std))
