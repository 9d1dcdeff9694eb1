import csv
import io
import json

import numpy as np
import pytest

from w2bary import distributions as dist
from w2bary import metrics
from w2bary.groundtruth import GaussianMoments as GM
from w2bary.groundtruth import LinearMap, fixed_point_barycenter
from w2bary.solver import identity_model


def shifted(T, c):
    return lambda x: T(x) + c


class TestL2UVP:
    def test_true_map_is_zero(self):
        T = LinearMap(np.diag([1.0, 0.5]), np.zeros(2))
        s = dist.StandardGaussian(2)
        assert metrics.l2_uvp(T, T, s, 2.0, 1000, np.random.default_rng(0)) == 0.0

    def test_constant_shift(self):
        T = LinearMap(np.eye(2), np.zeros(2))
        c = np.array([0.3, -0.4])
        uvp = metrics.l2_uvp(shifted(T, c), T, dist.StandardGaussian(2), 5.0, 1000, np.random.default_rng(0))
        assert uvp == pytest.approx(100 * 0.25 / 5.0, rel=1e-12)

    def test_identity_vs_diagonal_map(self):
        P = GM([0, 0], np.diag([1.0, 4.0]))
        bar = fixed_point_barycenter([P], [1.0])
        T = LinearMap(np.diag([1.0, 0.5]), np.zeros(2))
        var = metrics.variance_of(bar)
        uvp = metrics.l2_uvp(lambda x: x, T, dist.GaussianSampler(P.mean, P.cov), var, 200_000, np.random.default_rng(1))
        expected = 100 * 0.25 * 4 / var
        assert uvp == pytest.approx(expected, rel=0.02)

    def test_row_permutation_invariant(self):
        T = LinearMap(np.diag([1.0, 0.5]), np.zeros(2))
        x = np.random.default_rng(0).standard_normal((1000, 2))
        perm = np.random.default_rng(1).permutation(1000)
        a = metrics.l2_uvp(lambda z: z, T, None, 3.0, x=x)
        b = metrics.l2_uvp(lambda z: z, T, None, 3.0, x=x[perm])
        assert a == pytest.approx(b, rel=1e-12)

    def test_deviation_scaling(self):
        T = LinearMap(np.diag([1.0, 0.5]), np.zeros(2))
        E = np.array([[0.1, 0.2], [0.0, -0.1]])
        x = np.random.default_rng(0).standard_normal((2000, 2))
        base = metrics.l2_uvp(lambda z: T(z) + z @ E.T, T, None, 2.0, x=x)
        for s in (2.0, 3.5):
            scaled = metrics.l2_uvp(lambda z: T(z) + s * z @ E.T, T, None, 2.0, x=x)
            assert scaled == pytest.approx(s * s * base, rel=1e-8)

    def test_too_few_samples(self):
        T = LinearMap(np.eye(2), np.zeros(2))
        with pytest.raises(ValueError):
            metrics.l2_uvp(T, T, dist.StandardGaussian(2), 1.0, k=10)


class TestBW2UVP:
    def test_truth_is_zero(self):
        P = GM([1.0, 2.0], [[2.0, 0.3], [0.3, 1.0]])
        assert metrics.bw2_uvp(P, P) == pytest.approx(0.0, abs=1e-10)

    def test_scaled_identity(self):
        assert metrics.bw2_uvp(GM([0, 0], np.eye(2)), GM([0, 0], 4 * np.eye(2)), 8.0) == pytest.approx(25.0, abs=1e-10)

    def test_dirac_baseline_is_hundred(self):
        bar = GM([1.0, -1.0], [[2.0, 0.5], [0.5, 1.0]])
        dirac = GM(bar.mean, np.zeros((2, 2)))
        assert metrics.bw2_uvp(dirac, bar) == pytest.approx(100.0, abs=1e-8)

    def test_symmetric(self):
        rng = np.random.default_rng(0)
        G = rng.standard_normal((3, 3))
        P, Q = GM(rng.standard_normal(3), G @ G.T + np.eye(3)), GM(np.zeros(3), np.eye(3))
        assert metrics.bw2_uvp(P, Q, 3.0) == pytest.approx(metrics.bw2_uvp(Q, P, 3.0), rel=1e-8)

    def test_from_samples(self):
        x = np.random.default_rng(0).standard_normal((100_000, 2))
        assert metrics.bw2_uvp(x, GM([0, 0], np.eye(2))) < 0.1

    def test_needs_enough_samples(self):
        with pytest.raises(ValueError):
            metrics.bw2_uvp(np.zeros((10, 2)), GM([0, 0], np.eye(2)))


class TestVariance:
    def test_values(self):
        assert metrics.variance_of(GM(np.zeros(3), np.eye(3))) == 3.0
        assert metrics.variance_of(GM([0, 0], np.diag([2.25, 2.25]))) == 4.5

    def test_rotation_invariant(self):
        C = np.diag([1.0, 2.0, 3.0])
        Q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((3, 3)))
        assert metrics.variance_of(GM(np.zeros(3), Q @ C @ Q.T)) == pytest.approx(6.0, rel=1e-12)


class TestSanityMetrics:
    def test_congruence_identity(self):
        model = identity_model(2, [0.3, 0.7])
        y = np.random.default_rng(0).standard_normal((1000, 2))
        assert metrics.congruence_metric(model, y, 2.0) == pytest.approx(0.0, abs=1e-20)

    def test_congruence_shift(self):
        model = identity_model(2, [0.3, 0.7])
        c = np.array([0.2, 0.1])
        for net in model.conjugates:
            net.params["v_out"][:, 0] = c
        y = np.random.default_rng(0).standard_normal((1000, 2))
        assert metrics.congruence_metric(model, y, 2.0) == pytest.approx(100 * 0.05 / 2.0, rel=1e-10)

    def test_cycle_exact_pair(self):
        model = identity_model(3, [1.0])
        model.samplers = [dist.StandardGaussian(3)]
        assert metrics.cycle_metric(model, 0, 10_000) == pytest.approx(0.0, abs=1e-20)

    def test_cycle_doubled(self):
        model = identity_model(3, [1.0])
        model.samplers = [dist.StandardGaussian(3)]
        model.conjugates[0].params["U_out"][...] *= np.sqrt(2.0)
        assert metrics.cycle_metric(model, 0, 100_000, np.random.default_rng(0)) == pytest.approx(100.0, rel=0.03)

    def test_monte_carlo_stability(self):
        model = identity_model(2, [1.0])
        model.samplers = [dist.StandardGaussian(2)]
        model.conjugates[0].params["U_out"][...] *= 1.2
        a = metrics.cycle_metric(model, 0, 100_000, np.random.default_rng(1))
        b = metrics.cycle_metric(model, 0, 100_000, np.random.default_rng(2))
        assert abs(a - b) / a < 0.05


class TestReport:
    def make(self):
        return metrics.MetricReport(
            weights=[0.1, 0.2, 0.3, 0.4],
            l2_uvp=[1.0, 2.0, 3.0, 4.0],
            bw2_uvp=[0.5, 0.6, 0.7, 0.8],
            bw2_uvp_pooled=0.55,
            congruence=0.3,
            cycle=[0.1, 0.2, 0.3, 0.4],
            samples=100_000,
        )

    def test_weighted_average(self):
        assert self.make().l2_uvp_weighted == pytest.approx(3.0, abs=1e-10)

    def test_csv_schema(self):
        rows = list(csv.reader(io.StringIO(self.make().to_csv())))
        assert tuple(rows[0]) == metrics.REPORT_COLUMNS
        assert len(rows) == 1 + 4 + 1
        assert rows[-1][0] == "summary"
        assert float(rows[-1][2]) == pytest.approx(3.0)

    def test_json(self):
        doc = json.loads(self.make().to_json())
        assert doc["l2_uvp_weighted"] == pytest.approx(3.0)
        assert doc["samples"] == 100_000
