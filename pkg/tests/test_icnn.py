import numpy as np
import pytest

from w2bary import autodiff as ad
from w2bary.icnn import (
    DenseICNNConfig,
    PotentialNetwork,
    convexity_probe,
    layer_shapes,
    param_count,
    pretrain,
    project_convex,
)


def hand_count(D, hidden, r):
    # per layer: U (h*r x D), W (h x D), b (h), A (h x prev) from the second layer on
    total, prev = 0, None
    for h in hidden:
        total += h * r * D + h * D + h + (h * prev if prev else 0)
        prev = h
    # output: w_out, U_out (r x D), v_out (D), c_out
    return total + prev + r * D + D + 1


class TestConfig:
    @pytest.mark.parametrize("D,hidden,r", [(2, (64, 64, 32), 2), (3, (8, 8, 4), 2), (1, (5,), 1)])
    def test_param_count(self, D, hidden, r):
        cfg = DenseICNNConfig(D, hidden, r)
        assert param_count(cfg) == hand_count(D, hidden, r)
        assert PotentialNetwork.init(cfg, 0).params.size == param_count(cfg)

    def test_desk_sizes(self):
        assert DenseICNNConfig.for_dim(8, 0.5).hidden_sizes == (32, 32, 16)
        assert DenseICNNConfig.for_dim(64).hidden_sizes == (128, 128, 64)

    def test_invalid(self):
        with pytest.raises(ValueError):
            DenseICNNConfig(0, (4,), 2)
        with pytest.raises(ValueError):
            DenseICNNConfig(2, (), 2)

    def test_nonnegative_flags(self):
        flagged = {name for name, _, nn in layer_shapes(DenseICNNConfig(2, (4, 4, 2), 2)) if nn}
        assert flagged == {"A1", "A2", "w_out"}


class TestInit:
    def test_same_seed_identical(self):
        cfg = DenseICNNConfig(2, (6, 4), 2)
        a, b = PotentialNetwork.init(cfg, 3), PotentialNetwork.init(cfg, 3)
        np.testing.assert_array_equal(a.params.values, b.params.values)

    def test_seeds_differ(self):
        cfg = DenseICNNConfig(2, (6, 4), 2)
        assert not np.array_equal(PotentialNetwork.init(cfg, 0).params.values, PotentialNetwork.init(cfg, 1).params.values)

    def test_starts_projected(self):
        assert PotentialNetwork.init(DenseICNNConfig(3, (6, 4), 2), 0).is_projected()


class TestEvaluation:
    def test_finite_at_origin(self):
        net = PotentialNetwork.init(DenseICNNConfig(4, (6, 4), 2), 0)
        assert np.isfinite(net(np.zeros((1, 4)))).all()

    def test_forward_delegates(self):
        net = PotentialNetwork.init(DenseICNNConfig(2, (6, 4), 2), 0)
        x = np.random.default_rng(0).standard_normal((5, 2))
        np.testing.assert_array_equal(net.forward(x), ad.eval_scalar(net, net.params, x))

    def test_push_monotone_in_1d(self):
        for seed in range(5):
            net = PotentialNetwork.init(DenseICNNConfig(1, (8, 8), 1), seed)
            x = np.sort(np.random.default_rng(seed).uniform(-5, 5, 500))[:, None]
            assert np.all(np.diff(net.push(x)[:, 0]) >= -1e-12)


class TestProjection:
    def test_clamps_only_flagged(self):
        net = PotentialNetwork.init(DenseICNNConfig(1, (3, 3), 1), 0)
        net.params["A1"][0, :] = [-1.0, 0.5, 0.0]
        net.params["W0"][:2, 0] = [-1.0, 0.5]
        project_convex(net)
        np.testing.assert_array_equal(net.params["A1"][0], [0.0, 0.5, 0.0])
        np.testing.assert_array_equal(net.params["W0"][:2, 0], [-1.0, 0.5])

    def test_idempotent(self):
        net = PotentialNetwork.init(DenseICNNConfig(2, (4, 4), 2), 0)
        net.params.values[:] = np.random.default_rng(0).standard_normal(net.params.size)
        project_convex(net)
        once = net.params.values.copy()
        project_convex(net)
        np.testing.assert_array_equal(net.params.values, once)


class TestConvexityProbe:
    @pytest.mark.parametrize("seed", range(5))
    def test_projected_nets_are_convex(self, seed):
        net = PotentialNetwork.init(DenseICNNConfig(3, (8, 8, 4), 2), seed)
        net.params.values[:] = np.random.default_rng(seed).standard_normal(net.params.size)
        project_convex(net)
        assert convexity_probe(net, 10_000, seed) >= -1e-9

    def test_negated_hidden_weights_break_convexity(self):
        net = PotentialNetwork.init(DenseICNNConfig(2, (8, 8), 2), 0)
        net.params["A1"][...] = -np.abs(net.params["A1"]) - 1.0
        net.params["w_out"][...] = 1.0
        net.params["U_out"][...] = 0.0
        net.params["U0"][...] = 0.0
        net.params["U1"][...] = 0.0
        assert convexity_probe(net, 100_000, 0) < 0

    def test_exact_quadratic_gaps(self):
        net = ad.QuadraticNet(2)
        p = net.new_params(1.0)
        rng = np.random.default_rng(0)
        x, y = 2 * rng.standard_normal((100, 2)), 2 * rng.standard_normal((100, 2))

        def f(z):
            return ad.eval_scalar(net, p, z)

        gap = 0.5 * f(x) + 0.5 * f(y) - f(0.5 * (x + y))
        np.testing.assert_allclose(gap, np.sum((x - y) ** 2, axis=1) / 8, rtol=1e-12)


@pytest.fixture(scope="module")
def pretrained():
    cfg = DenseICNNConfig.for_dim(2, 0.5)
    nets = [PotentialNetwork.init(cfg, s) for s in (0, 1)]
    losses = [pretrain(net, 2000, 1e-3, 256, seed=s) for s, net in enumerate(nets)]
    return nets, losses


class TestPretrain:
    def test_final_loss(self, pretrained):
        _, losses = pretrained
        assert max(losses) < 1e-2

    def test_value_at_ones(self, pretrained):
        nets, _ = pretrained
        assert nets[0](np.array([[1.0, 1.0]]))[0] == pytest.approx(1.0, abs=0.05)

    def test_push_near_identity(self, pretrained):
        nets, _ = pretrained
        x = np.random.default_rng(5).standard_normal((10_000, 2))
        err = np.sum((nets[0].push(x) - x) ** 2, axis=1).mean() / 2
        assert err < 0.05

    def test_cycle_between_independent_nets(self, pretrained):
        (f, g), _ = pretrained
        x = np.random.default_rng(6).standard_normal((10_000, 2))
        assert np.sum((g.push(f.push(x)) - x) ** 2, axis=1).mean() < 0.05 * 2

    def test_stays_projected(self, pretrained):
        nets, _ = pretrained
        assert all(n.is_projected() for n in nets)

    def test_zero_iterations(self):
        net = PotentialNetwork.init(DenseICNNConfig(2, (4, 4), 2), 0)
        before = net.params.values.copy()
        loss = pretrain(net, 0)
        np.testing.assert_array_equal(net.params.values, before)
        assert loss > 0 and np.isfinite(loss)

    def test_divergence_reports_iteration(self):
        net = PotentialNetwork.init(DenseICNNConfig(2, (4, 4), 2), 0)
        net.params["c_out"][...] = np.nan
        with pytest.raises(ad.NonFiniteError) as info:
            pretrain(net, 5)
        assert info.value.index == 0


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path):
        net = PotentialNetwork.init(DenseICNNConfig(3, (6, 5), 2), 7)
        net.params.values[:] += np.random.default_rng(0).standard_normal(net.params.size) * 1e-3
        path = tmp_path / "net.json"
        net.save(path)
        back = PotentialNetwork.load(path)
        assert back.config == net.config
        assert back.params.values.tobytes() == net.params.values.tobytes()
        np.testing.assert_array_equal(back.params.nonnegative_mask(), net.params.nonnegative_mask())

    def test_rejects_unknown_version(self, tmp_path):
        doc = PotentialNetwork.init(DenseICNNConfig(2, (3,), 1), 0).to_dict()
        doc["format_version"] = 99
        with pytest.raises(ValueError):
            PotentialNetwork.from_dict(doc)
