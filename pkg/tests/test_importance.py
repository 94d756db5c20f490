import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adds import importance, nn
from helpers import brute_force_lrp, random_batch, random_binary_mask, random_net


class TestSlim:
    def test_absolute_value(self):
        net = nn.init_network([2, 3, 2], np.random.default_rng(0))
        net.layers[0].bn_gamma[:] = [0.5, -0.2, 0.0]
        np.testing.assert_array_equal(importance.slim_importance(net)[0], [0.5, 0.2, 0.0])

    def test_homogeneous(self):
        net = random_net([2, 5, 2], np.random.default_rng(1))
        before = importance.slim_importance(net)[0]
        net.layers[0].bn_gamma *= 2
        np.testing.assert_allclose(importance.slim_importance(net)[0], 2 * before)

    def test_fresh_network_is_flat(self):
        net = nn.init_network([2, 6, 4, 2], np.random.default_rng(0))
        for b in importance.slim_importance(net):
            assert np.all(b == b[0])


class TestLRP:
    @pytest.mark.parametrize("seed", range(5))
    def test_conservation_per_layer_pair(self, seed):
        rng = np.random.default_rng(seed)
        net = random_net([4, 9, 7, 3], rng)
        batch = random_batch(10, 4, 3, rng)
        rel = importance.lrp_relevance(net, random_binary_mask(net, rng, 0.7), batch)
        checked = 0
        for l in range(len(rel.layers) - 1):
            lower, upper = rel.layers[l].sum(axis=1), rel.layers[l + 1].sum(axis=1)
            clean = rel.lost[l] == 0
            np.testing.assert_allclose(lower[clean], upper[clean], rtol=1e-9, atol=0)
            np.testing.assert_allclose(lower + rel.lost[l], upper, rtol=1e-9, atol=1e-15)
            checked += clean.sum()
        assert checked > 0

    def test_conservation_without_drops(self):
        rng = np.random.default_rng(12)
        net = random_net([4, 9, 7, 3], rng)
        for layer in net.layers:
            # positive inputs, weights and an identity BN make every contribution positive
            layer.weights[:] = np.abs(layer.weights)
            layer.bias[:] = 0
            if layer.has_norm:
                layer.bn_gamma[:], layer.bn_beta[:] = 1, 0
                layer.bn_running_mean[:], layer.bn_running_var[:] = 0, 1
        batch = nn.Batch(rng.uniform(0.1, 1, size=(10, 4)), rng.integers(0, 3, 10))
        rel = importance.lrp_relevance(net, nn.full_mask(net), batch, mode="eval")
        assert rel.dropped_columns == 0
        totals = np.array([r.sum(axis=1) for r in rel.layers])
        np.testing.assert_allclose(totals, np.broadcast_to(totals[-1], totals.shape), rtol=1e-9, atol=0)

    def test_input_relevance_never_exceeds_output(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            net = random_net([3, 5, 3], rng)
            rel = importance.lrp_relevance(net, nn.full_mask(net), random_batch(8, 3, 3, rng))
            assert np.all(rel.layers[0].sum(axis=1) <= rel.layers[-1].sum(axis=1) + 1e-12)
            np.testing.assert_allclose(
                rel.layers[0].sum(axis=1) + rel.dropped_mass, rel.layers[-1].sum(axis=1), rtol=1e-9
            )

    def test_drop_is_counted(self):
        net = nn.init_network([1, 1, 2], np.random.default_rng(0))
        net.layers[0].weights[:] = -1.0  # input contributes nothing positive
        net.layers[0].bn_beta[:] = 1.0
        net.layers[0].bn_gamma[:] = 0.0
        net.layers[1].weights[:] = 1.0
        rel = importance.lrp_relevance(net, nn.full_mask(net), nn.Batch([[1.0]], [0]))
        assert rel.dropped_columns == 1
        assert rel.layers[0].sum() == 0

    def test_single_path(self):
        net = nn.init_network([1, 1, 1], np.random.default_rng(0))
        net.layers[0].weights[:] = 2.0
        net.layers[0].bn_running_mean[:] = 0.0
        net.layers[0].bn_running_var[:] = 1.0
        net.layers[1].weights[:] = 1.5
        batch = nn.Batch([[0.7]], [0])
        rel = importance.lrp_relevance(net, nn.full_mask(net), batch, mode="eval")
        assert rel.layers[-1][0, 0] == 1.0  # one class: probability 1
        assert rel.layers[1][0, 0] == pytest.approx(1.0, abs=1e-15)
        assert rel.layers[0][0, 0] == pytest.approx(1.0, abs=1e-15)
        assert importance.lrp_importance(net, nn.full_mask(net), batch, mode="eval")[0][0] == pytest.approx(1.0)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(50 + seed)
        net = random_net([4, 6, 3], rng)
        mask = random_binary_mask(net, rng, 0.8)
        batch = random_batch(5, 4, 3, rng)
        fast = importance.lrp_relevance(net, mask, batch)
        slow = brute_force_lrp(net, mask, batch)
        for layer_idx, r in enumerate(fast.layers):
            expected = np.array([slow[s][layer_idx] for s in range(len(batch))])
            np.testing.assert_allclose(r, expected, rtol=0, atol=1e-10)

    def test_masked_units_get_zero(self):
        rng = np.random.default_rng(8)
        net = random_net([4, 6, 5, 3], rng)
        mask = random_binary_mask(net, rng, 0.5)
        scores = importance.lrp_importance(net, mask, random_batch(6, 4, 3, rng))
        for s, m in zip(scores, mask):
            assert np.all(s[m == 0] == 0)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_order_invariant_and_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        net = random_net([3, 5, 4, 3], rng)
        batch = random_batch(9, 3, 3, rng)
        perm = rng.permutation(9)
        shuffled = nn.Batch(batch.inputs[perm], batch.labels[perm])
        a = importance.lrp_importance(net, nn.full_mask(net), batch)
        b = importance.lrp_importance(net, nn.full_mask(net), shuffled)
        for x, y in zip(a, b):
            np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-15)
            assert np.all(x >= 0) and np.all(np.isfinite(x))


class TestFCActivation:
    def test_dead_unit(self):
        net = random_net([3, 4, 2], np.random.default_rng(0))
        net.layers[0].bn_gamma[1] = 0.0
        net.layers[0].bn_beta[1] = -1.0
        b = importance.fc_activation_importance(net, nn.full_mask(net), random_batch(5, 3, 2, np.random.default_rng(1)))
        assert b[0][1] == 0

    def test_identical_rows(self):
        net = random_net([3, 4, 2], np.random.default_rng(2))
        row = np.random.default_rng(3).normal(size=(1, 3))
        many = importance.fc_activation_importance(net, nn.full_mask(net), np.repeat(row, 6, 0), mode="eval")
        one = importance.fc_activation_importance(net, nn.full_mask(net), row, mode="eval")
        np.testing.assert_allclose(many[0], one[0], rtol=1e-14)

    def test_matches_forward_cache(self):
        rng = np.random.default_rng(4)
        net = random_net([4, 6, 5, 3], rng)
        mask = random_binary_mask(net, rng, 0.6)
        batch = random_batch(11, 4, 3, rng)
        _, cache = nn.forward(net.copy(), mask, batch, mode="train", update_stats=False)
        scores = importance.fc_activation_importance(net, mask, batch)
        for k, s in enumerate(scores):
            expected = [np.mean([abs(cache.layers[k].out[i, c]) for i in range(11)]) for c in range(len(s))]
            np.testing.assert_allclose(s, expected, rtol=0, atol=1e-12)
            assert np.all(s[mask[k] == 0] == 0)


def test_normalize_to_unit_spread():
    out = importance.normalize([np.array([1.0, 3.0]), np.zeros(3), np.full(4, 2.5)])
    np.testing.assert_allclose(out[0], [1.0, 3.0])
    np.testing.assert_array_equal(out[1], np.ones(3))
    np.testing.assert_array_equal(out[2], np.ones(4))


@settings(max_examples=50)
@given(
    s=st.lists(st.floats(0, 100), min_size=2, max_size=20).filter(lambda v: np.std(v) > 1e-6),
    scale=st.floats(1e-3, 1e3),
)
def test_normalize_is_scale_free(s, scale):
    a = importance.normalize([np.array(s)])[0]
    b = importance.normalize([scale * np.array(s)])[0]
    assert np.std(a) == pytest.approx(1.0)
    np.testing.assert_allclose(a, b, rtol=1e-9)
    assert np.all(a >= 0)


def test_dispatch():
    rng = np.random.default_rng(0)
    net = random_net([3, 4, 2], rng)
    batch = random_batch(5, 3, 2, rng)
    for kind in ("slim", "lrp", "fc_activation"):
        scores = importance.compute_importance(kind, net, batch)
        assert len(scores) == 1 and scores[0].shape == (4,)
    with pytest.raises(ValueError):
        importance.compute_importance("gradient", net, batch)
