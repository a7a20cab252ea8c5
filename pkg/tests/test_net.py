import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odfkit.errors import NonFiniteLossError
from odfkit.geometry import PointCloud, build_knn_index, normalize_to_unit_sphere
from odfkit.net.edges import (edge_features, ri_edge_channels, ri_edge_features,
                              ri_point_channels, safe_angle)
from odfkit.net.layers import Layer, Mlp, init_mlp
from odfkit.net.model import (NetConfig, build_input, cross_entropy, forward, init_net,
                              loss_and_grads, odf_block_forward, point_features, prepare_input,
                              same_signature, signature)

from conftest import random_cloud, tiny_bank, tiny_config
from test_geometry import random_rotation


def relu(x):
    return np.maximum(x, 0.0)


def mlp_ref(mlp, x):
    """Layer-by-layer evaluation written independently of Mlp.forward."""
    for layer in mlp.layers:
        x = x @ layer.weight + layer.bias
        if layer.activation == "relu":
            x = relu(x)
    return x


def logits_ref(net, cloud, odf):
    """Straight-line classifier: explicit edge tensors, per-point loops."""
    cfg = net.config
    n = len(cloud)
    index = build_knn_index(cloud)
    o = np.zeros((n, cfg.glob_width))
    for i in range(n):
        per_dir = np.stack([mlp_ref(net.odf_block.odf_dir, odf[i, l])
                            for l in range(odf.shape[1])])
        agg = per_dir.max(axis=0) if cfg.aggregation == "max" else per_dir.ravel()
        o[i] = mlp_ref(net.odf_block.odf_glob, agg)
    if cfg.mode == "standard":
        f = np.concatenate([o, cloud.points], axis=1)
        pool_extra = np.zeros((n, 0))
    else:
        f = o
        _, pool_extra, _ = ri_edge_features(cloud, o, index, cfg.k)
    hs = []
    for block in net.edge_blocks:
        if cfg.mode == "standard":
            e = edge_features(cloud, f, index, cfg.k)
        else:
            e, _, _ = ri_edge_features(cloud, f, index, cfg.k)
        f = np.stack([mlp_ref(block, e[i]).max(axis=0) for i in range(n)])
        hs.append(f)
    feats = np.concatenate([o] + hs + [pool_extra], axis=1)
    return mlp_ref(net.head, feats.max(axis=0))


def make_input(cloud, cfg, bank=None):
    return prepare_input(cloud, cfg, bank or tiny_bank(),
                         alignment="ri_xyz" if cfg.mode == "xyz" else "none")


class TestLayers:
    def test_chain_check(self):
        with pytest.raises(ValueError):
            Mlp([Layer(np.zeros((2, 3)), np.zeros(3)), Layer(np.zeros((4, 1)), np.zeros(1))])

    def test_layer_validation(self):
        with pytest.raises(ValueError):
            Layer(np.zeros((2, 3)), np.zeros(2))
        with pytest.raises(ValueError):
            Layer(np.zeros((2, 3)), np.zeros(3), "tanh")
        with pytest.raises(ValueError):
            Layer(np.full((2, 3), np.inf), np.zeros(3))

    def test_forward_matches_reference(self):
        mlp = init_mlp(np.random.default_rng(0), (5, 7, 3), "identity", 0.1)
        x = np.random.default_rng(1).normal(size=(11, 5))
        np.testing.assert_allclose(mlp.forward(x)[0], mlp_ref(mlp, x), rtol=1e-14)


class TestOdfBlock:
    def test_zero_input_zero_bias(self):
        params = init_net(NetConfig(), 0).odf_block
        out = odf_block_forward(params, np.zeros((42, 8)))
        np.testing.assert_array_equal(out, 0.0)

    def test_direction_permutation_invariant(self):
        params = init_net(NetConfig(), 1, bias_scale=0.1).odf_block
        x = np.random.default_rng(2).uniform(size=(42, 8))
        perm = np.random.default_rng(3).permutation(42)
        np.testing.assert_array_equal(odf_block_forward(params, x),
                                      odf_block_forward(params, x[perm]))

    def test_seed17_matches_straight_line(self):
        params = init_net(NetConfig(), 17, bias_scale=0.1).odf_block
        x = np.random.default_rng(17).uniform(size=(5, 42, 8))
        got = odf_block_forward(params, x)
        for i in range(5):
            per_dir = np.stack([mlp_ref(params.odf_dir, x[i, l]) for l in range(42)])
            ref = mlp_ref(params.odf_glob, per_dir.max(axis=0))
            np.testing.assert_allclose(got[i], ref, rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        params = init_net(NetConfig(), 0).odf_block
        with pytest.raises(ValueError):
            odf_block_forward(params, np.zeros((42, 7)))


class TestEdges:
    def test_identical_features(self):
        cloud = random_cloud(0, 40)
        feats = np.ones((40, 4))
        e = edge_features(cloud, feats, build_knn_index(cloud), 8)
        assert e.shape == (40, 8, 11)
        np.testing.assert_array_equal(e[..., :8], 1.0)
        np.testing.assert_allclose(np.linalg.norm(e[..., 8:], axis=-1) > 0, True)

    def test_translation_leaves_differences(self):
        cloud = random_cloud(1, 40)
        moved = cloud.with_points(cloud.points + np.array([3.0, -1.0, 0.5]))
        a = edge_features(cloud, np.zeros((40, 2)), build_knn_index(cloud), 8)
        b = edge_features(moved, np.zeros((40, 2)), build_knn_index(moved), 8)
        np.testing.assert_allclose(a[..., 4:], b[..., 4:], atol=1e-12)

    def test_k_too_large(self):
        cloud = random_cloud(1, 10)
        with pytest.raises(ValueError):
            edge_features(cloud, np.zeros((10, 2)), build_knn_index(cloud), 10)

    def test_seed19_block_matches_naive_loop(self):
        cloud = random_cloud(19, 60)
        cfg = tiny_config(k=8)
        net = init_net(cfg, 19, bias_scale=0.1)
        inp = make_input(cloud, cfg)
        _, cache = forward(net, inp)
        f0 = cache["edges"][0][0]
        e = edge_features(cloud, f0, build_knn_index(cloud), cfg.k)
        ref = np.stack([mlp_ref(net.edge_blocks[0], e[i]).max(axis=0) for i in range(60)])
        np.testing.assert_allclose(cache["edges"][1][0], ref, atol=1e-12)

    def test_unit_sphere_distance(self):
        pts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, -1.0, 0]])
        ch, _ = ri_edge_channels(pts, np.array([[1], [0], [3], [2]]), center=np.zeros(3))
        np.testing.assert_allclose(ch[0, 0, :3], [2.0, 1.0, 1.0])
        assert ch[0, 0, 3] == pytest.approx(math.pi)

    def test_zero_vectors_give_zero_angle(self):
        ang, bad = safe_angle(np.zeros((2, 3)), np.ones((2, 3)))
        np.testing.assert_array_equal(ang, 0.0)
        assert bad.all()

    def test_rotation_sweep(self):
        worst = 0.0
        for seed in range(20):
            cloud = normalize_to_unit_sphere(random_cloud(seed, 64))
            rot = random_rotation(np.random.default_rng(seed + 100))
            moved = cloud.with_points(cloud.points @ rot.T)
            a = ri_edge_features(cloud, np.zeros((64, 1)), build_knn_index(cloud), 16)
            b = ri_edge_features(moved, np.zeros((64, 1)), build_knn_index(moved), 16)
            worst = max(worst, np.abs(a[0] - b[0]).max(), np.abs(a[1] - b[1]).max())
        assert worst < 1e-9

    def test_point_channels_shape(self):
        pts = random_cloud(3, 30).points
        ch, bad = ri_point_channels(pts, build_knn_index(PointCloud(pts)).query_all(5)[0])
        assert ch.shape == (30, 2) and bad.shape == (30,)


class TestClassifier:
    @pytest.mark.parametrize("mode", ["standard", "xyz"])
    def test_seed23_matches_straight_line(self, mode):
        cloud = normalize_to_unit_sphere(random_cloud(23, 50))
        cfg = tiny_config(mode)
        net = init_net(cfg, 23, bias_scale=0.1)
        inp = make_input(cloud, cfg)
        logits, _ = forward(net, inp)
        np.testing.assert_allclose(logits, logits_ref(net, cloud, inp.odf), rtol=0, atol=1e-10)

    def test_concat_aggregation_matches_straight_line(self):
        cloud = random_cloud(24, 40)
        bank = tiny_bank()
        base = tiny_config()
        cfg = NetConfig(**{**base.__dict__, "aggregation": "concat"})
        net = init_net(cfg, 24, bias_scale=0.1)
        inp = make_input(cloud, cfg, bank)
        np.testing.assert_allclose(forward(net, inp)[0], logits_ref(net, cloud, inp.odf),
                                   atol=1e-10)

    @pytest.mark.parametrize("mode", ["standard", "xyz"])
    def test_permutation_bitwise(self, mode):
        cloud = random_cloud(25, 70)
        cfg = tiny_config(mode)
        net = init_net(cfg, 25, bias_scale=0.1)
        perm = np.random.default_rng(25).permutation(70)
        a = forward(net, make_input(cloud, cfg))[0]
        b = forward(net, make_input(cloud.take(perm), cfg))[0]
        assert a.tobytes() == b.tobytes()

    def test_pooled_duplicates_do_not_change_logits(self):
        cloud = random_cloud(26, 50)
        cfg = tiny_config()
        net = init_net(cfg, 26, bias_scale=0.1)
        inp = make_input(cloud, cfg)
        ref = forward(net, inp)[0]
        doubled = np.concatenate([np.arange(50), np.arange(50)])
        assert forward(net, inp, keep=doubled)[0].tobytes() == ref.tobytes()

    def test_point_features_width(self):
        cfg = tiny_config("xyz")
        net = init_net(cfg, 0)
        feats = point_features(net, make_input(random_cloud(0, 40), cfg))
        assert feats.shape == (40, cfg.global_width) == (40, 6 + 6 + 8 + 2)

    def test_config_mismatch(self):
        cfg = tiny_config(k=6)
        net = init_net(NetConfig(**{**cfg.__dict__, "k": 5}), 0)
        with pytest.raises(ValueError):
            forward(net, make_input(random_cloud(0, 30), cfg))


class TestLoss:
    def test_uniform_logits(self):
        loss, prob = cross_entropy(np.zeros(5), 2)
        assert loss == pytest.approx(math.log(5), abs=1e-15)
        np.testing.assert_allclose(prob, 0.2)

    def test_large_margin(self):
        logits = np.zeros(4)
        logits[1] = 20.0
        assert cross_entropy(logits, 1)[0] < 1e-8

    def test_non_finite_loss_names_sample(self):
        cfg = tiny_config()
        net = init_net(cfg, 0)
        good = make_input(random_cloud(1, 30, label=0), cfg)
        bad = make_input(random_cloud(2, 30, label=1), cfg)
        net.head.layers[-1].bias[:] = [np.inf, 0.0, 0.0]
        with pytest.raises(NonFiniteLossError) as err:
            loss_and_grads(net, [bad, good])
        assert err.value.sample_ids == (0,)

    def test_bad_label(self):
        cfg = tiny_config()
        inp = make_input(random_cloud(1, 30, label=7), cfg)
        with pytest.raises(ValueError):
            loss_and_grads(init_net(cfg, 0), [inp])


def gradient_check(seed, mode, h=1e-5):
    """Largest relative error of analytic vs central-difference gradients.

    Coordinates whose perturbation flips a ReLU mask or an argmax are skipped:
    the loss has a kink there and the difference quotient is meaningless.
    """
    rng = np.random.default_rng(seed)
    cfg = tiny_config(mode)
    net = init_net(cfg, seed, bias_scale=0.1)
    batch = [make_input(normalize_to_unit_sphere(PointCloud(rng.normal(size=(40, 3)), label=s)),
                        cfg) for s in range(2)]
    keeps = [np.sort(rng.permutation(40)[:20]), None]
    _, grads = loss_and_grads(net, batch, keeps)
    base = [signature(forward(net, b, k)[1]) for b, k in zip(batch, keeps)]
    worst, checked, skipped = 0.0, 0, 0
    for name, arr in net.named_parameters():
        for ix in np.ndindex(arr.shape):
            old = arr[ix]
            arr[ix] = old + h
            lp = loss_and_grads(net, batch, keeps)[0]
            sp = [signature(forward(net, b, k)[1]) for b, k in zip(batch, keeps)]
            arr[ix] = old - h
            lm = loss_and_grads(net, batch, keeps)[0]
            sm = [signature(forward(net, b, k)[1]) for b, k in zip(batch, keeps)]
            arr[ix] = old
            if not all(same_signature(a, p) and same_signature(a, m)
                       for a, p, m in zip(base, sp, sm)):
                skipped += 1
                continue
            fd = (lp - lm) / (2 * h)
            an = grads[name][ix]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-4))
            checked += 1
    return worst, checked, skipped, net.n_parameters()


class TestGradients:
    @pytest.mark.parametrize("seed,mode", [(0, "standard"), (1, "xyz")])
    def test_finite_differences(self, seed, mode):
        worst, checked, skipped, n = gradient_check(seed, mode)
        assert n <= 2000
        assert checked >= 0.95 * n
        assert worst < 1e-5

    def test_gradient_keys_cover_parameters(self):
        cfg = tiny_config()
        net = init_net(cfg, 0)
        _, g = loss_and_grads(net, [make_input(random_cloud(0, 30, label=1), cfg)])
        for name, arr in net.named_parameters():
            assert g[name].shape == arr.shape

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_batch_gradient_is_mean(self, seed):
        cfg = tiny_config()
        net = init_net(cfg, seed % 1000, bias_scale=0.1)
        rng = np.random.default_rng(seed)
        batch = [make_input(PointCloud(rng.normal(size=(30, 3)), label=i % 3), cfg)
                 for i in range(3)]
        loss, g = loss_and_grads(net, batch)
        parts = [loss_and_grads(net, [b]) for b in batch]
        assert loss == pytest.approx(np.mean([p[0] for p in parts]), rel=1e-12)
        for name in g:
            np.testing.assert_allclose(g[name], sum(p[1][name] for p in parts) / 3, atol=1e-12)

    def test_signature_detects_changes(self):
        cfg = tiny_config()
        net = init_net(cfg, 0, bias_scale=0.1)
        inp = make_input(random_cloud(0, 30, label=0), cfg)
        a = signature(forward(net, inp)[1])
        net.head.layers[0].bias[:] += 100.0
        b = signature(forward(net, inp)[1])
        assert same_signature(a, a) and not same_signature(a, b)


def test_build_input_layout():
    pts = random_cloud(0, 20).points
    nbr = build_knn_index(PointCloud(pts)).query_all(4)[0]
    inp = build_input(pts, np.zeros((20, 12, 4), dtype=np.float32), nbr, "xyz", 1)
    assert inp.odf.dtype == np.float32 and inp.geometry.shape == (20, 4, 5)
    assert inp.pool_extra.shape == (20, 2) and inp.point_extra.shape == (20, 0)
