import numpy as np
import pytest

from gridpinn.neural import AdamW, EarlyStopping, Mlp, load_mlp, save_mlp


def finite_diff_grads(net, x, g_out, eps=1e-6):
    grads = []
    for p in net.parameters():
        gnum = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + eps
            lp = float(np.sum(net.forward(x) * g_out))
            p[i] = old - eps
            lm = float(np.sum(net.forward(x) * g_out))
            p[i] = old
            gnum[i] = (lp - lm) / (2 * eps)
        grads.append(gnum)
    return grads


class TestMlp:
    def test_zero_weights_yield_bias(self):
        net = Mlp([3, 2], seed=0)
        net.weights[0][:] = 0.0
        net.biases[0][:] = [1.5, -2.0]
        out = net.forward(np.array([9.0, 9.0, 9.0]))
        assert np.allclose(out, [1.5, -2.0])

    def test_identity_linear_layer(self):
        net = Mlp([4, 4], seed=0)
        net.weights[0] = np.eye(4)
        net.biases[0][:] = 0.0
        x = np.array([1.0, -2.0, 3.0, 0.5])
        assert np.allclose(net.forward(x), x)

    def test_output_finite_for_random_net(self):
        net = Mlp([5, 16, 16, 3], seed=1)
        x = np.random.default_rng(0).normal(size=(10, 5))
        assert np.all(np.isfinite(net.forward(x)))

    def test_dimension_mismatch(self):
        net = Mlp([4, 2], seed=0)
        with pytest.raises(ValueError):
            net.forward(np.zeros(5))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        for sizes in ([3, 2], [4, 8, 3], [2, 5, 5, 2]):
            net = Mlp(sizes, seed=3)
            x = rng.normal(size=(6, sizes[0]))
            g_out = rng.normal(size=(6, sizes[-1]))
            y, cache = net.forward_cached(x)
            grads, _ = net.backward(cache, g_out)
            num = finite_diff_grads(net, x, g_out)
            for ga, gn in zip(grads, num):
                scale = max(np.abs(gn).max(), 1e-8)
                assert np.abs(ga - gn).max() / scale < 1e-5

    def test_zero_upstream_zero_grads(self):
        net = Mlp([3, 4, 2], seed=4)
        x = np.ones((2, 3))
        _, cache = net.forward_cached(x)
        grads, gin = net.backward(cache, np.zeros((2, 2)))
        assert all(np.all(g == 0) for g in grads)
        assert np.all(gin == 0)

    def test_linear_input_gradient_is_weight_transpose(self):
        net = Mlp([3, 2], seed=5)
        x = np.zeros((1, 3))
        _, cache = net.forward_cached(x)
        up = np.array([[1.0, -2.0]])
        _, gin = net.backward(cache, up)
        assert np.allclose(gin, up @ net.weights[0].T)

    def test_upstream_shape_mismatch(self):
        net = Mlp([3, 2], seed=0)
        _, cache = net.forward_cached(np.zeros((4, 3)))
        with pytest.raises(ValueError):
            net.backward(cache, np.zeros((4, 3)))

    def test_parameter_count(self):
        net = Mlp([3, 8, 2])
        assert net.n_params == (3 + 1) * 8 + (8 + 1) * 2


class TestAdamW:
    def make(self, lr=0.1, wd=0.0):
        net = Mlp([2, 2], seed=0)
        opt = AdamW(net.parameters(), lr=lr, weight_decay=wd)
        return net, opt

    def test_zero_grad_no_decay_keeps_params(self):
        net, opt = self.make(wd=0.0)
        before = [p.copy() for p in net.parameters()]
        opt.step(net.parameters(), [np.zeros_like(p) for p in net.parameters()])
        for b, p in zip(before, net.parameters()):
            assert np.array_equal(b, p)

    def test_decoupled_decay_shrinks(self):
        net, opt = self.make(lr=0.1, wd=0.5)
        before = [p.copy() for p in net.parameters()]
        opt.step(net.parameters(), [np.zeros_like(p) for p in net.parameters()])
        for b, p in zip(before, net.parameters()):
            assert np.allclose(p, b * (1 - 0.1 * 0.5))

    def test_constant_gradient_drifts_against_sign(self):
        # scalar parameter under a constant positive gradient must decrease
        p = [np.array([1.0])]
        opt = AdamW(p, lr=0.01, weight_decay=0.0)
        hist = []
        for _ in range(200):
            opt.step(p, [np.array([2.0])])
            hist.append(p[0][0])
        diffs = np.diff([1.0] + hist)
        assert np.all(diffs < 0)

    def test_param_count_mismatch(self):
        net, opt = self.make()
        with pytest.raises(ValueError):
            opt.step(net.parameters(), [np.zeros((2, 2))])


class TestEarlyStopping:
    def test_decreasing_never_stops(self):
        es = EarlyStopping(patience=10)
        assert not any(es.update(1.0 / (i + 1)) for i in range(200))

    def test_constant_stops_exactly_at_patience(self):
        es = EarlyStopping(patience=5)
        flags = [es.update(1.0) for _ in range(10)]
        # step 0 sets the best; the patience window expires at step 5
        assert flags.index(True) == 5

    def test_late_improvement_resets_window(self):
        es = EarlyStopping(patience=5)
        # best at step 0, improvement at step 4 restarts the window
        seq = [1.0] * 4 + [0.5] + [0.5] * 4
        assert not any(es.update(v) for v in seq)
        # the restarted window expires 5 steps after the improvement
        assert es.update(0.5) is True

    def test_bad_patience(self):
        with pytest.raises(ValueError):
            EarlyStopping(patience=0)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        net = Mlp([3, 7, 2], seed=9)
        path = tmp_path / "net.npz"
        save_mlp(net, path, extra={"note": "x"})
        loaded, extra = load_mlp(path)
        assert extra == {"note": "x"}
        x = np.random.default_rng(1).normal(size=(4, 3))
        assert np.array_equal(net.forward(x), loaded.forward(x))

    def test_corrupted_hash_rejected(self, tmp_path):
        net = Mlp([3, 2], seed=0)
        path = tmp_path / "net.npz"
        save_mlp(net, path)
        data = dict(np.load(path, allow_pickle=False))
        data["w0"] = data["w0"] + 1.0
        np.savez(path, **data)
        with pytest.raises(ValueError, match="hash"):
            load_mlp(path)

    def test_shape_mismatch_rejected(self, tmp_path):
        net = Mlp([3, 2], seed=0)
        path = tmp_path / "net.npz"
        save_mlp(net, path)
        data = dict(np.load(path, allow_pickle=False))
        data["w0"] = np.zeros((5, 2))
        np.savez(path, **data)
        with pytest.raises(ValueError, match="shape|hash"):
            load_mlp(path)

    def test_training_reproducibility(self):
        # identical seeds produce bit-identical nets after identical updates
        def run():
            net = Mlp([2, 8, 1], seed=11)
            opt = AdamW(net.parameters(), lr=1e-3)
            rng = np.random.default_rng(5)
            for _ in range(20):
                x = rng.normal(size=(8, 2))
                y, cache = net.forward_cached(x)
                grads, _ = net.backward(cache, y - 1.0)
                opt.step(net.parameters(), grads)
            return net.forward(np.array([[0.3, -0.7]]))

        assert np.array_equal(run(), run())
