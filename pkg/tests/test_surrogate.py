import json

import numpy as np
import pytest

from gridpinn.env import Action, DailyProfiles, GridEnv, State
from gridpinn.grid import build_admittance, default_config
from gridpinn import power_flow
from gridpinn.projection import (
    build_des_polytope,
    build_generator_polytope,
    project_exact,
)
from gridpinn.surrogate import (
    KktDesModel,
    KktGenModel,
    NeverTerminal,
    PinnBalanceModel,
    ScalingTable,
    SurrogateBundle,
    SurrogateTrainConfig,
    _des_g_rows,
    _des_h_matrix,
    _gen_g_rows,
    _gen_h_matrix,
    _kkt_batch_loss,
    balance_feature_names,
    benchmark_inference,
    des_feature_names,
    gen_feature_names,
    load_bundle,
    save_bundle,
    sobol_slot_names,
    train_balance_net,
    train_des_net,
    train_gen_net,
    train_terminal_clf,
    SOBOL_DIMENSION,
)


@pytest.fixture(scope="module")
def scaling(cfg):
    return ScalingTable.from_config(cfg)


@pytest.fixture(scope="module")
def cfg():
    return default_config()


@pytest.fixture(scope="module")
def profiles(cfg):
    return DailyProfiles.default(cfg)


class TestScalingTable:
    def test_roundtrip_identity(self, cfg, scaling):
        rng = np.random.default_rng(0)
        names = scaling.order
        lo, hi = scaling.lower(names), scaling.upper(names)
        x = rng.uniform(lo, hi, size=(50, len(names)))
        u = scaling.scale(x, names)
        back = scaling.unscale(u, names)
        assert np.abs(back - x).max() < 1e-12
        assert u.min() >= -1 - 1e-12 and u.max() <= 1 + 1e-12

    def test_every_slot_has_width(self, scaling):
        for name, (lo, hi) in scaling.slots.items():
            assert lo < hi, name

    def test_sobol_layout_covers_twenty_named_slots(self, cfg):
        names = sobol_slot_names(cfg)
        assert len(names) == 20
        assert SOBOL_DIMENSION == 21  # one dimension is deliberately spare
        for group in (gen_feature_names(cfg), des_feature_names(cfg),
                      balance_feature_names(cfg)):
            for n in group:
                if n.startswith("p_bus1"):
                    continue
                assert n in names

    def test_serialization(self, scaling):
        clone = ScalingTable.from_dict(json.loads(json.dumps(scaling.to_dict())))
        assert clone.slots == scaling.slots
        assert clone.order == scaling.order


class TestKktLoss:
    def test_zero_at_exact_optimum(self, cfg):
        rng = np.random.default_rng(1)
        g_dev = cfg.generators[0]
        g_rows = _gen_g_rows(g_dev)
        n_gen = len(cfg.generators)
        for _ in range(25):
            p_max = rng.uniform(0, g_dev.p_max, size=(1, n_gen))
            a = rng.uniform([-40, -30], [40, 30], size=(1, 2))
            poly = build_generator_polytope(g_dev, p_max[0, 0])
            x, lam = project_exact(a[0], poly)
            h = _gen_h_matrix(cfg, p_max)[0]
            loss, _, _ = _kkt_batch_loss(x[None], lam[None], a, g_rows, h)
            assert loss[0] < 1e-16

    def test_positive_off_optimum(self, cfg):
        g_dev = cfg.generators[0]
        g_rows = _gen_g_rows(g_dev)
        n_gen = len(cfg.generators)
        a = np.array([[50.0, 0.0]])
        h = _gen_h_matrix(cfg, np.full((1, n_gen), 20.0))[0]
        # claiming the setpoint itself is optimal with zero duals
        loss, _, _ = _kkt_batch_loss(a, np.zeros((1, 7)), a, g_rows, h)
        assert loss[0] > 1.0

    def test_gradients_match_finite_differences(self, cfg):
        rng = np.random.default_rng(2)
        des = cfg.des
        g_rows = _des_g_rows(des)
        soc = rng.uniform(des.soc_min, des.soc_max, size=4)
        h = _des_h_matrix(cfg, soc)
        a = rng.uniform(-30, 30, size=(4, 2))
        x = rng.uniform(-30, 30, size=(4, 2))
        lam = rng.uniform(-1, 2, size=(4, 10))
        loss, d_x, d_lam = _kkt_batch_loss(x, lam, a, g_rows, h)
        eps = 1e-6
        for arr, grad in ((x, d_x), (lam, d_lam)):
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                i = it.multi_index
                old = arr[i]
                arr[i] = old + eps
                lp = _kkt_batch_loss(x, lam, a, g_rows, h)[0].sum()
                arr[i] = old - eps
                lm = _kkt_batch_loss(x, lam, a, g_rows, h)[0].sum()
                arr[i] = old
                num = (lp - lm) / (2 * eps)
                assert num == pytest.approx(grad[i], rel=1e-4, abs=1e-6)


class TestFreshModels:
    def test_gen_interior_identity(self, cfg, scaling):
        model = KktGenModel.fresh(cfg, scaling, seed=0)
        a = np.array([[[5.0, 1.0], [8.0, 0.0]]])
        p_max = np.array([[20.0, 30.0]])
        pred = model.predict(a, p_max)
        assert np.allclose(pred, a)  # zero output layer + interior clip base

    def test_gen_box_clip_outside(self, cfg, scaling):
        model = KktGenModel.fresh(cfg, scaling, seed=0)
        a = np.array([[[200.0, 0.0], [-50.0, 0.0]]])
        p_max = np.array([[10.0, 30.0]])
        pred = model.predict(a, p_max)
        assert pred[0, 0, 0] == pytest.approx(10.0)
        assert pred[0, 1, 0] == pytest.approx(0.0)

    def test_des_soc_rows_respected_by_base(self, cfg, scaling):
        model = KktDesModel.fresh(cfg, scaling, seed=0)
        des = cfg.des
        soc = np.array([des.soc_max])
        a = np.array([[-20.0, 0.0]])  # charging request at a full battery
        pred = model.predict(a, soc)
        assert pred[0, 0] >= -1e-9

    def test_balance_flat_at_zero_injections(self, cfg, scaling):
        model = PinnBalanceModel.fresh(cfg, scaling, seed=0)
        out = model.predict(np.zeros((1, 5)), np.zeros((1, 5)))
        assert np.allclose(out["v_mag"], 1.0)
        assert np.allclose(out["theta"], 0.0)
        ymat = build_admittance(cfg)
        rp, rq = power_flow.pf_residuals(
            out["v_mag"][0], out["theta"][0], np.zeros(5), np.zeros(5), ymat
        )
        assert max(np.abs(rp).max(), np.abs(rq).max()) <= 1e-3

    def test_balance_loss_zero_at_ground_truth(self, cfg):
        # the physics loss evaluated at a Newton-Raphson solution vanishes
        ymat = build_admittance(cfg)
        rng = np.random.default_rng(3)
        p = rng.uniform(-0.2, 0.1, 5)
        q = rng.uniform(-0.05, 0.05, 5)
        sol = power_flow.solve(p, q, ymat)
        assert sol.converged
        rp, rq = power_flow.pf_residuals(sol.v_mag, sol.theta, p, q, ymat)
        loss = np.sum(rp**2) + np.sum(rq**2)
        assert loss <= power_flow.DEFAULT_TOL**2 * 10


class TestOracleBundle:
    def test_matches_env_step_for_step(self, cfg, profiles):
        env = GridEnv(cfg, profiles)
        bundle = SurrogateBundle.oracle(cfg, profiles)
        rng = np.random.default_rng(4)
        low, high = Action.bounds(cfg)
        env.reset(seed=4)
        for _ in range(120):
            s = env.state
            a = rng.uniform(low, high)
            out = env.step(a)
            nxt, r, d, _ = bundle.step_batch(s.to_vector()[None], a[None])
            assert bool(d[0]) == out.done
            assert np.abs(nxt[0] - out.next_state.to_vector()).max() <= 1e-8
            assert float(r[0]) == pytest.approx(out.reward, abs=1e-8)
            if out.done:
                env.reset()

    def test_aux_advances(self, cfg, profiles):
        bundle = SurrogateBundle.oracle(cfg, profiles)
        env = GridEnv(cfg, profiles)
        s = env.reset(seed=5)
        out = bundle.step(s, np.zeros(6))
        assert out.next_state.aux == (s.aux + 1) % 96

    def test_done_rows_keep_state(self, cfg, profiles):
        env = GridEnv(cfg, profiles)
        bundle = SurrogateBundle.oracle(cfg, profiles)
        s = env._consistent_state(aux=75, soc=25.0)
        bad = Action(p_gen=np.zeros(2), q_gen=np.array([-12.0, -15.0]),
                     p_des=-25.0, q_des=-12.0).to_vector()
        nxt, r, d, _ = bundle.step_batch(s.to_vector()[None], bad[None])
        assert bool(d[0])
        assert float(r[0]) == cfg.reward_clip[0]
        assert np.array_equal(nxt[0], s.to_vector())


class TestTrainingSeams:
    def test_label_free_training_never_steps_env(self, cfg, monkeypatch):
        def boom(self, action):
            raise AssertionError("environment step invoked during training")

        monkeypatch.setattr(GridEnv, "step", boom)
        tc = SurrogateTrainConfig(max_steps=30, patience_steps=10_000)
        train_gen_net(cfg, train_cfg=tc)
        train_des_net(cfg, train_cfg=tc)
        train_balance_net(cfg, train_cfg=tc)

    def test_divergence_aborts_with_diagnostics(self, cfg, scaling):
        tc = SurrogateTrainConfig(max_steps=5, learning_rate=1e30)
        with pytest.raises(FloatingPointError):
            train_gen_net(cfg, scaling, tc)

    def test_terminal_classifier_on_toy_labels(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(1200, 6))
        y = (x[:, 0] > 0.3).astype(float)
        clf, acc = train_terminal_clf(x, y, seed=0, n_trees=40)
        assert acc >= 0.95


class TestBundleIO:
    def test_roundtrip_and_config_pinning(self, cfg, profiles, tmp_path):
        scaling = ScalingTable.from_config(cfg)
        tc = SurrogateTrainConfig(max_steps=50, patience_steps=1000)
        gen_model, _ = train_gen_net(cfg, scaling, tc)
        des_model, _ = train_des_net(cfg, scaling, tc)
        bal_model, _ = train_balance_net(cfg, scaling, tc)
        bundle = SurrogateBundle(cfg, profiles, gen_model, des_model, bal_model,
                                 NeverTerminal(), scaling)
        save_bundle(bundle, tmp_path / "b")
        loaded = load_bundle(tmp_path / "b", cfg, profiles)

        env = GridEnv(cfg, profiles)
        s = env.reset(seed=8).to_vector()[None]
        a = np.zeros((1, 6))
        n1, r1, d1, _ = bundle.step_batch(s, a)
        n2, r2, d2, _ = loaded.step_batch(s, a)
        assert np.array_equal(n1, n2) and np.array_equal(r1, r2)

        # a different grid must be refused
        import dataclasses

        other = dataclasses.replace(cfg, base_power_mva=50.0)
        with pytest.raises(ValueError, match="different grid config"):
            load_bundle(tmp_path / "b", other, profiles)


class TestBenchmark:
    def test_empty_report(self, cfg, profiles):
        bundle = SurrogateBundle.oracle(cfg, profiles)
        rep = benchmark_inference(bundle, GridEnv(cfg, profiles), n=0)
        assert rep["n"] == 0 and rep["ratio"] is None

    def test_report_fields(self, cfg, profiles):
        bundle = SurrogateBundle.oracle(cfg, profiles)
        rep = benchmark_inference(bundle, GridEnv(cfg, profiles), n=40, batch=8)
        assert rep["surrogate_median_s"] > 0
        assert rep["env_median_s"] > 0
        assert rep["ratio"] == pytest.approx(
            rep["env_median_s"] / rep["surrogate_median_s"]
        )
