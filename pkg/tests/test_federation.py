import numpy as np
import pytest

from ppfl.data import ClientData, LoadScaler, Windows
from ppfl.federation import (ConfigError, ExperimentConfig, FederatedResult, decode_update, encode_update,
                             evaluate, federated_objective, run, run_baseline, run_ppfl)
from ppfl.model import load_params
from ppfl.privacy import DpConfig

FAST = dict(rounds=3, local_steps=2, batch_size=8, hidden=4, eval_every=1)


def same(a: FederatedResult, b: FederatedResult):
    assert len(a.clients) == len(b.clients)
    for x, y in zip(a.clients, b.clients):
        assert np.array_equal(x.phi, y.phi) and np.array_equal(x.psi, y.psi)
    if a.server_phi is None:
        assert b.server_phi is None
    else:
        assert np.array_equal(a.server_phi, b.server_phi)


class TestConfig:
    def test_epsilon_only_with_ppfl(self):
        for mode in ("fl", "personalized", "local", "pooled"):
            with pytest.raises(ConfigError, match="epsilon"):
                ExperimentConfig(mode=mode, epsilon=10)

    def test_epsilon_parsing(self):
        assert ExperimentConfig(epsilon="off").epsilon is None
        assert ExperimentConfig(epsilon="10").dp == DpConfig(10.0, 200.0)
        with pytest.raises(ConfigError):
            ExperimentConfig(epsilon=-1)

    def test_bad_values(self):
        for kw in (dict(mode="fedavg"), dict(local_steps=0), dict(clip=0), dict(eval_params="x"), dict(lr=-1)):
            with pytest.raises(ConfigError):
                ExperimentConfig(**kw)

    def test_profiles(self):
        desk, full = ExperimentConfig(), ExperimentConfig.full_scale()
        assert (desk.hidden, desk.rounds) == (16, 200)
        assert (full.hidden, full.rounds, full.local_steps, full.batch_size, full.clip) == (30, 4000, 5, 64, 200)
        assert (full.lr, full.beta1, full.beta2, full.server_lr, full.server_beta1) == (1e-3, 0.9, 0.999, 0.01, 0.99)

    def test_fl_shares_everything(self):
        assert ExperimentConfig(mode="fl").layout().n_personal == 0
        assert ExperimentConfig(mode="personalized").layout().n_personal > 0


class TestMessages:
    def test_roundtrip(self):
        v = np.random.default_rng(0).normal(size=11)
        k, m, back = decode_update(encode_update(7, 2, v))
        assert (k, m) == (7, 2) and np.array_equal(back, v)

    def test_malformed(self):
        with pytest.raises(ValueError):
            decode_update(encode_update(1, 1, np.ones(3))[:-1])


class TestOracles:
    def test_ppfl_all_shared_without_noise_is_fl(self, small_clients):
        a = run(ExperimentConfig(mode="ppfl", share_all=True, **FAST), small_clients)
        b = run(ExperimentConfig(mode="fl", **FAST), small_clients)
        same(a, b)
        assert a.layout.n_personal == 0

    def test_ppfl_without_noise_is_personalized(self, small_clients):
        same(run(ExperimentConfig(mode="ppfl", epsilon="off", **FAST), small_clients),
             run(ExperimentConfig(mode="personalized", **FAST), small_clients))

    def test_pooled_single_client_is_local(self, small_clients):
        one = small_clients[:1]
        a = run(ExperimentConfig(mode="pooled", pooled_batch_size=8, **FAST), one)
        b = run(ExperimentConfig(mode="local", **FAST), one)
        same(a, b)

    def test_local_models_do_not_depend_on_client_order(self, small_clients):
        # client m's streams are keyed by its index, so move the data, not the index
        fwd = run(ExperimentConfig(mode="local", **FAST), small_clients)
        solo = run(ExperimentConfig(mode="local", **FAST), small_clients[:2])
        for x, y in zip(fwd.clients[:2], solo.clients):
            assert np.array_equal(x.phi, y.phi) and np.array_equal(x.psi, y.psi)


class TestProtocol:
    def test_zero_rounds_returns_initial_parameters(self, small_clients):
        cfg = ExperimentConfig(mode="ppfl", epsilon=1, **{**FAST, "rounds": 0})
        r = run(cfg, small_clients)
        assert all(np.array_equal(c.phi, r.server_phi) for c in r.clients)
        assert r.telemetry == [] and r.message_sizes == []

    def test_messages_hold_exactly_phi(self, small_clients):
        r = run(ExperimentConfig(mode="ppfl", epsilon=10, **FAST), small_clients)
        assert r.layout.n_personal > 0
        assert r.message_sizes == [r.layout.n_shared] * (FAST["rounds"] * len(small_clients))

    def test_telemetry_counts(self, small_clients):
        r = run(ExperimentConfig(mode="ppfl", epsilon=10, **FAST), small_clients)
        assert len(r.telemetry) == FAST["rounds"] * len(small_clients)
        assert len(r.validation) == FAST["rounds"] * len(small_clients)
        p = run(ExperimentConfig(mode="pooled", **FAST), small_clients)
        assert len(p.telemetry) == FAST["rounds"] * FAST["local_steps"]

    def test_clipping_and_noise_in_telemetry(self, small_clients):
        cfg = ExperimentConfig(mode="ppfl", epsilon=10, **{**FAST, "clip": 1e-3})
        r = run(cfg, small_clients)
        assert all(t.delta_l1_post <= 1e-3 + 1e-9 for t in r.telemetry)
        assert all(t.noise_l1 > 0 for t in r.telemetry)

    def test_single_client_server_sees_its_clipped_delta(self, small_clients):
        one = small_clients[:1]
        cfg = ExperimentConfig(mode="personalized", **FAST)
        seen = []
        import ppfl.federation as fed
        orig = fed.server_update

        def spy(phi_prev, deltas, state):
            seen.append((phi_prev.copy(), [d.copy() for d in deltas]))
            return orig(phi_prev, deltas, state)

        fed.server_update = spy
        try:
            r = fed.run(cfg, one)
        finally:
            fed.server_update = orig
        assert len(seen) == FAST["rounds"] and all(len(d) == 1 for _, d in seen)
        phi_prev, (delta,) = seen[-1]
        assert np.array_equal(delta, r.clients[0].phi - phi_prev)

    def test_noise_streams_differ_across_clients_and_rounds(self, small_clients):
        r = run(ExperimentConfig(mode="ppfl", epsilon=0.1, **FAST), small_clients)
        noise = [t.noise_l1 for t in r.telemetry]
        assert len(set(noise)) == len(noise)

    def test_psi_never_leaves_the_client(self, small_clients):
        cfg = ExperimentConfig(mode="ppfl", epsilon=10, **FAST)
        r = run(cfg, small_clients)
        init = run(ExperimentConfig(mode="ppfl", epsilon=10, **{**FAST, "rounds": 0}), small_clients)
        # every client's psi moved, the server only ever holds phi-sized state
        assert all(not np.array_equal(a.psi, b.psi) for a, b in zip(r.clients, init.clients))
        assert r.server_phi.size == r.layout.n_shared == r.server_state.m.size

    @pytest.mark.parametrize("mode", ["ppfl", "fl", "local", "pooled"])
    def test_worker_count_invariance(self, small_clients, mode):
        eps = {"epsilon": 1.0} if mode == "ppfl" else {}
        a = run(ExperimentConfig(mode=mode, workers=1, **eps, **FAST), small_clients)
        b = run(ExperimentConfig(mode=mode, workers=4, **eps, **FAST), small_clients)
        same(a, b)

    def test_wrong_window_shape(self, small_clients):
        with pytest.raises(ValueError, match="windows have shape"):
            run(ExperimentConfig(mode="fl", window=6, **FAST), small_clients)

    def test_runner_mode_guards(self, small_clients):
        with pytest.raises(ConfigError):
            run_ppfl(ExperimentConfig(mode="local", **FAST), small_clients)
        with pytest.raises(ConfigError):
            run_baseline(ExperimentConfig(mode="fl", **FAST), small_clients)


class TestEvaluation:
    def test_server_and_client_params(self, small_clients):
        r = run(ExperimentConfig(mode="personalized", **FAST), small_clients)
        a, b = evaluate(r, small_clients, "client"), evaluate(r, small_clients, "server")
        assert np.isfinite(a.mean_mase) and np.isfinite(b.mean_mase)
        assert a.mean_mase != b.mean_mase
        with pytest.raises(ValueError, match="no server"):
            evaluate(run(ExperimentConfig(mode="local", **FAST), small_clients), small_clients, "server")

    def test_outputs(self, small_clients, tmp_path):
        r = run(ExperimentConfig(mode="ppfl", epsilon=10, **FAST), small_clients)
        r.write_telemetry(tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "round,client,train_loss,delta_l1_pre,delta_l1_post,noise_l1,seconds"
        assert len(lines) == 1 + len(r.telemetry)
        paths = r.save_checkpoints(tmp_path / "ck", [c.client for c in small_clients])
        assert len(paths) == len(small_clients) + 1
        theta, layout, meta = load_params(paths[1])
        assert np.array_equal(theta, r.theta(1, "client")) and meta["name"] == small_clients[1].client
        phi, _, meta = load_params(paths[-1])
        assert meta["part"] == "shared" and np.array_equal(phi, r.server_phi)


def test_objective_matches_hand_computation(all_shared_layout):
    """Two clients with 1 and 3 samples: mean of per-client means, not a pooled mean."""
    layout = all_shared_layout
    rng = np.random.default_rng(0)
    theta = layout.initialize(rng)
    X, Y = rng.normal(size=(4, 3, 2)), rng.normal(size=(4, 3))
    from ppfl.model import predict
    y_hat = predict(theta, layout, X, Y)
    target = y_hat + np.array([1.0, 2.0, 0.0, -2.0])  # squared errors 1, 4, 0, 4
    w1 = Windows(X[:1], Y[:1], target[:1], np.arange(1))
    w2 = Windows(X[1:], Y[1:], target[1:], np.arange(3))
    value = federated_objective([theta, theta], layout, [w1, w2])
    assert value == pytest.approx((1.0 + (4.0 + 0.0 + 4.0) / 3) / 2, rel=1e-12)
