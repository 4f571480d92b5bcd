"""Network assembly: shapes, determinism, ablations, state carry, checkpoints."""

import numpy as np
import pytest

from navmem.memory import MODES, Mode
from navmem.network import (
    CheckpointError,
    Network,
    NetworkConfig,
    build_ablation,
    load_checkpoint,
    save_checkpoint,
)
from navmem.tensor import ConfigError, GradTape, ShapeError, Tensor, finite_diff_grad, \
    relative_error, sum_all


def tiny_config(**kw):
    base = dict(input_hw=16, stage_widths=(2, 2), stage_kernels=(3, 3),
                stage_strides=(2, 2), memory_after=(0, 1), memory_enabled=(True, True),
                head_hidden=4, dropout_rate=0.2)
    base.update(kw)
    return NetworkConfig(**base)


def make_net(seed=0, **kw):
    cfg = tiny_config(**kw)
    return Network(cfg, np.random.default_rng(seed)), cfg


def rand_obs(rng, cfg, batch=None):
    shape = (cfg.in_channels, cfg.input_hw, cfg.input_hw)
    if batch is not None:
        shape = (batch,) + shape
    return Tensor(rng.uniform(-1, 1, shape))


class TestForward:
    def test_two_finite_outputs(self):
        net, cfg = make_net()
        rng = np.random.default_rng(1)
        out, _ = net.step(rand_obs(rng, cfg), Mode.GO_FORWARD, net.reset_state())
        assert out.shape == (2,)
        assert np.all(np.isfinite(out.data))

    def test_deterministic_given_everything(self):
        net, cfg = make_net()
        rng = np.random.default_rng(2)
        obs = rand_obs(rng, cfg)
        masks = net.sample_masks(np.random.default_rng(5))
        a1, _ = net.step(obs, Mode.TURN_LEFT, net.reset_state(), masks)
        a2, _ = net.step(obs, Mode.TURN_LEFT, net.reset_state(), masks)
        np.testing.assert_array_equal(a1.data, a2.data)

    def test_wrong_obs_shape_rejected(self):
        net, cfg = make_net()
        with pytest.raises(ShapeError, match="observation shape"):
            net.step(Tensor(np.zeros((3, 8, 8))), Mode.GO_FORWARD, net.reset_state())

    def test_uninitialized_state_rejected(self):
        net, cfg = make_net()
        rng = np.random.default_rng(0)
        with pytest.raises(ConfigError, match="state holds"):
            net.step(rand_obs(rng, cfg), Mode.GO_FORWARD, [])

    def test_batched_matches_single(self):
        net, cfg = make_net()
        rng = np.random.default_rng(3)
        obs = rand_obs(rng, cfg, batch=3)
        modes = np.array([0, 2, 1])
        out_b, _ = net.step(obs, modes, net.reset_state(batch=3))
        for i in range(3):
            out_s, _ = net.step(Tensor(obs.data[i]), Mode(int(modes[i])), net.reset_state())
            np.testing.assert_allclose(out_b.data[i], out_s.data, atol=1e-12)

    def test_dropout_rate_zero_masks_ignored(self):
        net, cfg = make_net(dropout_rate=0.0)
        rng = np.random.default_rng(4)
        obs = rand_obs(rng, cfg)
        masks = net.sample_masks(np.random.default_rng(6))
        a1, _ = net.step(obs, Mode.GO_FORWARD, net.reset_state(), masks)
        a2, _ = net.step(obs, Mode.GO_FORWARD, net.reset_state(), None)
        np.testing.assert_array_equal(a1.data, a2.data)


class TestState:
    def test_reset_matches_explicit_zero_state(self):
        net, cfg = make_net()
        for st, layer, pos in zip(net.reset_state(), net.memory_layers, net._memory_stage):
            side = cfg.spatial_schedule()[pos]
            for s in st.states.values():
                assert s.c.shape == (layer.channels, side, side)
                np.testing.assert_array_equal(s.c.data, 0.0)
                np.testing.assert_array_equal(s.h.data, 0.0)

    def test_reset_idempotent(self):
        net, _ = make_net()
        a, b = net.reset_state(), net.reset_state()
        for sa, sb in zip(a, b):
            for m in sa.states:
                np.testing.assert_array_equal(sa.states[m].c.data, sb.states[m].c.data)

    def test_spatial_schedule_follows_downsampling(self):
        cfg = NetworkConfig()  # desk default: 112 input, strides 4,2,2,2
        assert cfg.spatial_schedule() == [28, 14, 7, 4]
        net = Network(tiny_config(), np.random.default_rng(0))
        assert net.config.spatial_schedule() == [8, 4]

    def test_state_continuity_split_run(self):
        net, cfg = make_net()
        rng = np.random.default_rng(7)
        seq = [rand_obs(rng, cfg) for _ in range(6)]
        modes = [Mode.GO_FORWARD, Mode.TURN_LEFT, Mode.GO_FORWARD,
                 Mode.TURN_RIGHT, Mode.TURN_LEFT, Mode.GO_FORWARD]
        masks = net.sample_masks(np.random.default_rng(8))

        state = net.reset_state()
        full = []
        for o, m in zip(seq, modes):
            out, state = net.step(o, m, state, masks)
            full.append(out.data.copy())

        state = net.reset_state()
        split = []
        for o, m in zip(seq[:3], modes[:3]):
            out, state = net.step(o, m, state, masks)
            split.append(out.data.copy())
        for o, m in zip(seq[3:], modes[3:]):
            out, state = net.step(o, m, state, masks)
            split.append(out.data.copy())

        for a, b in zip(full, split):
            np.testing.assert_allclose(a, b, atol=1e-12)


class TestAblation:
    def test_full(self):
        cfg = build_ablation(tiny_config(multimodal=False, memory_enabled=(False, False)), "full")
        assert cfg.memory_enabled == (True, True)
        assert cfg.multimodal

    def test_no_mem_pure_feedforward(self):
        cfg = build_ablation(tiny_config(), "no-mem")
        net = Network(cfg, np.random.default_rng(0))
        assert net.memory_layers == []
        assert net.reset_state() == []

    def test_l1_l3_only(self):
        assert build_ablation(tiny_config(), "L1-only").memory_enabled == (True, False)
        assert build_ablation(tiny_config(), "L3-only").memory_enabled == (False, True)

    def test_no_multimodal_single_shared_cell(self):
        cfg = build_ablation(tiny_config(), "no-multimodal")
        assert cfg.memory_enabled == (True, True)
        net = Network(cfg, np.random.default_rng(0))
        for layer in net.memory_layers:
            assert layer.params[Mode.GO_FORWARD] is layer.params[Mode.TURN_LEFT]

    def test_unknown_variant(self):
        with pytest.raises(ConfigError, match="unknown ablation"):
            build_ablation(tiny_config(), "bogus")

    def test_widths_untouched(self):
        base = tiny_config()
        for v in ("no-mem", "L1-only", "L3-only", "no-multimodal"):
            cfg = build_ablation(base, v)
            assert cfg.stage_widths == base.stage_widths
            assert cfg.head_hidden == base.head_hidden

    def test_multimodal_layer_has_4x_cell_parameters(self):
        multi = Network(tiny_config(), np.random.default_rng(0))
        shared = Network(tiny_config(multimodal=False), np.random.default_rng(0))

        def layer_param_count(net, idx):
            seen = set()
            total = 0
            for layer in [net.memory_layers[idx]]:
                for _, t in layer.named("x."):
                    if id(t) not in seen:
                        seen.add(id(t))
                        total += t.size
            return total

        assert layer_param_count(multi, 0) == 4 * layer_param_count(shared, 0)

    def test_shared_net_head_receives_mode_feature(self):
        multi, cfg_m = make_net()
        shared, cfg_s = make_net(multimodal=False)
        assert shared.head1[0].shape[1] == cfg_s.pooled_dim + len(MODES)
        assert multi.head1[0].shape[1] == cfg_m.pooled_dim
        rng = np.random.default_rng(9)
        obs = rand_obs(rng, cfg_s)
        a_left, _ = shared.step(obs, Mode.TURN_LEFT, shared.reset_state())
        a_right, _ = shared.step(obs, Mode.TURN_RIGHT, shared.reset_state())
        assert not np.array_equal(a_left.data, a_right.data)


class TestCheckpoint:
    def test_roundtrip_bitexact(self, tmp_path):
        net, _ = make_net(seed=42)
        stats = {"mean": [0.4, 0.5, 0.6], "std": [0.2, 0.2, 0.3]}
        path = tmp_path / "ck.npz"
        save_checkpoint(path, net, extra={"norm": stats})
        loaded, extra = load_checkpoint(path)
        assert extra == {"norm": stats}
        assert loaded.config == net.config
        for (na, ta), (nb, tb) in zip(net.named_parameters(), loaded.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(ta.data, tb.data)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.npz"
        np.savez(path, a=np.zeros(3))
        with pytest.raises(CheckpointError, match="not a controller checkpoint"):
            load_checkpoint(path)

    def test_loaded_net_same_outputs(self, tmp_path):
        net, cfg = make_net(seed=11)
        rng = np.random.default_rng(1)
        obs = rand_obs(rng, cfg)
        path = tmp_path / "ck.npz"
        save_checkpoint(path, net)
        loaded, _ = load_checkpoint(path)
        a, _ = net.step(obs, Mode.GO_FORWARD, net.reset_state())
        b, _ = loaded.step(obs, Mode.GO_FORWARD, loaded.reset_state())
        np.testing.assert_array_equal(a.data, b.data)


def test_full_network_gradient_check_reduced_size():
    """2-step rollout on a reduced-size shared-memory net vs finite differences."""
    net, cfg = make_net(seed=3, multimodal=False, dropout_rate=0.3)
    rng = np.random.default_rng(10)
    obs = [rand_obs(rng, cfg) for _ in range(2)]
    masks = net.sample_masks(np.random.default_rng(4))

    def build():
        state = net.reset_state()
        out1, state = net.step(obs[0], Mode.GO_FORWARD, state, masks)
        out2, state = net.step(obs[1], Mode.TURN_LEFT, state, masks)
        return sum_all(out2)

    with GradTape() as tape:
        tape.backward(build())
    grads = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
             for name, t in net.named_parameters()}
    net.zero_grads()
    worst = 0.0
    for name, t in net.named_parameters():
        numeric = finite_diff_grad(lambda _: build().item(), t)
        err = relative_error(grads[name], numeric)
        worst = max(worst, err)
        assert err <= 1e-4, f"{name}: rel err {err:.2e}"
    assert worst <= 1e-4
