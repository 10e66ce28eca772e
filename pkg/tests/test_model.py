"""Model assembly: wiring invariants, head contracts, parameter accounting."""

import numpy as np
import pytest

from dram import model as M
from dram import tensor as T
from dram.tensor import Tape, Tensor

from conftest import assert_grads_close, fd_gradient, tiny_model


def fresh_state(mcfg, b=2, fill=0.0):
    u = mcfg.lstm_units
    mk = lambda v: Tensor(np.full((b, u), v))
    return M.RecurrentState(h1=mk(fill), c1=mk(fill), h2=mk(fill), c2=mk(fill))


def test_parameter_count_closed_form():
    for task, ov in [("pairs", {}), ("addition", {"no_context": "false"}),
                     ("sequence", {})]:
        cfg, params = tiny_model(task, **ov)
        assert params.total_parameters() == M.expected_parameter_count(cfg.model, cfg.sensor)


def test_parameter_count_full_scale_configs():
    from dram.config import parse_config
    for task in ("pairs", "addition", "sequence"):
        cfg = parse_config(task=task)
        params = M.init_params(cfg.model, cfg.sensor, np.random.default_rng(0))
        assert params.total_parameters() == M.expected_parameter_count(cfg.model, cfg.sensor)


def test_init_shapes_and_biases():
    cfg, params = tiny_model("pairs")
    u = cfg.model.lstm_units
    assert params["lstm1_w"].data.shape == (cfg.model.glimpse_dim + u, 4 * u)
    assert params["emit2_w"].data.shape == (cfg.model.emission_hidden, 2)
    assert np.array_equal(params["cls1_b"].data, np.zeros(cfg.model.classifier_hidden))
    # forget-gate slice of the LSTM bias opens at 1, everything else 0
    b = params["lstm1_b"].data
    assert np.array_equal(b[u: 2 * u], np.ones(u))
    assert np.array_equal(b[:u], np.zeros(u))
    assert np.array_equal(b[2 * u:], np.zeros(2 * u))


def test_classify_reads_only_h1():
    cfg, params = tiny_model("pairs")
    s1 = fresh_state(cfg.model, fill=0.3)
    s2 = M.RecurrentState(h1=s1.h1, c1=Tensor(np.ones_like(s1.c1.data)),
                          h2=Tensor(np.full(s1.h2.data.shape, -2.0)),
                          c2=Tensor(np.full(s1.c2.data.shape, 5.0)))
    assert np.array_equal(M.classify(params, s1).data, M.classify(params, s2).data)
    s3 = M.RecurrentState(h1=Tensor(s1.h1.data + 0.1), c1=s1.c1, h2=s1.h2, c2=s1.c2)
    assert not np.array_equal(M.classify(params, s1).data, M.classify(params, s3).data)


def test_emission_and_baseline_read_only_h2():
    cfg, params = tiny_model("pairs")
    s1 = fresh_state(cfg.model, fill=0.4)
    s2 = M.RecurrentState(h1=Tensor(np.full(s1.h1.data.shape, 9.0)),
                          c1=Tensor(np.full(s1.c1.data.shape, -9.0)),
                          h2=s1.h2, c2=Tensor(np.full(s1.c2.data.shape, 3.0)))
    assert np.array_equal(M.emission(params, s1).data, M.emission(params, s2).data)
    assert np.array_equal(M.baseline(params, s1).data, M.baseline(params, s2).data)
    s3 = M.RecurrentState(h1=s1.h1, c1=s1.c1, h2=Tensor(s1.h2.data + 0.1), c2=s1.c2)
    assert not np.array_equal(M.emission(params, s1).data, M.emission(params, s3).data)
    assert not np.array_equal(M.baseline(params, s1).data, M.baseline(params, s3).data)


def test_layer1_independent_of_layer2_state():
    cfg, params = tiny_model("pairs")
    g = Tensor(np.random.default_rng(1).uniform(-1, 1, (2, cfg.model.glimpse_dim)))
    a = fresh_state(cfg.model, fill=0.2)
    b = M.RecurrentState(h1=a.h1, c1=a.c1,
                         h2=Tensor(np.full(a.h2.data.shape, -1.5)),
                         c2=Tensor(np.full(a.c2.data.shape, 2.5)))
    na, nb = M.recurrent_step(params, g, a), M.recurrent_step(params, g, b)
    assert np.array_equal(na.h1.data, nb.h1.data)
    assert np.array_equal(na.c1.data, nb.c1.data)
    assert not np.array_equal(na.h2.data, nb.h2.data)


def test_context_seeds_h2_only():
    cfg, params = tiny_model("pairs")
    imgs = np.random.default_rng(2).random((3, 1, 40, 40))
    state = M.init_state(params, cfg.model, cfg.sensor, imgs)
    assert np.array_equal(state.h1.data, np.zeros_like(state.h1.data))
    assert np.array_equal(state.c1.data, np.zeros_like(state.c1.data))
    assert np.array_equal(state.c2.data, np.zeros_like(state.c2.data))
    assert np.abs(state.h2.data).max() > 0.0
    # different images produce different seeds
    state2 = M.init_state(params, cfg.model, cfg.sensor, imgs[::-1])
    assert not np.array_equal(state.h2.data, state2.h2.data)


def test_no_context_zeroes_h2():
    cfg, params = tiny_model("pairs", no_context="true")
    imgs = np.random.default_rng(3).random((2, 1, 40, 40))
    state = M.init_state(params, cfg.model, cfg.sensor, imgs)
    for part in (state.h1, state.c1, state.h2, state.c2):
        assert np.array_equal(part.data, np.zeros_like(part.data))


def test_classify_is_a_distribution():
    cfg, params = tiny_model("pairs")
    state = fresh_state(cfg.model, fill=0.7)
    lp = M.classify(params, state)
    assert np.abs(np.exp(lp.data).sum(axis=1) - 1.0).max() < 1e-12


def test_glimpse_network_annihilator_and_identity():
    cfg, params = tiny_model("pairs")
    rng = np.random.default_rng(4)
    obs = rng.random((2, 2, cfg.sensor.patch_size, cfg.sensor.patch_size))
    locs = rng.uniform(-1, 1, (2, 2))
    # zero image branch forces g = 0 regardless of location features
    params["g_img2_w"].data = np.zeros_like(params["g_img2_w"].data)
    params["g_img2_b"].data = np.zeros_like(params["g_img2_b"].data)
    g = M.glimpse_network(params, cfg.model, obs, locs)
    assert np.array_equal(g.data, np.zeros_like(g.data))

    cfg, params = tiny_model("pairs", seed=5)
    # location branch forced to ones: g equals the image branch exactly
    params["g_loc_w"].data = np.zeros_like(params["g_loc_w"].data)
    params["g_loc_b"].data = np.ones_like(params["g_loc_b"].data)
    x = Tensor(obs)
    h = T.relu(T.affine(T.flatten_rows(x), params["g_img1_w"], params["g_img1_b"]))
    what = T.relu(T.affine(h, params["g_img2_w"], params["g_img2_b"]))
    g = M.glimpse_network(params, cfg.model, obs, locs)
    assert np.allclose(g.data, what.data)


def test_glimpse_network_gradient_both_branches():
    cfg, params = tiny_model("pairs", lstm_units=8, glimpse_dim=8, glimpse_hidden=8)
    rng = np.random.default_rng(6)
    obs = rng.random((2, 2, cfg.sensor.patch_size, cfg.sensor.patch_size))
    locs = rng.uniform(-1, 1, (2, 2))

    def build():
        g = M.glimpse_network(params, cfg.model, obs, locs)
        return T.sum_all(T.square(g))

    for name in ("g_img1_w", "g_img2_w", "g_loc_w", "g_loc_b"):
        with Tape() as tape:
            out = build()
        tape.backward(out)
        analytic = params[name].grad.copy()
        T.zero_grad(params.tensors.values())
        numeric = fd_gradient(lambda: build().data.item(), params[name].data)
        assert_grads_close(analytic, numeric, label=name)


def test_conv_glimpse_network_shape():
    cfg, params = tiny_model("sequence", lstm_units=12, glimpse_dim=12)
    rng = np.random.default_rng(7)
    obs = rng.random((3, 2, cfg.sensor.patch_size, cfg.sensor.patch_size))
    locs = rng.uniform(-1, 1, (3, 2))
    g = M.glimpse_network(params, cfg.model, obs, locs)
    assert g.data.shape == (3, cfg.model.glimpse_dim)


def test_model_step_purity():
    cfg, params = tiny_model("pairs")
    rng = np.random.default_rng(8)
    imgs = rng.random((2, 1, 40, 40))
    locs = rng.uniform(-0.5, 0.5, (2, 2))
    state = M.init_state(params, cfg.model, cfg.sensor, imgs)
    s1, o1 = M.model_step(params, cfg.model, cfg.sensor, imgs, locs, state)
    s2, o2 = M.model_step(params, cfg.model, cfg.sensor, imgs, locs, state)
    assert np.array_equal(o1["log_probs"].data, o2["log_probs"].data)
    assert np.array_equal(o1["l_hat"].data, o2["l_hat"].data)
    assert np.array_equal(o1["baseline"].data, o2["baseline"].data)
    assert np.array_equal(s1.h2.data, s2.h2.data)
    assert o1["l_hat"].data.shape == (2, 2)
    assert o1["baseline"].data.shape == (2,)


def test_unroll_finite_for_many_seeds():
    cfg, _ = tiny_model("pairs")
    rng = np.random.default_rng(9)
    imgs = rng.random((2, 1, 40, 40))
    for seed in range(100):
        params = M.init_params(cfg.model, cfg.sensor, np.random.default_rng(seed))
        state = M.init_state(params, cfg.model, cfg.sensor, imgs)
        locs = rng.uniform(-1, 1, (2, 2))
        for _ in range(3):
            state, outs = M.model_step(params, cfg.model, cfg.sensor, imgs, locs, state)
            locs = outs["l_hat"].data
        assert np.isfinite(outs["log_probs"].data).all()
        assert np.isfinite(outs["l_hat"].data).all()


def test_load_arrays_shape_guard():
    cfg, params = tiny_model("pairs")
    arrays = params.arrays()
    arrays["cls2_b"] = np.zeros(3)
    with pytest.raises(ValueError):
        params.load_arrays(arrays)


def test_unknown_glimpse_net_rejected():
    with pytest.raises(ValueError):
        tiny_model("pairs", glimpse_net="mlp")
