import numpy as np
import pytest

from oracles import scan_numpy_loop, scan_unrolled
from pointcsp import backbone as bb
from pointcsp.config import ModelConfig
from pointcsp.numerics import check_gradients, grad
from pointcsp.numerics import tensor as T


def test_serialize_literal_order():
    seqs = [T.Tensor(np.array([[b + 1, l + 1] for l in range(3)], float)) for b in range(2)]
    sb = bb.serialize(seqs)
    assert sb.tokens.shape == (6, 2)
    assert [tuple(r) for r in sb.tokens.data] == [(1, 1), (1, 2), (1, 3), (2, 1), (2, 2), (2, 3)]
    assert sb.boundaries == [(0, 3), (3, 6)]


def test_serialize_round_trip_and_seeds(rng):
    seqs = [T.Tensor(rng.normal(size=(n, 4))) for n in (5, 3, 7)]
    a, b, c = bb.serialize(seqs, 13), bb.serialize(seqs, 13), bb.serialize(seqs, 14)
    np.testing.assert_array_equal(a.permutation, b.permutation)
    assert not np.array_equal(a.permutation, c.permutation)
    back = bb.deserialize(a.tokens, a)
    for x, y in zip(seqs, back):
        np.testing.assert_array_equal(x.data, y.data)


def test_serialize_round_trip_gradients(rng):
    x = rng.normal(size=(6, 3))
    w = rng.normal(size=(6, 3))

    def loss(P, seed):
        sb = bb.serialize([P["x"][:2], P["x"][2:]], seed)
        return (bb.deserialize_stacked(sb.tokens, sb) * T.Tensor(w)).sum()

    P = T.parameters({"x": x})
    np.testing.assert_array_equal(grad(loss(P, 3), P)["x"], w)


def test_serialize_errors():
    with pytest.raises(ValueError):
        bb.serialize([])
    with pytest.raises(ValueError):
        bb.serialize([T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 4)))])


# ---------------------------------------------------------------- scan


def _block(A, B, C, nonlinearity="identity", gate=None):
    h = np.shape(A)[0]
    return bb.SsmBlock(T.Tensor(A), T.Tensor(B), T.Tensor(C),
                       gate=T.Tensor(np.zeros(h) if gate is None else gate), nonlinearity=nonlinearity)


def test_scan_prefix_sums():
    y, h = bb.ssm_scan(T.Tensor([[1.0], [2.0], [3.0]]), _block([[1.0]], [[1.0]], [[1.0]]))
    assert y.data.ravel().tolist() == [1.0, 3.0, 6.0]
    assert h.tolist() == [6.0]


def test_scan_zero_state_matrix_has_no_memory(rng):
    B, C = rng.normal(size=(3, 4)), rng.normal(size=(4, 3))
    x = rng.normal(size=(9, 4))
    y, _ = bb.ssm_scan(T.Tensor(x), _block(np.zeros((3, 3)), B, C))
    np.testing.assert_allclose(y.data, x @ B.T @ C.T, atol=1e-14)


@pytest.mark.parametrize("length", [4, 32, 256])
@pytest.mark.parametrize("variant", ["static", "gated"])
def test_scan_matches_naive_unroll(length, variant, rng):
    cfg = ModelConfig(channels=6, state_dim=5, ssm_variant=variant)
    params = bb.init_backbone(cfg, rng)
    params["ssm.A"] = params["ssm.A"] + 0.2 * rng.normal(size=(5, 5))
    if variant == "static":
        params["ssm.gate"] = rng.normal(size=5)
    block = bb.SsmBlock.from_params(T.constants(params), cfg)
    x = T.Tensor(rng.normal(size=(length, 6)))
    y, _ = bb.ssm_scan(x, block)
    x_proj = x.data @ params["ssm.B"].T
    gate = params["ssm.gate"] if variant == "static" else x.data @ params["ssm.gate_w"] + params["ssm.gate_b"]
    ref = scan_unrolled(x_proj, params["ssm.A"], gate).data @ params["ssm.C"].T
    np.testing.assert_allclose(y.data, ref, atol=1e-10, rtol=0)
    if length <= 32:
        loop = scan_numpy_loop(x_proj.tolist(), params["ssm.A"].tolist(), gate.tolist()) @ params["ssm.C"].T
        np.testing.assert_allclose(y.data, loop, atol=1e-10, rtol=0)


def test_scan_gradients_match_unroll(rng):
    x = rng.normal(size=(12, 3))
    A, g = rng.normal(size=(3, 3)) * 0.6, rng.normal(size=(12, 3))
    w = rng.normal(size=(12, 3))
    P = T.parameters({"x": x, "A": A, "g": g})
    fused = grad((T.scan(P["x"], P["A"], P["g"]) * T.Tensor(w)).sum(), P)
    P = T.parameters({"x": x, "A": A, "g": g})
    naive = grad((scan_unrolled(P["x"], P["A"], P["g"]) * T.Tensor(w)).sum(), P)
    for k in fused:
        np.testing.assert_allclose(fused[k], naive[k], atol=1e-12)


def test_scan_with_initial_state(rng):
    A, x = rng.normal(size=(2, 2)) * 0.5, rng.normal(size=(5, 2))
    h0 = rng.normal(size=2)
    out = T.scan(T.Tensor(x), T.Tensor(A), T.Tensor(np.zeros(2)), h0)
    np.testing.assert_allclose(out.data, scan_numpy_loop(x.tolist(), A.tolist(), [0.0, 0.0], h0.tolist()),
                               atol=1e-14)


def test_scan_width_errors(rng):
    block = _block(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((3, 2)))
    with pytest.raises(ValueError, match="width"):
        bb.ssm_scan(T.Tensor(np.zeros((4, 5))), block)
    with pytest.raises(ValueError, match="h0"):
        bb.ssm_scan(T.Tensor(np.zeros((4, 3))), block, h0=np.zeros(3))


# ---------------------------------------------------------------- forward


def _model(rng, variant="static", shuffle=False, zero_A=False):
    cfg = ModelConfig(channels=8, feat_dim=6, state_dim=8, ssm_variant=variant, shuffle=shuffle)
    params = bb.init_backbone(cfg, rng)
    if zero_A:
        params["ssm.A"] = np.zeros_like(params["ssm.A"])
    return cfg, T.constants(params)


def _perturb_first(inputs, rng):
    out = [x.copy() for x in inputs]
    out[0][3] += rng.normal(size=3)
    return out


@pytest.mark.parametrize("shuffle", [False, True])
def test_no_cross_sample_path_without_csp(shuffle, rng):
    cfg, P = _model(rng, shuffle=shuffle)
    inputs = [rng.normal(size=(10, 3)) for _ in range(3)]
    a = bb.forward(P, inputs, cfg, csp_enabled=False, shuffle_seed=1)
    b = bb.forward(P, _perturb_first(inputs, rng), cfg, csp_enabled=False, shuffle_seed=1)
    for i in (1, 2):
        np.testing.assert_array_equal(a.sample_final(i).data, b.sample_final(i).data)
    assert np.abs(a.sample_final(0).data - b.sample_final(0).data).max() > 0


@pytest.mark.parametrize("shuffle", [False, True])
def test_csp_couples_samples(shuffle, rng):
    cfg, P = _model(rng, shuffle=shuffle)
    inputs = [rng.normal(size=(10, 3)) for _ in range(2)]
    a = bb.forward(P, inputs, cfg, csp_enabled=True, shuffle_seed=5)
    b = bb.forward(P, _perturb_first(inputs, rng), cfg, csp_enabled=True, shuffle_seed=5)
    assert np.abs(a.sample_final(1).data - b.sample_final(1).data).max() > 0


def test_unshuffled_csp_is_causal(rng):
    cfg, P = _model(rng, shuffle=False)
    inputs = [rng.normal(size=(10, 3)) for _ in range(3)]
    later = [x.copy() for x in inputs]
    later[2][0] += 1.0
    a = bb.forward(P, inputs, cfg, csp_enabled=True)
    b = bb.forward(P, later, cfg, csp_enabled=True)
    for i in (0, 1):
        np.testing.assert_array_equal(a.sample_final(i).data, b.sample_final(i).data)
    assert np.abs(a.sample_final(2).data - b.sample_final(2).data).max() > 0


def test_single_sample_zero_state_matrix_ignores_csp(rng):
    cfg, P = _model(rng, shuffle=True, zero_A=True)
    x = [rng.normal(size=(12, 3))]
    a = bb.forward(P, x, cfg, csp_enabled=True, shuffle_seed=3)
    b = bb.forward(P, x, cfg, csp_enabled=False)
    np.testing.assert_allclose(a.final.data, b.final.data, atol=1e-14)


def test_per_sample_path_is_batch_independent(rng):
    cfg, P = _model(rng, variant="gated")
    inputs = [rng.normal(size=(n, 3)) for n in (7, 9, 4)]
    batched = bb.forward(P, inputs, cfg, csp_enabled=False)
    for i, x in enumerate(inputs):
        alone = bb.forward(P, [x], cfg, csp_enabled=False)
        np.testing.assert_array_equal(alone.final.data, batched.sample_final(i).data)


def test_forward_taps_and_shapes(rng):
    cfg, P = _model(rng)
    out = bb.forward(P, [rng.normal(size=(5, 3)), rng.normal(size=(4, 3))], cfg)
    assert len(out.taps) == bb.NUM_STAGES
    assert all(t.shape == (9, 8) for t in out.taps)
    assert out.final.shape == (9, 6) and out.spans == [(0, 5), (5, 9)]
    assert out.sample_tap(1, 1).shape == (4, 8)
    with pytest.raises(ValueError):
        bb.forward(P, [], cfg)


@pytest.mark.parametrize("csp", [True, False])
@pytest.mark.parametrize("variant", ["static", "gated"])
def test_forward_gradients(csp, variant):
    rng = np.random.default_rng(11)
    cfg = ModelConfig(channels=3, feat_dim=2, state_dim=3, ssm_variant=variant, shuffle=True)
    params = bb.init_backbone(cfg, rng)
    params["ssm.A"] = params["ssm.A"] + 0.3 * rng.normal(size=(3, 3))
    inputs = [rng.normal(size=(4, 3)) for _ in range(2)]
    w = rng.normal(size=(8, 2))
    errs = check_gradients(lambda P: (T.tanh(bb.forward(P, inputs, cfg, csp, 2).final) * T.Tensor(w)).sum(),
                           params)
    assert max(errs.values()) <= 1e-4, errs


def test_float32_forward(rng):
    cfg = ModelConfig(channels=4, feat_dim=4, state_dim=4, dtype="float32")
    params = bb.init_backbone(cfg, rng)
    assert all(v.dtype == np.float32 for v in params.values())
    out = bb.forward(T.constants(params), [rng.normal(size=(6, 3))], cfg)
    assert out.final.dtype == np.float32


def test_input_width_follows_descriptor_scales(rng):
    assert bb.input_width(ModelConfig(local_k=[])) == 3
    assert bb.input_width(ModelConfig(local_k=[8, 24])) == 3 + 2 * 6
    x = rng.normal(size=(9, 3))
    feats = bb.point_inputs(x, ModelConfig(local_k=[4]))
    np.testing.assert_array_equal(feats[:, :3], x)
    assert feats.shape == (9, 9)
    cfg = ModelConfig(channels=4, feat_dim=4, state_dim=4, local_k=[])
    out = bb.forward(T.constants(bb.init_backbone(cfg, rng)), [x], cfg, csp_enabled=False)
    assert out.final.shape == (9, 4)
