import math

import numpy as np
import pytest

from oafuser import model as M
from oafuser import tensor as T
from oafuser.carm import CarmConfig
from oafuser.errors import ConfigError, DimensionError, FormatError
from oafuser.nn import init_param, record_attention
from oracles import check_param_grads

rng = np.random.default_rng(5)


# ---------------------------------------------------------------------------
# independent analytic tallies


def lin(rows, cin, cout, bias=True):
    return 2 * rows * cin * cout + (rows * cout if bias else 0)


def mha(rows, nq, nk, c, heads):
    # QK^T, 1/sqrt(d) scale, softmax, PV
    return 2 * rows * nq * nk * c + heads * rows * nq * nk + 5 * heads * rows * nq * nk + 2 * rows * nq * nk * c


def block_flops(b, c, h, w, r, heads, ratio):
    n, hid = h * w, c * ratio
    f = 5 * b * n * c + lin(b * n, c, c)
    if r > 1:
        hr, wr = max(h, r) // r, max(w, r) // r
        nk = hr * wr
        f += 2 * b * c * nk * c * r * r + b * c * nk + 5 * b * nk * c
    else:
        nk = n
    f += lin(b * nk, c, 2 * c) + mha(b, n, nk, c, heads) + lin(b * n, c, c) + b * n * c
    f += 5 * b * n * c + lin(b * n, c, hid) + 2 * b * hid * n * 9 + b * hid * n
    f += 5 * b * n * hid + lin(b * n, hid, c) + b * n * c
    return f


def carm_flops(b, c, h, w, cfg):
    c2 = cfg.embed_mult * c
    f = 0
    for rows, tokens in ((b * h, 2 * w), (b * w, 2 * h)):
        m = rows * tokens
        f += lin(m, c, c2) + 5 * m * c2 + 3 * lin(m, c2, c2, bias=False)
        f += mha(rows, tokens, tokens, c2, cfg.heads)
        if cfg.attn_residual:
            f += m * c2
        f += lin(m, c2, c2) + 5 * m * c2 + lin(m, c2, c2) + m * c2 + lin(m, c2, c)
        vox = b * 2 * h * w
        f += cfg.local_layers * (2 * vox * c * c * cfg.kernel ** 3 + vox * c)
        f += max(cfg.local_layers - 1, 0) * vox * c
        if cfg.parallel:
            f += vox * c
    return f


def ffm_flops(b, c, h, w):
    return lin(b * h * w, 2 * c, c) + b * h * w * 2 * c + lin(b, 2 * c, c) + 5 * b * c + lin(b, c, c) + 5 * b * c + b * h * w * c


def analytic_model_flops(cfg, hw, n_views, b=1):
    H, W = hw
    n = n_views - 1
    f = 0
    h, w, c_in = H, W, 3
    dims = []
    for s, (c, stride) in enumerate(zip(cfg.stage_channels, cfg.stage_strides), start=1):
        rel = stride if s == 1 else stride // cfg.stage_strides[s - 2]
        k = rel + 3
        ho, wo = -(-h // rel), -(-w // rel)
        f += 2 * b * c * ho * wo * c_in * k * k + b * c * ho * wo
        if n:
            ks = stride + 3
            hs, ws = -(-H // stride), -(-W // stride)
            assert (hs, ws) == (ho, wo)
            f += n * (2 * b * c * ho * wo * 3 * ks * ks + b * c * ho * wo)
            f += n * b * c * ho * wo * (1 + 1 + 5 + 2)
        blocks = cfg.blocks_per_stage[s - 1]
        f += 2 * blocks * block_flops(b, c, ho, wo, cfg.attn_reduction[s - 1], cfg.heads[s - 1], cfg.mlp_ratio)
        f += carm_flops(b, c, ho, wo, cfg.carm)
        f += ffm_flops(b, c, ho, wo)
        dims.append((c, ho, wo))
        h, w, c_in = ho, wo, c
    d = cfg.decoder_dim
    _, h1, w1 = dims[0]
    for c, hs, ws in dims:
        f += lin(b * hs * ws, c, d)
        if (hs, ws) != (h1, w1):
            f += 7 * b * d * h1 * w1
    f += lin(b * h1 * w1, 4 * d, d) + 5 * b * h1 * w1 * d + lin(b * h1 * w1, d, cfg.classes)
    if (h1, w1) != (H, W):
        f += 7 * b * cfg.classes * H * W
    return f


def analytic_tiny_params(cfg):
    def lin_p(i, o, bias=True):
        return i * o + (o if bias else 0)

    total = 0
    c_prev = 3
    for s, (c, stride) in enumerate(zip(cfg.stage_channels, cfg.stage_strides), start=1):
        rel = stride if s == 1 else stride // cfg.stage_strides[s - 2]
        total += c * c_prev * (rel + 3) ** 2 + c + c * 3 * (stride + 3) ** 2 + c
        r, hid = cfg.attn_reduction[s - 1], c * cfg.mlp_ratio
        blk = 2 * c + lin_p(c, c) + lin_p(c, 2 * c) + lin_p(c, c) + 2 * c
        if r > 1:
            blk += c * c * r * r + c + 2 * c
        blk += lin_p(c, hid) + hid * 9 + hid + lin_p(hid, c)
        total += 2 * cfg.blocks_per_stage[s - 1] * blk
        c2 = cfg.carm.embed_mult * c
        total += lin_p(c, c2) + 2 * c2 + 3 * c2 * c2 + 2 * lin_p(c2, c2) + lin_p(c2, c)
        total += cfg.carm.local_layers * (c * c * 27 + c)
        total += lin_p(2 * c, c) + lin_p(2 * c, c) + lin_p(c, c)
        c_prev = c
    d = cfg.decoder_dim
    total += sum(lin_p(c, d) for c in cfg.stage_channels) + lin_p(4 * d, d) + lin_p(d, cfg.classes)
    return total


# ---------------------------------------------------------------------------


def tiny(**kw):
    return M.ModelConfig.preset("tiny", **kw)


@pytest.mark.parametrize("hw,n", [((64, 64), 9), ((16, 16), 9), ((64, 32), 1), ((32, 64), 17)])
def test_traced_flops_match_analytic_tally(hw, n):
    cfg = tiny(classes=4)
    assert M.trace_flops(cfg, hw, n).total == analytic_model_flops(cfg, hw, n)


@pytest.mark.parametrize("carm", [CarmConfig(embed_mult=1), CarmConfig(local_layers=0),
                                  CarmConfig(parallel=True), CarmConfig(attn_residual=False)])
def test_traced_flops_match_analytic_tally_ablations(carm):
    cfg = tiny(carm=carm)
    assert M.trace_flops(cfg, (32, 32), 5).total == analytic_model_flops(cfg, (32, 32), 5)


def test_tiny_param_count_matches_hand_tally():
    cfg = tiny(classes=14)
    assert M.count_params(cfg) == analytic_tiny_params(cfg)
    assert M.init_model(cfg).param_count() == analytic_tiny_params(cfg)


def test_mitb4_param_count_analytic():
    cfg = M.ModelConfig.preset("mitb4-like")
    assert M.count_params(cfg) == analytic_tiny_params(cfg)


def test_marginal_identical_across_view_counts():
    cfg = tiny()
    marg = {n: M.count_model_flops(cfg, (64, 64), n).marginal_per_view for n in (2, 5, 9, 17)}
    assert len(set(marg.values())) == 1


def test_encoder_shapes_tiny_64():
    state = M.init_model(tiny(classes=4), seed=1)
    center = rng.random((1, 3, 64, 64))
    sais = rng.random((1, 8, 3, 64, 64))
    with T.no_grad():
        feats = M.encoder_forward(state, center, sais)
    assert [f.shape[1:] for f in feats] == [(16, 16, 16), (32, 8, 8), (48, 4, 4), (64, 2, 2)]


def test_no_views_equals_center_only_path():
    state = M.init_model(tiny(classes=3), seed=2)
    center = rng.random((1, 3, 32, 32))
    with T.no_grad():
        a = M.forward(state, center, None)
        b = M.forward(state, center, np.zeros((1, 0, 3, 32, 32)))
    assert a.data.tobytes() == b.data.tobytes()


def test_forward_is_deterministic():
    state = M.init_model(tiny(classes=3), seed=2)
    center, sais = rng.random((2, 3, 32, 32)), rng.random((2, 4, 3, 32, 32))
    with T.no_grad():
        a = M.forward(state, center, sais)
        b = M.forward(state, center, sais)
    assert a.shape == (2, 3, 32, 32)
    assert a.data.tobytes() == b.data.tobytes()


def test_literal_stride_override_runs():
    cfg = tiny(stage_strides=(8, 16, 32, 64))
    state = M.init_model(cfg)
    with T.no_grad():
        out = M.forward(state, rng.random((1, 3, 64, 64)), rng.random((1, 2, 3, 64, 64)))
    assert out.shape == (1, 14, 64, 64)


def test_non_dividing_extent_rejected():
    state = M.init_model(tiny())
    with pytest.raises(DimensionError):
        M.forward(state, rng.random((1, 3, 48, 48)))


@pytest.mark.parametrize("kw", [dict(stage_strides=(4, 4, 16, 32)), dict(stage_channels=(16, 16, 48, 64)),
                                dict(classes=1), dict(heads=(3, 2, 3, 4)), dict(theta="x"),
                                dict(blocks_per_stage=(1, 1, 1))])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        tiny(**kw)


def test_unknown_preset():
    with pytest.raises(ConfigError):
        M.ModelConfig.preset("mitb9")


def _block_params(c, r, ratio):
    specs = M.block_specs("stb.1.0", c, r, ratio)
    return {s.pid: init_param(s, 4) for s in specs}


def test_block_shape_and_stochastic_attention():
    params = _block_params(16, 4, 4)
    with record_attention() as log:
        y = M.transformer_block_forward(T.Tensor(rng.normal(size=(1, 16, 8, 8))), params, "stb.1.0", 2, 4)
    assert y.shape == (1, 16, 8, 8)
    probs = log[0][1]
    assert probs.shape == (1, 2, 64, 4)
    assert np.abs(probs.sum(-1) - 1).max() <= 1e-9


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_block_gradient(seed):
    g = np.random.default_rng(seed)
    params = _block_params(4, 2, 2)
    for p in params.values():
        p.data = p.data + 0.1 * g.normal(size=p.shape)  # move norms off their identity init
    x = g.normal(size=(1, 4, 4, 4))
    r = g.normal(size=x.shape)
    loss = lambda p: T.sum_(T.mul(M.transformer_block_forward(T.Tensor(x), p, "stb.1.0", 2, 2, 2), T.Tensor(r)))
    errs = check_param_grads(loss, params)
    assert max(errs.values()) <= 1e-4, max(errs, key=errs.get)


def _ffm_params(c):
    return {s.pid: init_param(s, 6) for s in M.ffm_specs(1, c)}


def test_ffm_gate_forced_open_equals_merge():
    params = _ffm_params(4)
    params["ffm.1.gate.fc2.w"] = T.Tensor(np.zeros((4, 4)))
    params["ffm.1.gate.fc2.b"] = T.Tensor(np.full(4, 50.0))
    a, s = rng.normal(size=(2, 4, 3, 3)), rng.normal(size=(2, 4, 3, 3))
    out = M.ffm_forward(T.Tensor(a), T.Tensor(s), params, 1).data
    cat = np.concatenate([a, s], axis=1).transpose(0, 2, 3, 1)
    merged = (cat.reshape(-1, 8) @ params["ffm.1.merge.w"].data + params["ffm.1.merge.b"].data)
    assert np.array_equal(out, merged.reshape(2, 3, 3, 4).transpose(0, 3, 1, 2))


def test_ffm_zero_inputs_bias_free():
    params = _ffm_params(4)
    params["ffm.1.merge.b"] = T.Tensor(np.zeros(4))
    z = T.Tensor(np.zeros((1, 4, 2, 2)))
    assert not M.ffm_forward(z, z, params, 1).data.any()
    with pytest.raises(DimensionError):
        M.ffm_forward(z, T.Tensor(np.zeros((1, 4, 2, 3))), params, 1)


def test_ffm_gradient():
    params = _ffm_params(3)
    a, s = rng.normal(size=(1, 3, 2, 2)), rng.normal(size=(1, 3, 2, 2))
    r = rng.normal(size=a.shape)
    loss = lambda p: T.sum_(T.mul(M.ffm_forward(T.Tensor(a), T.Tensor(s), p, 1), T.Tensor(r)))
    assert max(check_param_grads(loss, params).values()) <= 1e-4


def _decoder_params(cfg):
    return {k: v for k, v in M.init_model(cfg, seed=3).params.items() if k.startswith("decoder.")}


def _features(cfg, hw, const=None):
    out = []
    for c, s in zip(cfg.stage_channels, cfg.stage_strides):
        shape = (1, c, hw[0] // s, hw[1] // s)
        out.append(T.Tensor(np.full(shape, const) if const is not None else rng.normal(size=shape)))
    return out


def test_decode_shape_and_constant_input():
    cfg = tiny(classes=2)
    params = _decoder_params(cfg)
    y = M.decode(_features(cfg, (64, 64)), params, cfg, (64, 64))
    assert y.shape == (1, 2, 64, 64)
    yc = M.decode(_features(cfg, (64, 64), const=0.7), params, cfg, (64, 64)).data
    assert np.abs(yc - yc[:, :, :1, :1]).max() <= 1e-12
    with pytest.raises(DimensionError):
        M.decode(_features(cfg, (64, 64))[:3], params, cfg, (64, 64))


def test_decode_gradient():
    cfg = M.ModelConfig(stage_channels=(4, 8, 12, 16), heads=(1, 1, 1, 1), decoder_dim=3, classes=2)
    params = {k: T.Tensor(v.data, requires_grad=True) for k, v in _decoder_params(cfg).items()}
    feats = [f.data for f in _features(cfg, (32, 32))]
    r = rng.normal(size=(1, 2, 32, 32))
    loss = lambda p: T.sum_(T.mul(M.decode([T.Tensor(f) for f in feats], p, cfg, (32, 32)), T.Tensor(r)))
    assert max(check_param_grads(loss, params).values()) <= 1e-4


def test_init_same_seed_byte_identical_and_seed_sensitive():
    a, b, c = M.init_model(tiny(), 3), M.init_model(tiny(), 3), M.init_model(tiny(), 4)
    assert list(a.params) == list(b.params)
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)
    assert any(a.params[k].data.tobytes() != c.params[k].data.tobytes() for k in a.params)


def test_param_ids_unique_and_named():
    ids = [s.pid for s in M.param_specs(tiny())]
    assert len(ids) == len(set(ids))
    for pid in ("safm.1.center.w", "safm.4.sai.w", "carm.2.q.w", "stb.1.0.attn.q.w", "atb.3.0.ffn.dw.w",
                "ffm.4.merge.w", "decoder.cls.w"):
        assert pid in ids
    assert sum(1 for p in ids if p.startswith("safm.1.sai.")) == 2


def test_checkpoint_round_trip(tmp_path):
    state = M.init_model(tiny(classes=5, carm=CarmConfig(local_layers=1)), seed=9, dtype=np.float32)
    state.step = 17
    path = tmp_path / "m.oafw"
    M.save_checkpoint(state, path)
    back = M.load_checkpoint(path)
    assert back.config == state.config and back.step == 17
    for k, p in state.params.items():
        assert back.params[k].data.dtype == p.data.dtype
        assert back.params[k].data.tobytes() == p.data.tobytes()
    assert path.read_bytes()[:5] == b"OAFW1"
    M.save_checkpoint(back, tmp_path / "again.oafw")
    assert (tmp_path / "again.oafw").read_bytes() == path.read_bytes()


def test_checkpoint_corruption_detected(tmp_path):
    state = M.init_model(tiny(), seed=0)
    path = tmp_path / "m.oafw"
    M.save_checkpoint(state, path)
    raw = bytearray(path.read_bytes())
    bad = tmp_path / "bad.oafw"
    bad.write_bytes(b"XXXXX" + raw[5:])
    with pytest.raises(FormatError, match="magic"):
        M.load_checkpoint(bad)
    flipped = raw.copy()
    flipped[5 + 32 + 4 + 10] ^= 1  # inside the config JSON
    bad.write_bytes(bytes(flipped))
    with pytest.raises(FormatError):
        M.load_checkpoint(bad)
    bad.write_bytes(bytes(raw[:-3]))
    with pytest.raises(FormatError, match="truncated"):
        M.load_checkpoint(bad)
    with pytest.raises(FormatError):
        M.load_checkpoint(path, config=tiny(classes=3))
