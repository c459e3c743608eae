import numpy as np
import pytest

from conftest import TINY
from ianet.encoders import ConfigError, encode_pair
from ianet.model import (
    CheckpointError,
    IANet,
    ModelConfig,
    expected_param_count,
    iib_forward,
    load_checkpoint,
    save_checkpoint,
    trunk_forward,
)
from ianet.numerics import Tensor, grad_check, mul, sum_all


def _inputs(rng, cfg, T=5, N=4):
    return rng.normal(size=(T, cfg.d_in_video)), rng.normal(size=(N, cfg.d_in_query))


@pytest.mark.parametrize("cfg", [
    ModelConfig(D=64, L=2),
    ModelConfig(),
    TINY,
    TINY.replace(K=0, L=0),
    TINY.replace(share_pads=True, L=3),
])
def test_parameter_count_formula(cfg):
    assert IANet(cfg).num_params() == expected_param_count(cfg)


def test_known_parameter_count():
    assert expected_param_count(ModelConfig(D=64, L=2)) == 216530


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(D=7)
    with pytest.raises(ConfigError):
        ModelConfig(D=8, H=3)
    with pytest.raises(ConfigError):
        ModelConfig(K=-1)
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"D": 8, "depth": 2})


def test_config_round_trip():
    cfg = TINY.replace(widths=(3, 5))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_blocks_preserve_shapes(rng, tiny_net64):
    v, q = _inputs(rng, TINY, T=7, N=3)
    out = tiny_net64.trunk(v, q, inspect=True)
    assert out.V.shape == (7, 8) and out.Q.shape == (3, 8)


def test_zero_blocks_returns_encoder_output(rng):
    net = IANet(TINY.replace(L=0)).astype(np.float64)
    v, q = _inputs(rng, TINY)
    pair = encode_pair(Tensor(v), Tensor(q), net.encoder)
    out = net.trunk(v, q)
    assert np.array_equal(out.V.data, pair.V.data) and np.array_equal(out.Q.data, pair.Q.data)


def test_two_blocks_compose(rng, tiny_net64):
    v, q = _inputs(rng, TINY)
    pair = encode_pair(Tensor(v), Tensor(q), tiny_net64.encoder)
    V, Q, _ = iib_forward(pair.V, pair.Q, tiny_net64.blocks[0])
    V, Q, _ = iib_forward(V, Q, tiny_net64.blocks[1])
    out = trunk_forward(tiny_net64, v, q)
    assert np.array_equal(out.V.data, V.data) and np.array_equal(out.Q.data, Q.data)


def test_dumps_only_when_inspecting(rng, tiny_net64):
    v, q = _inputs(rng, TINY)
    assert tiny_net64.trunk(v, q).dumps == []
    dumps = tiny_net64.trunk(v, q, inspect=True).dumps
    assert len(dumps) == TINY.L
    for d in dumps:
        assert d.inter.A_V.shape == (5 + TINY.K, 4 + TINY.K)
        assert d.intra_video.shape == (5, 5) and d.intra_query.shape == (4, 4)


def test_forward_is_deterministic(rng):
    v, q = _inputs(rng, TINY)
    a = IANet(TINY).forward(v, q)
    b = IANet(TINY).forward(v, q)
    assert np.array_equal(a.scores.cs.data, b.scores.cs.data)


def test_open_gates_everywhere_collapse_trunk_to_encoder(rng, tiny_net64):
    for block in tiny_net64.blocks:
        for calib in (block.inter.calib_video, block.inter.calib_query,
                      block.intra.calib_video, block.intra.calib_query):
            calib.b_Z.data[:] = 1e4
    v, q = _inputs(rng, TINY)
    pair = encode_pair(Tensor(v), Tensor(q), tiny_net64.encoder)
    out = tiny_net64.trunk(v, q)
    assert np.array_equal(out.V.data, pair.V.data) and np.array_equal(out.Q.data, pair.Q.data)


def test_shared_pads_are_one_pair_of_params():
    net = IANet(TINY.replace(share_pads=True, L=3))
    pads = {id(b.inter.pad_video) for b in net.blocks}
    assert len(pads) == 1
    assert sum("pad" in name for name, _ in net.named_params()) == 2


def test_trunk_gradient_of_scalar_readout(rng, tiny_net64):
    v, q = _inputs(rng, TINY)
    wv, wq = rng.normal(size=(5, 8)), rng.normal(size=(4, 8))

    def f():
        out = tiny_net64.trunk(v, q)
        return sum_all(mul(out.V, Tensor(wv))) + sum_all(mul(out.Q, Tensor(wq)))

    params = tiny_net64.encoder.params()[:3] + tiny_net64.blocks[1].params()
    report = grad_check(f, params, oracle_dtype=np.longdouble)
    assert max(e.max_rel_error for e in report) < 1e-4


# --- checkpoints --------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, rng):
    net = IANet(TINY)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, net)
    loaded = load_checkpoint(path, expected=TINY)
    for (n1, p1), (n2, p2) in zip(net.named_params(), loaded.named_params()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)
    v, q = _inputs(rng, TINY)
    assert np.array_equal(net.forward(v, q).scores.cs.data, loaded.forward(v, q).scores.cs.data)


def test_checkpoint_header_layout(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, IANet(TINY))
    raw = path.read_bytes()
    assert raw[:4] == b"IANC"
    assert int.from_bytes(raw[4:8], "little") == 1


def test_checkpoint_config_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, IANet(TINY))
    with pytest.raises(ConfigError, match="lr"):
        load_checkpoint(path, expected=TINY.replace(lr=1e-3))


@pytest.mark.parametrize("damage", ["magic", "truncate", "short"])
def test_corrupt_checkpoint(tmp_path, damage):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, IANet(TINY))
    raw = path.read_bytes()
    raw = {"magic": b"XXXX" + raw[4:], "truncate": raw[:-10], "short": raw[:10]}[damage]
    path.write_bytes(raw)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
