import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densebird.layers import Dense, finite_difference_check
from densebird.model import (
    ArchConfig,
    CheckpointError,
    Model,
    ModelHead,
    build_model,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)

F64 = np.float64


def tiny(block_type="dense", **kw):
    base = dict(block_type=block_type, n_blocks=2, layers_per_block=3, initial_filters=4,
                growth_rate=3, input_height=12, input_width=8)
    base.update(kw)
    return ArchConfig(**base)


def batch(cfg, n=3, seed=0):
    return np.random.default_rng(seed).standard_normal((n, 1, *cfg.input_shape)).astype(np.float32)


def expected_param_count(cfg: ArchConfig) -> int:
    """Count from the topology rules alone, without building anything."""
    total = 9 * cfg.initial_filters
    ch = cfg.initial_filters
    for _ in range(cfg.n_blocks):
        for _ in range(cfg.layers_per_block):
            total += 2 * ch + 9 * ch * cfg.unit_width
            ch = ch + cfg.unit_width if cfg.block_type == "dense" else cfg.unit_width
        total += ch * ch + (2 * ch if cfg.transition_norm else 0)
    return total + 2 * ch + 2


# --- shapes and counts -----------------------------------------------------


def test_dense_block_output_channels():
    m = build_model(tiny(initial_filters=5, growth_rate=7, layers_per_block=5, n_blocks=1))
    assert m.blocks[0].out_channels == 5 + 5 * 7


def test_small_param_counts():
    assert Dense(8, 2).params.size() == 18
    m = build_model(tiny(initial_filters=16))
    assert m.stem.params.size() == 144


@pytest.mark.parametrize("block_type", ["dense", "plain", "residual"])
@pytest.mark.parametrize("norm", [True, False])
def test_param_count_matches_topology(block_type, norm):
    cfg = tiny(block_type, transition_norm=norm)
    assert build_model(cfg).param_count() == expected_param_count(cfg)


def test_default_config_param_budget():
    n = build_model().param_count()
    assert n == expected_param_count(ArchConfig())
    assert 310_000 <= n <= 345_000


def test_running_stats_not_counted():
    m = build_model(tiny())
    assert all("running" not in k for p in m.params for k in p.values)
    assert any(k.endswith("running_mean") for k in m.state_dict())


def test_config_validation():
    with pytest.raises(ValueError):
        ArchConfig(n_blocks=0)
    with pytest.raises(ValueError):
        ArchConfig(block_type="tree")
    with pytest.raises(ValueError, match="residual"):
        ArchConfig(block_type="residual", initial_filters=8, block_filters=12)
    with pytest.raises(ValueError):
        ArchConfig(n_classes=3)


def test_config_text_roundtrip():
    cfg = tiny("residual", block_filters=4, bn_momentum=0.2, transition_norm=False)
    assert ArchConfig.from_text(cfg.to_text()) == cfg


# --- forward behaviour -----------------------------------------------------


@pytest.mark.parametrize("block_type", ["dense", "plain", "residual"])
def test_untrained_probabilities(block_type):
    cfg = tiny(block_type)
    m = build_model(cfg, seed=3)
    p = m.forward(batch(cfg), mode="train")
    assert p.shape == (3, 2)
    assert np.all((p > 0) & (p < 1))
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)


def test_identical_images_identical_rows():
    cfg = tiny()
    m = build_model(cfg)
    x = np.repeat(batch(cfg, 1), 2, axis=0)
    m.forward(batch(cfg, 4), mode="train")
    p = m.forward(x)
    np.testing.assert_array_equal(p[0], p[1])


def test_inference_is_repeatable():
    cfg = tiny()
    m = build_model(cfg)
    m.forward(batch(cfg, 4, 1), mode="train")
    x = batch(cfg, 3, 2)
    np.testing.assert_array_equal(m.forward(x), m.forward(x))


def test_inference_before_training_is_an_error():
    cfg = tiny()
    with pytest.raises(RuntimeError):
        build_model(cfg).forward(batch(cfg))


def test_inference_buffers_are_released():
    cfg = tiny()
    m = build_model(cfg)
    m.forward(batch(cfg, 4), mode="train")
    from densebird.train import predict_proba

    p = predict_proba(m, batch(cfg, 3)[:, 0])
    assert m.stem._x is None and m.blocks[0].units[0].bn._cache is None
    np.testing.assert_array_equal(predict_proba(m, batch(cfg, 3)[:, 0]), p)


def test_input_shape_checked():
    m = build_model(tiny())
    with pytest.raises(ValueError):
        m.forward(np.zeros((1, 1, 5, 5), dtype=np.float32), mode="train")


def test_build_is_deterministic():
    a, b = build_model(tiny(), seed=7), build_model(tiny(), seed=7)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb
        np.testing.assert_array_equal(va, vb)
    c = build_model(tiny(), seed=8)
    assert not np.array_equal(a.stem.params.values["weight"], c.stem.params.values["weight"])


# --- wiring ----------------------------------------------------------------


def _block_input(seed=0, ch=4):
    return np.random.default_rng(seed).standard_normal((2, ch, 6, 5))


def test_dense_wiring_every_earlier_output_matters():
    m = build_model(tiny(layers_per_block=4), dtype=F64)
    block = m.blocks[0]
    x = _block_input()
    full = block.forward(x, train=True)
    n_units = len(block.units)
    bounds = np.cumsum([0] + block._sizes)
    last = slice(bounds[-2], bounds[-1])
    for k in range(1, n_units):
        ablated = block.forward(x, train=True, ablate=(k,))
        # the final unit's maps change when an earlier unit is silenced
        assert not np.allclose(ablated[:, last], full[:, last]), k


def test_plain_wiring_only_adjacent_matters():
    m = build_model(tiny("plain", layers_per_block=4), dtype=F64)
    block = m.blocks[0]
    x = _block_input()
    full = block.forward(x, train=True)
    for k in range(1, len(block.units) - 1):
        ablated = block.forward(x, train=True, ablate=(k,))
        # silencing unit k only reaches the output via unit k+1's own input
        assert not np.allclose(ablated, full)
    # x_i depends on x_{i-1} alone: recompute the last unit from the penultimate output
    hist = [x]
    for u in block.units:
        hist.append(u.forward(hist[-1], train=True))
    np.testing.assert_array_equal(block.units[-1].forward(hist[-2], train=True), full)


def test_residual_with_zero_branches_is_identity():
    m = build_model(tiny("residual"), dtype=F64)
    block = m.blocks[0]
    for u in block.units:
        u.conv.params.values["weight"][:] = 0
    x = _block_input()
    np.testing.assert_array_equal(block.forward(x, train=True), x)


# --- gradients -------------------------------------------------------------


@pytest.mark.parametrize("block_type", ["dense", "plain", "residual"])
@pytest.mark.parametrize("norm", [True, False])
def test_end_to_end_gradients(block_type, norm):
    cfg = ArchConfig(block_type=block_type, n_blocks=2, layers_per_block=2, initial_filters=3,
                     growth_rate=2, input_height=8, input_width=6, transition_norm=norm)
    m = Model(cfg, seed=1, dtype=F64)
    x = np.random.default_rng(1).standard_normal((3, 1, 8, 6))
    report = finite_difference_check(ModelHead(m, [0, 1, 1]), x)
    assert report.passed, str(report)


def test_loss_and_grads_zeroes_first():
    cfg = tiny()
    m = build_model(cfg)
    x, y = batch(cfg), np.array([0, 1, 0])
    m.loss_and_grads(x, y)
    g1 = m.head.params.grads["weight"].copy()
    m.loss_and_grads(x, y)
    np.testing.assert_allclose(m.head.params.grads["weight"], g1, rtol=1e-5)


# --- checkpoints -----------------------------------------------------------


def _trained(cfg, seed=0):
    m = build_model(cfg, seed=seed)
    m.forward(batch(cfg, 4, 9), mode="train")
    return m


@pytest.mark.parametrize("block_type", ["dense", "plain", "residual"])
def test_checkpoint_roundtrip_bit_exact(tmp_path, block_type):
    cfg = tiny(block_type)
    m = _trained(cfg)
    save_checkpoint(m, tmp_path / "m.ckpt", valid_auc=0.875, epoch=4)
    ck = read_checkpoint(tmp_path / "m.ckpt")
    assert ck.config == cfg
    assert ck.config.block_type == block_type
    assert ck.valid_auc == 0.875 and ck.epoch == 4
    m2 = load_checkpoint(tmp_path / "m.ckpt")
    x = batch(cfg, 5, 3)
    np.testing.assert_array_equal(m.forward(x), m2.forward(x))
    for k, v in m.state_dict().items():
        np.testing.assert_array_equal(ck.state[k], v)


def test_checkpoint_header(tmp_path):
    save_checkpoint(_trained(tiny()), tmp_path / "m.ckpt")
    blob = (tmp_path / "m.ckpt").read_bytes()
    assert blob[:8] == b"BADCKPT1"
    assert int.from_bytes(blob[8:12], "little") == 1


def test_truncated_checkpoint_fails(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(_trained(tiny()), p)
    blob = p.read_bytes()
    for cut in (5, 30, len(blob) // 2, len(blob) - 1):
        p.write_bytes(blob[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(p)


def test_bad_version_and_magic(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(_trained(tiny()), p)
    blob = bytearray(p.read_bytes())
    blob[8] = 99
    p.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(p)
    p.write_bytes(b"NOTACKPT" + bytes(blob[8:]))
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_state_mismatch_rejected():
    a = build_model(tiny())
    b = build_model(tiny(growth_rate=5))
    with pytest.raises(CheckpointError):
        a.load_state(b.state_dict())


@settings(max_examples=10, deadline=None)
@given(st.sampled_from(["dense", "plain", "residual"]), st.integers(1, 3), st.integers(1, 3),
       st.integers(1, 6), st.integers(1, 6), st.booleans())
def test_param_count_reproducible_from_config(block_type, n_blocks, layers, initial, growth, norm):
    cfg = ArchConfig(block_type=block_type, n_blocks=n_blocks, layers_per_block=layers,
                     initial_filters=initial, growth_rate=growth, transition_norm=norm)
    assert build_model(cfg).param_count() == expected_param_count(cfg)
