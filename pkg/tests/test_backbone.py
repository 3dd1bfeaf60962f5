import numpy as np
import pytest
from util_grad import check_op

from modalcast.backbone import (TEMPORAL, TEXTUAL, BackboneConfig, attach_lora,
                                causal_mask, forward_branch, load_backbone,
                                make_branch, manifest, multi_head_attention,
                                random_backbone, save_backbone)
from modalcast.container import write_container
from modalcast.errors import (CapacityError, ConfigError, FormatError,
                              ManifestError, ShapeError, UsageError)
from modalcast.tensor import Tape, Tensor, backward, tsum


def small_config(layers=2, width=16, heads=4, **kw):
    return BackboneConfig(layers=layers, width=width, heads=heads,
                          max_positions=32, vocab_size=40, **kw)


def test_config_validation():
    with pytest.raises(ConfigError):
        BackboneConfig(layers=0)
    with pytest.raises(ConfigError):
        BackboneConfig(width=10, heads=3)


def test_save_load_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    bb = random_backbone(small_config(), rng)
    path = tmp_path / "bb.calf"
    save_backbone(bb, path)
    loaded = load_backbone(path, small_config())
    for name, tensor in bb.frozen_tensors().items():
        got = loaded.frozen_tensors()[name]
        assert got.data.tobytes() == tensor.data.tobytes(), name
        assert not got.requires_grad
    assert loaded.load_report.missing == [] and loaded.load_report.warnings == []


def test_truncated_container_rejected(tmp_path):
    rng = np.random.default_rng(0)
    bb = random_backbone(small_config(), rng)
    path = tmp_path / "bb.calf"
    save_backbone(bb, path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(FormatError):
        load_backbone(path, small_config())


def test_prefix_loading_uses_leading_blocks_and_warns(tmp_path):
    rng = np.random.default_rng(1)
    big = random_backbone(small_config(layers=6), rng)
    path = tmp_path / "bb6.calf"
    save_backbone(big, path)
    with pytest.warns(UserWarning, match="first 2"):
        small = load_backbone(path, small_config(layers=2))
    # tensor-name audit: exactly blocks 0 and 1 were taken, bit-exactly
    for i in (0, 1):
        name = f"block.{i}.attn.q_weight"
        np.testing.assert_array_equal(small.frozen_tensors()[name].data,
                                      big.frozen_tensors()[name].data)
    extra_blocks = {n.split(".")[1] for n in small.load_report.extra if n.startswith("block.")}
    assert extra_blocks == {"2", "3", "4", "5"}


def test_missing_tensor_named(tmp_path):
    rng = np.random.default_rng(2)
    bb = random_backbone(small_config(), rng)
    tensors = {n: t.data for n, t in bb.frozen_tensors().items()}
    del tensors["block.1.mlp.fc_weight"]
    path = tmp_path / "bb.calf"
    write_container(path, tensors)
    with pytest.raises(ManifestError, match="block.1.mlp.fc_weight"):
        load_backbone(path, small_config())


def test_shape_mismatch_is_config_error(tmp_path):
    rng = np.random.default_rng(3)
    bb = random_backbone(small_config(), rng)
    path = tmp_path / "bb.calf"
    save_backbone(bb, path)
    wrong = small_config()
    wrong.max_positions = 64
    with pytest.raises(ConfigError, match="pos_embedding"):
        load_backbone(path, wrong)


def test_manifest_covers_all_roles():
    names = manifest(small_config())
    assert "token_embedding" in names and "pos_embedding" in names
    assert sum(1 for n in names if n.startswith("block.0.")) == 16
    assert len(names) == 2 + 2 * 16


# ---------------------------------------------------------------------------
# branch forward
# ---------------------------------------------------------------------------

def make_pair(seed=0, horizon=5, dtype=np.float64):
    rng = np.random.default_rng(seed)
    bb = random_backbone(small_config(), rng, dtype=dtype)
    text = make_branch(TEXTUAL, bb, horizon, rng, dtype=dtype)
    time = make_branch(TEMPORAL, bb, horizon, rng, dtype=dtype)
    return bb, text, time


def test_forward_shapes():
    bb, _, time = make_pair()
    tokens = Tensor(np.random.default_rng(1).standard_normal((3, 16)))
    trace = forward_branch(bb, time, tokens)
    assert len(trace.features) == bb.config.layers
    assert all(f.shape == (3, 16) for f in trace.features)
    assert trace.output.shape == (3, 5)
    assert time.forward_count == 1


def test_forward_batched_matches_single():
    bb, _, time = make_pair()
    rng = np.random.default_rng(2)
    batch = rng.standard_normal((4, 3, 16))
    stacked = forward_branch(bb, time, Tensor(batch))
    for i in range(4):
        single = forward_branch(bb, time, Tensor(batch[i]))
        np.testing.assert_allclose(stacked.output.data[i], single.output.data,
                                   rtol=1e-10, atol=1e-12)


def test_forward_deterministic_bitwise():
    bb, _, time = make_pair()
    tokens = Tensor(np.random.default_rng(3).standard_normal((3, 16)))
    a = forward_branch(bb, time, tokens)
    b = forward_branch(bb, time, tokens)
    assert a.output.data.tobytes() == b.output.data.tobytes()
    assert all(x.data.tobytes() == y.data.tobytes()
               for x, y in zip(a.features, b.features))


def test_forward_width_and_capacity_errors():
    bb, _, time = make_pair()
    with pytest.raises(ShapeError):
        forward_branch(bb, time, Tensor(np.zeros((3, 8))))
    with pytest.raises(CapacityError):
        forward_branch(bb, time, Tensor(np.zeros((33, 16))))


def test_causal_flag_changes_output_noncausal_flag_exists():
    rng = np.random.default_rng(4)
    causal = random_backbone(small_config(), np.random.default_rng(7))
    full = random_backbone(small_config(causal_mask=False), np.random.default_rng(7))
    tokens = Tensor(rng.standard_normal((3, 16)).astype(np.float32))
    tr_c = forward_branch(causal, make_branch(TEMPORAL, causal, 5, np.random.default_rng(8)),
                          tokens)
    tr_f = forward_branch(full, make_branch(TEMPORAL, full, 5, np.random.default_rng(8)),
                          tokens)
    assert not np.allclose(tr_c.output.data, tr_f.output.data)


# ---------------------------------------------------------------------------
# LoRA
# ---------------------------------------------------------------------------

def test_lora_zero_init_is_identity():
    bb, _, time = make_pair()
    tokens = Tensor(np.random.default_rng(5).standard_normal((3, 16)))
    baseline = forward_branch(bb, time, tokens)
    attach_lora(time, bb, r=4, rng=np.random.default_rng(6))
    adapted = forward_branch(bb, time, tokens)
    assert np.abs(adapted.output.data - baseline.output.data).max() <= 1e-12
    for feat_a, feat_b in zip(adapted.features, baseline.features):
        assert np.abs(feat_a.data - feat_b.data).max() <= 1e-12


def test_lora_rejects_textual_branch_and_rank_zero():
    bb, text, time = make_pair()
    with pytest.raises(UsageError):
        attach_lora(text, bb)
    with pytest.raises(UsageError):
        attach_lora(time, bb, r=0)
    with pytest.raises(UsageError):
        attach_lora(time, bb, targets=("q", "zz"))


def test_lora_parameter_count_arithmetic():
    bb, _, time = make_pair()
    r, targets = 4, ("q", "v")
    attach_lora(time, bb, targets=targets, r=r)
    added = sum(a.a.size + a.b.size for a in time.adapters.values())
    m, layers = bb.config.width, bb.config.layers
    assert added == layers * len(targets) * 2 * m * r


def test_textual_branch_never_touches_adapters():
    bb, text, _ = make_pair()
    assert text.adapters == {}
    tokens = Tensor(np.random.default_rng(7).standard_normal((3, 16)))
    forward_branch(bb, text, tokens)  # would KeyError if it consulted adapters


def test_frozen_weights_have_no_grad_after_backward():
    bb, _, time = make_pair()
    attach_lora(time, bb, r=2, rng=np.random.default_rng(8))
    tokens = Tensor(np.random.default_rng(9).standard_normal((3, 16)))
    with Tape():
        trace = forward_branch(bb, time, tokens)
        backward(tsum(trace.output))
    for name, t in bb.frozen_tensors().items():
        assert t.grad is None, name
    assert time.positional.grad is not None
    assert all(ad.a.grad is not None and ad.b.grad is not None
               for ad in time.adapters.values())


def test_branch_gradcheck_through_blocks():
    bb, _, time = make_pair(dtype=np.float64)
    attach_lora(time, bb, r=2, rng=np.random.default_rng(10), dtype=np.float64)
    # seed B away from zero so its gradient path is exercised
    for ad in time.adapters.values():
        ad.b.data = np.random.default_rng(11).standard_normal(ad.b.shape) * 0.01
    tokens = Tensor(np.random.default_rng(12).standard_normal((3, 16)))
    adapter = time.adapters[(0, "q")]
    params = [time.positional, time.head_w, adapter.a, adapter.b]

    def build():
        trace = forward_branch(bb, time, tokens)
        return tsum(trace.output * trace.output)

    check_op(build, params, coords=6, rng=np.random.default_rng(13))


def test_multi_head_attention_prob_rows_sum_to_one():
    rng = np.random.default_rng(14)
    q = Tensor(rng.standard_normal((5, 16)))
    k = Tensor(rng.standard_normal((7, 16)))
    v = Tensor(rng.standard_normal((7, 16)))
    out, probs = multi_head_attention(q, k, v, heads=4)
    assert out.shape == (5, 16) and probs.shape == (4, 5, 7)
    np.testing.assert_allclose(probs.data.sum(axis=-1), 1.0, atol=1e-6)


def test_causal_mask_blocks_future():
    rng = np.random.default_rng(15)
    q = Tensor(rng.standard_normal((4, 8)))
    _, probs = multi_head_attention(q, q, q, heads=2, mask=causal_mask(4))
    upper = np.triu(np.ones((4, 4)), k=1).astype(bool)
    assert (np.abs(probs.data[:, upper]) == 0.0).all()
