import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptmerge.model import (AdapterModule, Backbone, BackboneBlock, Checkpoint, MissingAdapterError,
                              TaskHead, UnifiedHead, block_forward_with_adapter, checksum,
                              expand_unified_head, forward_single_pass, load_checkpoint, new_task_head,
                              save_checkpoint)
from adaptmerge.numerics import Parameter, Tensor, cross_entropy, grad_check, mul, tensor_sum
from oracles import conv2d_loops


def relu_np(x):
    return np.maximum(x, 0.0)


def maxpool_loops(x):
    n, c, h, w = x.shape
    out = np.empty((n, c, h // 2, w // 2))
    for i in range(h // 2):
        for j in range(w // 2):
            out[:, :, i, j] = x[:, :, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max(axis=(2, 3))
    return out


def block_oracle(block, x):
    return maxpool_loops(relu_np(conv2d_loops(x, block.weight.data, block.bias.data, 1, 1)))


def adapter_oracle(a, h):
    z = relu_np(conv2d_loops(h, a.down_weight.data, a.down_bias.data, 1, 0))
    return conv2d_loops(z, a.up_weight.data, a.up_bias.data, 1, 0)


def randomize(adapter, rng, scale=0.5):
    for p in adapter.parameters():
        p.assign(scale * rng.standard_normal(p.shape))
    return adapter


# --- adapters -------------------------------------------------------------

def test_zero_up_projection_is_identity(rng):
    block = BackboneBlock(1, 2, 8, rng)
    adapter = AdapterModule(1, 8, 4, rng=rng)
    x = Tensor(rng.standard_normal((2, 2, 6, 6)).astype(np.float32))
    np.testing.assert_array_equal(block_forward_with_adapter(block, adapter, x).data, block(x).data)


def test_identity_like_adapter_doubles_positive_activations(rng):
    block = BackboneBlock(1, 1, 3, rng, dtype=np.float64)
    adapter = AdapterModule(1, 3, ratio=1, dtype=np.float64)
    adapter.down_weight.assign(np.eye(3).reshape(3, 3, 1, 1))
    adapter.up_weight.assign(np.eye(3).reshape(3, 3, 1, 1))
    x = Tensor(rng.standard_normal((1, 1, 6, 6)))
    h = block(x).data
    out = block_forward_with_adapter(block, adapter, x).data
    np.testing.assert_allclose(out[h > 0], 2 * h[h > 0])
    np.testing.assert_array_equal(out[h == 0], 0.0)


def test_adapter_matches_composition_oracle(rng):
    block = BackboneBlock(2, 3, 8, rng, dtype=np.float64)
    adapter = randomize(AdapterModule(2, 8, 2, dtype=np.float64), rng)
    x = rng.standard_normal((2, 3, 6, 6))
    h = block_oracle(block, x)
    expected = h + adapter_oracle(adapter, h)
    np.testing.assert_allclose(block_forward_with_adapter(block, adapter, Tensor(x)).data, expected, atol=1e-6)


@pytest.mark.parametrize("channels,ratio", [(16, 3), (10, 4), (8, 0)])
def test_ratio_must_divide_channels(channels, ratio):
    with pytest.raises(ValueError):
        AdapterModule(1, channels, ratio)


def test_adapter_rejects_wrong_block(rng):
    with pytest.raises(ValueError):
        block_forward_with_adapter(BackboneBlock(1, 1, 8, rng), AdapterModule(2, 8), np.zeros((1, 1, 4, 4)))


@pytest.mark.parametrize("c,r", [(16, 4), (128, 4), (32, 8), (12, 1)])
def test_adapter_parameter_count(c, r):
    a = AdapterModule(1, c, r)
    assert a.num_parameters() == c * (c // r) * 2 + (c // r) + c


@settings(max_examples=20, deadline=None)
@given(c_in=st.integers(1, 3), c_exp=st.integers(0, 3), r_exp=st.integers(0, 2), size=st.integers(2, 9),
       n=st.integers(1, 3), seed=st.integers(0, 1000))
def test_adapter_shape_closure(c_in, c_exp, r_exp, size, n, seed):
    r = np.random.default_rng(seed)
    c_out = 4 * 2 ** c_exp
    block = BackboneBlock(1, c_in, c_out, r)
    adapter = randomize(AdapterModule(1, c_out, 2 ** r_exp, rng=r), r)
    x = Tensor(r.standard_normal((n, c_in, size, size)).astype(np.float32))
    assert block_forward_with_adapter(block, adapter, x).shape == block(x).shape


def test_fresh_adapter_down_init_is_small_uniform(rng):
    a = AdapterModule(1, 64, 4, rng=rng)
    assert np.abs(a.down_weight.data).max() <= 1 / 8
    assert np.all(a.up_weight.data == 0) and np.all(a.up_bias.data == 0)


# --- backbone and single pass ---------------------------------------------

def test_desk_backbone_shapes():
    bb = Backbone(1)
    assert bb.num_blocks == 4 and bb.feature_dim == 128
    out = bb(Tensor(np.zeros((2, 1, 32, 32), dtype=np.float32)))
    assert out.shape == (2, 128)


@pytest.mark.parametrize("tasks_done", [1, 3, 5])
def test_single_pass_counts_m_block_executions(rng, tasks_done):
    bb = Backbone(1, (4, 8), seed=0)
    adapters = bb.make_adapters(2)
    head = UnifiedHead(bb.feature_dim)
    for t in range(tasks_done):
        head.expand([2 * t, 2 * t + 1])
    before = bb.block_executions
    logits = forward_single_pass(bb, adapters, head, rng.standard_normal((3, 1, 8, 8)).astype(np.float32))
    assert bb.block_executions - before == bb.num_blocks
    assert logits.shape == (3, 2 * tasks_done)


def test_zero_adapters_match_plain_backbone(rng):
    bb = Backbone(1, (4, 8), seed=3)
    head = UnifiedHead(bb.feature_dim, [0, 1, 2])
    head.weight.assign(rng.standard_normal(head.weight.shape))
    x = rng.standard_normal((2, 1, 8, 8)).astype(np.float32)
    with_adapters = forward_single_pass(bb, bb.make_adapters(2), head, x).data
    plain = head(bb(Tensor(x))).data
    np.testing.assert_array_equal(with_adapters, plain)


def test_single_pass_matches_layerwise_oracle(rng):
    bb = Backbone(2, (4, 8), seed=5, dtype=np.float64)
    adapters = [randomize(a, rng) for a in bb.make_adapters(2)]
    for a in adapters:
        for p in a.parameters():
            p.assign(p.data.astype(np.float64))
    head = UnifiedHead(bb.feature_dim, [3, 7], dtype=np.float64)
    head.weight.assign(rng.standard_normal(head.weight.shape))
    head.bias.assign(rng.standard_normal(2))
    x = rng.standard_normal((2, 2, 8, 8))
    h = x
    for block, a in zip(bb.blocks, adapters):
        h = block_oracle(block, h)
        h = h + adapter_oracle(a, h)
    feats = h.mean(axis=(2, 3))
    expected = feats @ head.weight.data.T + head.bias.data
    np.testing.assert_allclose(forward_single_pass(bb, adapters, head, x).data, expected, atol=1e-6)


def test_missing_adapter_rejected(rng):
    bb = Backbone(1, (4, 8))
    adapters = bb.make_adapters(2)
    head = UnifiedHead(bb.feature_dim, [0])
    x = np.zeros((1, 1, 8, 8), dtype=np.float32)
    with pytest.raises(MissingAdapterError, match="block"):
        forward_single_pass(bb, [adapters[0], None], head, x)
    with pytest.raises(MissingAdapterError):
        forward_single_pass(bb, adapters[:1], head, x)
    with pytest.raises(MissingAdapterError):
        forward_single_pass(bb, None, head, x)
    with pytest.raises(ValueError):
        forward_single_pass(bb, adapters, UnifiedHead(bb.feature_dim), x)


def test_frozen_backbone_is_checksum_stable(rng):
    bb = Backbone(1, (4, 8)).freeze()
    before = checksum(bb.parameters())
    adapters = bb.make_adapters(2)
    for a in adapters:
        randomize(a, rng)
    head = TaskHead(1, bb.feature_dim, [0, 1])
    x = Tensor(rng.standard_normal((4, 1, 8, 8)).astype(np.float32))
    cross_entropy(head(bb(x, adapters)), [0, 1, 2, 0]).backward()
    assert all(p.grad is None for p in bb.parameters())
    assert all(p.grad is not None for a in adapters for p in a.parameters())
    assert checksum(bb.parameters()) == before
    with pytest.raises(ValueError):
        bb.load(bb.state())


# --- heads ----------------------------------------------------------------

@pytest.mark.parametrize("k,width", [(2, 3), (10, 11), (1, 2)])
def test_new_task_head_width(k, width):
    head = new_task_head(128, k)
    assert head.width == width and head.weight.shape == (width, 128)
    assert head.other_index == k


def test_new_task_head_rejects_bad_sizes():
    with pytest.raises(ValueError):
        new_task_head(0, 2)
    with pytest.raises(ValueError):
        new_task_head(16, 0)


def test_task_head_local_labels():
    head = TaskHead(2, 4, [5, 3])
    np.testing.assert_array_equal(head.local_labels(np.array([3, 5, 0, 9])), [1, 0, 2, 2])


def test_head_init_is_zero():
    head = new_task_head(8, 3)
    assert not head.weight.data.any() and not head.bias.data.any()
    u = UnifiedHead(8, [0, 1])
    assert not u.weight.data.any()


def test_expand_copies_old_rows_bitwise(rng):
    head = UnifiedHead(6, [0, 1])
    head.weight.assign(rng.standard_normal((2, 6)))
    head.bias.assign(rng.standard_normal(2))
    old_w, old_b = head.weight.data.copy(), head.bias.data.copy()
    expand_unified_head(head, [4, 5])
    assert head.width == 4 and head.classes == [0, 1, 4, 5]
    assert head.weight.data[:2].tobytes() == old_w.tobytes()
    assert head.bias.data[:2].tobytes() == old_b.tobytes()
    assert not head.weight.data[2:].any()


def test_expand_by_nothing_is_identity(rng):
    head = UnifiedHead(6, [0, 1])
    head.weight.assign(rng.standard_normal((2, 6)))
    w = head.weight
    expand_unified_head(head, [])
    assert head.weight is w and head.width == 2


def test_expand_keeps_old_logits(rng):
    head = UnifiedHead(6, [2, 3])
    head.weight.assign(rng.standard_normal((2, 6)))
    head.bias.assign(rng.standard_normal(2))
    f = Tensor(rng.standard_normal((5, 6)).astype(np.float32))
    before = head(f).data.copy()
    head.expand([0, 1, 8])
    np.testing.assert_array_equal(head(f).data[:, :2], before)


@pytest.mark.parametrize("new", [[1, 4], [4, 4]])
def test_expand_rejects_duplicates(new):
    head = UnifiedHead(6, [0, 1])
    with pytest.raises(ValueError, match="duplicate"):
        head.expand(new)
    assert head.classes == [0, 1]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=6))
def test_head_tables_stay_disjoint(sizes):
    head, start = UnifiedHead(3), 0
    for k in sizes:
        head.expand(list(range(start, start + k)))
        start += k
    assert len(set(head.classes)) == len(head.classes) == sum(sizes) == head.width


# --- gradients through model components ------------------------------------

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_adapter_residual_block(seed):
    r = np.random.default_rng(seed)
    block = BackboneBlock(1, 2, 4, r, dtype=np.float64)
    adapter = randomize(AdapterModule(1, 4, 2, dtype=np.float64), r)
    for p in adapter.parameters():
        p.assign(p.data.astype(np.float64))
    # distinct pre-pool values keep max-pool routing stable under perturbation
    x = Tensor(r.standard_normal((2, 2, 4, 4)))
    target = r.standard_normal((2, 4, 2, 2))
    fn = lambda: tensor_sum(mul(block_forward_with_adapter(block, adapter, x), target))
    assert grad_check(fn, adapter.parameters() + block.parameters()) <= 1e-4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_task_head(seed):
    r = np.random.default_rng(seed)
    head = TaskHead(1, 5, [3, 4], dtype=np.float64)
    head.weight.assign(r.standard_normal(head.weight.shape))
    f = Tensor(r.standard_normal((4, 5)))
    labels = head.local_labels(np.array([3, 4, 9, 3]))
    assert grad_check(lambda: cross_entropy(head(f), labels), head.parameters()) <= 1e-4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_unified_head(seed):
    r = np.random.default_rng(seed)
    head = UnifiedHead(5, [0, 1, 2], dtype=np.float64)
    head.weight.assign(r.standard_normal(head.weight.shape))
    f = Tensor(r.standard_normal((4, 5)))
    labels = r.integers(0, 3, size=4)
    assert grad_check(lambda: cross_entropy(head(f), labels), head.parameters()) <= 1e-4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_composed_adapter_tuning_loss(seed):
    r = np.random.default_rng(seed)
    bb = Backbone(1, (4, 8), seed=seed, dtype=np.float64).freeze()
    adapters = [randomize(a, r, 0.3) for a in bb.make_adapters(2)]
    for a in adapters:
        for p in a.parameters():
            p.assign(p.data.astype(np.float64))
    head = TaskHead(1, 8, [0, 1], dtype=np.float64)
    head.weight.assign(r.standard_normal(head.weight.shape))
    x = Tensor(r.standard_normal((3, 1, 8, 8)))
    labels = head.local_labels(np.array([0, 1, 7]))   # last sample is a replayed "other"
    params = [p for a in adapters for p in a.parameters()] + head.parameters()
    assert grad_check(lambda: cross_entropy(head(bb(x, adapters)), labels), params) <= 1e-4


# --- checkpoint -----------------------------------------------------------

def test_checkpoint_roundtrip_is_byte_idempotent(tmp_path, rng):
    tensors = {"b": rng.standard_normal((2, 3)).astype(np.float32), "a": np.arange(4, dtype=np.float64)}
    ckpt = Checkpoint(tensors, [3, 1, 2], 4, {"note": "x"})
    h1 = save_checkpoint(tmp_path / "one.ckpt", ckpt)
    loaded = load_checkpoint(tmp_path / "one.ckpt")
    h2 = save_checkpoint(tmp_path / "two.ckpt", loaded)
    assert h1 == h2
    assert (tmp_path / "one.ckpt").read_bytes() == (tmp_path / "two.ckpt").read_bytes()
    assert loaded.class_table == [3, 1, 2] and loaded.merge_count == 4
    for k, v in tensors.items():
        assert loaded.tensors[k].dtype == v.dtype
        np.testing.assert_array_equal(loaded.tensors[k], v)


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(p)


def test_parameter_checksum_changes_with_values(rng):
    p = Parameter(rng.standard_normal(3), name="w")
    before = checksum([p])
    p.assign(p.data + 1e-7)
    assert checksum([p]) != before
