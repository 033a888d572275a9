import numpy as np
import pytest

from lcwof import gradcheck
from lcwof.model import (Backbone, CheckpointError, ClassifierHead, DegenerateEmbeddingError, MissingNovelHeadError,
                         ModelState, load_checkpoint, param_hash, save_checkpoint)
from lcwof.numcore import ShapeError


@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_suite_passes(seed):
    rows = gradcheck.run_suite(seed=seed)
    assert [r.name for r in rows] == list(gradcheck.CHECKS)
    bad = [(r.name, r.max_rel_error) for r in rows if not r.passed]
    assert not bad


@pytest.mark.parametrize("name", ["softmax_ce", "backbone", "head_cosine"])
def test_gradcheck_detects_corruption(name):
    rows = {r.name: r for r in gradcheck.run_suite(seed=0, corrupt=name)}
    assert not rows[name].passed
    assert all(r.passed for k, r in rows.items() if k != name)


def test_gradcheck_unknown_name():
    with pytest.raises(KeyError):
        gradcheck.run_suite(corrupt="nope")


def test_backbone_shapes_and_eval_is_pure(rng):
    bb = Backbone.create(5, 7, 3, rng)
    x = rng.normal(size=(4, 5))
    emb, tape = bb.forward(x, train=False)
    assert emb.shape == (4, 3) and tape["act"].min() >= 0
    before = bb.norm.running_mean.copy()
    bb.forward(x, train=False)
    assert np.array_equal(before, bb.norm.running_mean)
    with pytest.raises(ShapeError):
        bb.forward(np.zeros((2, 4)))


def test_frozen_norm_uses_running_stats(rng):
    bb = Backbone.create(4, 6, 3, rng)
    bb.forward(rng.normal(size=(16, 4)), train=True)
    bb.norm.freeze()
    stats = (bb.norm.running_mean.copy(), bb.norm.running_var.copy())
    x = rng.normal(size=(8, 4))
    a = bb.forward(x, train=True)[0]
    b = bb.forward(x, train=False)[0]
    np.testing.assert_allclose(a, b)
    assert np.array_equal(stats[0], bb.norm.running_mean) and np.array_equal(stats[1], bb.norm.running_var)
    for p in bb.params():
        p.zero_grad()
    bb.backward(bb.forward(x, train=True)[1], np.ones((8, 3)))
    assert not bb.norm.gamma.grad.any() and not bb.norm.beta.grad.any()


def test_dropout_needs_rng_only_in_training(rng):
    bb = Backbone.create(4, 6, 3, rng, dropout=0.5)
    bb.forward(np.ones((2, 4)), train=False)
    with pytest.raises(ValueError):
        bb.forward(np.ones((2, 4)), train=True)


@pytest.mark.parametrize("mode", ["no_bias", "bias", "cosine"])
def test_head_modes(mode, rng):
    h = ClassifierHead.create(mode, 4, 6, rng)
    logits = h.logits(rng.normal(size=(3, 6)))
    assert logits.shape == (3, 4)
    if mode == "cosine":
        assert np.abs(logits).max() <= h.temperature + 1e-9
    assert (h.bias is not None) == (mode == "bias")


def test_head_validation(rng):
    with pytest.raises(ValueError):
        ClassifierHead.create("linear", 2, 3, rng)
    h = ClassifierHead.create("cosine", 2, 3, rng)
    with pytest.raises(DegenerateEmbeddingError):
        h.logits(np.zeros((1, 3)))


def test_frozen_rows_receive_no_gradient(rng):
    h = ClassifierHead.create("bias", 5, 3, rng)
    h.frozen_rows = 2
    emb = rng.normal(size=(4, 3))
    logits, cache = h.forward(emb)
    h.backward(cache, np.ones_like(logits))
    assert not h.weights.grad[:2].any() and h.weights.grad[2:].any()
    assert not h.bias.grad[:, :2].any()


def test_extend_keeps_existing_rows(rng):
    h = ClassifierHead.create("bias", 3, 4, rng)
    old = h.weights.value.copy()
    h.extend(2, rng)
    assert h.num_classes == 5 and np.array_equal(h.weights.value[:3], old)
    assert h.bias.shape == (1, 5)


def test_joint_logits_concatenate_base_then_novel(rng):
    m = ModelState.create(4, 3, rng, d_hidden=8, d_emb=5)
    emb = m.embed(rng.normal(size=(2, 4)))
    with pytest.raises(MissingNovelHeadError):
        m.joint_logits(emb)
    m.add_novel_classes(2, rng)
    j = m.joint_logits(emb)
    np.testing.assert_allclose(j[:, :3], m.base_head.logits(emb))
    np.testing.assert_allclose(j[:, 3:], m.novel_head.logits(emb))


def test_snapshot_is_a_copy(rng):
    m = ModelState.create(4, 3, rng, d_hidden=8, d_emb=5)
    m.snapshot()
    h = param_hash(m.snapshot_prev)
    m.backbone.w1.value += 1.0
    assert param_hash(m.snapshot_prev) == h


def test_clone_is_deep(rng):
    m = ModelState.create(4, 3, rng, d_hidden=8, d_emb=5)
    fp = m.fingerprint()
    c = m.clone()
    c.backbone.w2.value[:] = 0
    assert m.fingerprint() == fp and c.fingerprint() != fp


@pytest.mark.parametrize("mode", ["no_bias", "bias", "cosine"])
def test_checkpoint_round_trip(mode, rng, tmp_path):
    m = ModelState.create(4, 3, rng, d_hidden=8, d_emb=5, head_mode=mode, temperature=7.0, dropout=0.25)
    m.backbone.forward(rng.normal(size=(10, 4)), train=True, rng=rng)
    m.backbone.norm.freeze()
    m.snapshot()
    m.add_novel_classes(2, rng)
    m.novel_head.frozen_rows = 1
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    r = load_checkpoint(path)
    assert r.fingerprint() == m.fingerprint()
    assert r.base_head.mode == mode and r.base_head.temperature == 7.0
    assert r.backbone.norm.frozen and r.novel_head.frozen_rows == 1 and r.backbone.dropout == 0.25
    x = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(r.joint_logits(r.embed(x)), m.joint_logits(m.embed(x)))


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
