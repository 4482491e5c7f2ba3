import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from emoadapt import model as M
from emoadapt.errors import DataError
from emoadapt.tensor import softmax

from gradcheck import network_gradcheck


def conv_enumeration():
    shapes = [(1, 32), (32, 64)] + [(64, 64)] * 3 + [(64, 128)] + [(128, 128)] * 3 + [(128, 256)] + [(256, 256)] * 3
    return sum(a * b for a, b in shapes)


def test_enumeration_oracle_values():
    assert conv_enumeration() == 301088
    assert 9 * conv_enumeration() == 2709792


def test_parameter_identities():
    bundle = M.build(M.ArchitectureSpec(), [("iemocap", 4)])
    counts = M.parameter_counts(bundle)
    assert len(M.ArchitectureSpec().conv_layers()) == 13
    assert counts["shared_conv"] == 2709792
    assert counts["domains"]["iemocap"]["adapters"] == 301088
    assert 2.8e6 <= counts["total"] <= 3.4e6
    assert counts["total"] == sum(v.size for v in bundle.parameters().values())


@settings(max_examples=15, deadline=None)
@given(width=st.integers(8, 128), classes=st.lists(st.integers(2, 20), min_size=1, max_size=3),
       shared_att=st.booleans())
def test_parameter_identities_hold_for_any_head(width, classes, shared_att):
    spec = M.ArchitectureSpec(head_hidden_width=width, attention_shared=shared_att)
    bundle = M.build(spec, [(f"d{i}", c) for i, c in enumerate(classes)])
    counts = M.parameter_counts(bundle)
    assert counts["shared_conv"] == 2709792
    for i, c in enumerate(classes):
        dom = counts["domains"][f"d{i}"]
        assert dom["adapters"] == 301088
        assert dom["head"] == 256 * width + 2 * width + width * c + c
    assert counts["total"] == sum(v.size for v in bundle.parameters().values())


def test_build_errors():
    with pytest.raises(ValueError):
        M.build(M.ArchitectureSpec.tiny(), [("a", 2), ("a", 3)])
    with pytest.raises(ValueError):
        M.build(M.ArchitectureSpec.tiny(), [("a", 1)])
    with pytest.raises(ValueError):
        M.build(M.ArchitectureSpec.tiny(), [])


def warmed(spec=None, seed=0, domains=(("a", 3), ("b", 2))):
    """Bundle with non-trivial adapters and BN running statistics."""
    bundle = M.build(spec or M.ArchitectureSpec.tiny(), list(domains), seed=seed)
    rng = np.random.default_rng(seed)
    for d in bundle.domains:
        for v in bundle.domains[d].adapters.values():
            v[...] = rng.normal(size=v.shape) * 0.2
        for _ in range(3):
            x = rng.normal(size=(4, 1, 16, 20)).astype(np.float32)
            M.forward(bundle, x, [20, 15, 9, 3], d, "train", rng=rng)
    return bundle


def test_forward_shapes_and_softmax():
    bundle = warmed()
    x = np.random.default_rng(1).normal(size=(5, 1, 16, 13)).astype(np.float32)
    logits = M.forward(bundle, x, [13, 12, 5, 1, 8], "a")
    assert logits.shape == (5, 3)
    np.testing.assert_allclose(softmax(logits).sum(axis=1), 1.0, atol=1e-6)
    assert M.forward(bundle, x, [13] * 5, "b").shape == (5, 2)
    with pytest.raises(KeyError):
        M.forward(bundle, x, [13] * 5, "zzz")


def test_padding_is_inert_in_eval():
    bundle = warmed()
    rng = np.random.default_rng(2)
    lengths = [17, 9, 3]
    x = rng.normal(size=(3, 1, 16, 17)).astype(np.float32)
    x[1, :, :, 9:] = 0
    x[2, :, :, 3:] = 0
    padded = np.concatenate([x, np.zeros((3, 1, 16, 14), np.float32)], axis=3)
    a = M.forward(bundle, x, lengths, "a")
    b = M.forward(bundle, padded, lengths, "a")
    np.testing.assert_allclose(a, b, atol=1e-5)
    alone = M.forward(bundle, x[2:, :, :, :3], [3], "a")
    np.testing.assert_allclose(alone, a[2:], atol=1e-5)


def test_duplicated_sample_rows_identical():
    bundle = warmed()
    x = np.random.default_rng(3).normal(size=(1, 1, 16, 10)).astype(np.float32)
    logits = M.forward(bundle, np.repeat(x, 4, axis=0), [10] * 4, "a")
    assert np.all(logits == logits[0])


def test_eval_deterministic_and_train_dropout_varies():
    bundle = warmed()
    x = np.random.default_rng(4).normal(size=(4, 1, 16, 10)).astype(np.float32)
    assert M.forward(bundle, x, [10] * 4, "a").tobytes() == M.forward(bundle, x, [10] * 4, "a").tobytes()
    t1 = M.forward(M.copy(bundle), x, [10] * 4, "a", "train", rng=np.random.default_rng(0))
    t2 = M.forward(M.copy(bundle), x, [10] * 4, "a", "train", rng=np.random.default_rng(1))
    assert not np.allclose(t1, t2)


def test_argmax_shift_invariance():
    logits = M.forward(warmed(), np.ones((2, 1, 16, 8), np.float32), [8, 5], "a")
    np.testing.assert_array_equal(np.argmax(logits, 1), np.argmax(logits + 7.5, 1))
    np.testing.assert_allclose(softmax(logits), softmax(logits + 7.5), atol=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_zero_adapters_equal_shared_only(seed):
    bundle = M.build(M.ArchitectureSpec.tiny(), [("a", 3)], seed=seed)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 1, 16, 12)).astype(np.float32)
    with_adapters = M.forward(bundle, x, [12, 7], "a")
    without = M.forward(bundle, x, [12, 7], "a", use_adapters=False)
    np.testing.assert_allclose(with_adapters, without, atol=1e-6)


def test_trainable_masks_partition():
    bundle = M.build(M.ArchitectureSpec(), [("a", 4), ("b", 3)])
    params = bundle.parameters()
    shared = {k for k in params if k.startswith("shared/")}
    head = M.trainable_mask(bundle, "head_only", "a")
    assert head and all("/head/" in k for k in head)
    assert not any("adapter" in k for k in head) and not head & shared
    ah = M.trainable_mask(bundle, "adapters_and_head", "a")
    counts = M.parameter_counts(bundle)["domains"]["a"]
    assert sum(params[k].size for k in ah) == 301088 + counts["bn"] + counts["head"] + counts["attention"]
    assert not ah & shared
    union = set()
    for d in ("a", "b"):
        mask = M.trainable_mask(bundle, "shared_multidomain", d)
        assert shared <= mask
        union |= mask - shared
    assert union | shared == set(params)
    assert not (M.trainable_mask(bundle, "scratch", "a") - shared) & (M.trainable_mask(bundle, "scratch", "b") - shared)
    with pytest.raises(ValueError):
        M.trainable_mask(bundle, "everything", "a")


def test_shared_attention_mask():
    bundle = M.build(M.ArchitectureSpec.tiny(attention_shared=True), [("a", 2)])
    assert "shared/attention/W" in bundle.parameters()
    assert not any("attention" in k for k in M.trainable_mask(bundle, "adapters_and_head", "a"))


def test_reinitialize_domain():
    bundle = warmed()
    before = M.shared_checksum(bundle)
    old_fc1 = bundle.domains["a"].head["fc1/w"].copy()
    M.reinitialize_domain(bundle, "a", 5, seed=9)
    assert M.shared_checksum(bundle) == before
    assert bundle.domains["a"].head["fc2/w"].shape == (16, 5)
    assert bundle.domains["a"].head["fc1/w"].shape == old_fc1.shape
    x = np.random.default_rng(0).normal(size=(2, 1, 16, 9)).astype(np.float32)
    np.testing.assert_array_equal(M.forward(bundle, x, [9, 4], "a"),
                                  M.forward(bundle, x, [9, 4], "a", use_adapters=False))
    M.reinitialize_domain(bundle, "new", 2, seed=1)
    assert set(bundle.domains) == {"a", "b", "new"}


def test_checkpoint_roundtrip(tmp_path):
    bundle = warmed()
    x = np.random.default_rng(5).normal(size=(3, 1, 16, 11)).astype(np.float32)
    M.save(bundle, tmp_path / "m.ckpt")
    loaded = M.load(tmp_path / "m.ckpt")
    M.save(loaded, tmp_path / "m2.ckpt")
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()
    for d in ("a", "b"):
        assert M.forward(bundle, x, [11, 6, 2], d).tobytes() == M.forward(loaded, x, [11, 6, 2], d).tobytes()
    assert loaded.spec == bundle.spec
    assert (tmp_path / "m.ckpt").read_bytes()[:8] == b"EMOADAPT"


def test_checkpoint_errors(tmp_path):
    M.save(warmed(), tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-10])
    with pytest.raises(DataError, match="truncated"):
        M.load(tmp_path / "t.ckpt")
    (tmp_path / "h.ckpt").write_bytes(raw[:30])
    with pytest.raises(DataError):
        M.load(tmp_path / "h.ckpt")
    bad = bytearray(raw)
    bad[8] = 99
    (tmp_path / "v.ckpt").write_bytes(bytes(bad))
    with pytest.raises(DataError, match="version"):
        M.load(tmp_path / "v.ckpt")


@pytest.mark.parametrize("seed", range(3))
def test_network_gradcheck(seed):
    worst, n = network_gradcheck(seed)
    assert n > 60
    assert worst < 1e-3


def test_head_only_grads_skip_backbone():
    bundle = warmed()
    mask = M.trainable_mask(bundle, "head_only", "a")
    x = np.random.default_rng(6).normal(size=(4, 1, 16, 10)).astype(np.float32)
    _, grads, _ = M.loss_and_grads(bundle, x, [10] * 4, np.array([0, 1, 2, 0]), "a",
                                   rng=np.random.default_rng(0), trainable=mask)
    assert set(grads) == mask
