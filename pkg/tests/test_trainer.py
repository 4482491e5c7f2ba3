import json
import math

import numpy as np
import pytest

from emoadapt import corpus as C
from emoadapt import model as M
from emoadapt import trainer as T
from emoadapt.errors import ConfigError, DataError

SPEC = M.ArchitectureSpec.tiny()


def toy_corpus(cid, labels=("anger", "sadness"), per_part=(6, 3, 3), width=16, seed=0, feats=None):
    """Manifest plus in-memory features; class k raises mel bands 8k..8k+7."""
    rng = np.random.default_rng(seed)
    feats = {} if feats is None else feats
    samples = []
    for part, n in zip(C.PARTITIONS, per_part):
        for k, lab in enumerate(labels):
            for i in range(n):
                path = f"{cid}/{part}/{lab}{i}"
                x = rng.normal(0, 1, (64, int(rng.integers(width // 2, width + 1)))).astype(np.float32)
                x[8 * k : 8 * k + 8] += 2.0
                feats[path] = x
                samples.append(C.Sample(cid, path, lab, f"{part}-spk", part))
    return C.CorpusManifest(cid, samples, tuple(sorted(labels))), C.MemoryStore(feats)


def quick(**kw):
    base = dict(batch_size=8, max_epochs=2, patience_epochs=1, round_robin_steps_per_stage=2, eval_every_rounds=2)
    base.update(kw)
    return T.TrainConfig(**base)


# --------------------------------------------------------------------------
# schedule arithmetic


def test_config_validation():
    with pytest.raises(ConfigError):
        T.TrainConfig(lr_stages=(0.1, 0.1))
    with pytest.raises(ConfigError):
        T.TrainConfig(lr_stages=(0.01, 0.1))
    with pytest.raises(ConfigError):
        T.TrainConfig(patience_epochs=0)
    with pytest.raises(ConfigError):
        T.TrainConfig.from_dict({"learning_rate": 0.1})
    cfg = T.TrainConfig.from_dict(T.TrainConfig(seed=3).to_dict())
    assert cfg == T.TrainConfig(seed=3)
    assert T.TrainConfig().stages_for("head_only") == (0.01, 0.001)
    assert T.TrainConfig().stages_for("scratch") == (0.1, 0.01, 0.001)


def test_effective_lr():
    assert T.effective_lr(0.1, 0) == 0.1
    # oracle: closed form via log1p; float(1 - 1e-6) carries ~1e-17 error, raised to the 1e6th power
    assert T.effective_lr(0.1, 10**6) == pytest.approx(0.1 * math.exp(1e6 * math.log1p(-1e-6)), rel=1e-9)
    assert T.effective_lr(0.1, 10**6) == pytest.approx(0.0367879, abs=1e-7)
    lrs = [T.effective_lr(0.01, t) for t in range(0, 10**5, 997)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        T.effective_lr(0.1, -1)


def test_plateau_action():
    assert T.plateau_action(list(np.linspace(0, 1, 200)), 50) == "continue"
    hist = [0.1, 0.2, 0.3, 0.5] + [0.5] * 49  # best at epoch 3, flat through epoch 52
    assert T.plateau_action(hist, 50) == "continue"
    assert T.plateau_action(hist + [0.5], 50) == "step_lr"  # epoch 53
    assert T.plateau_action(hist + [0.4], 50, final_stage=True) == "stop"
    with pytest.raises(ValueError):
        T.plateau_action([], 50)


def test_plateau_schedule_walks_stages():
    sched = T.PlateauSchedule((0.1, 0.01, 0.001), patience=2)
    actions = [sched.observe(s) for s in (0.5, 0.6, 0.6, 0.6, 0.55, 0.6, 0.7, 0.7, 0.7)]
    # stage 0: best 0.6 at epoch 1 -> step at epoch 3; stage 1 starts from [0.6]
    assert actions[:4] == ["continue", "continue", "continue", "step_lr"]
    assert actions[4:6] == ["continue", "step_lr"]
    assert sched.final and actions[6:] == ["continue", "continue", "stop"]
    assert sched.best == 0.7 and sched.best_epoch == 6


def test_round_robin_stage_boundaries():
    lrs = T.round_robin_stage_lrs(2500, (0.1, 0.01, 0.001))
    assert len(lrs) == 7500
    assert set(lrs[:2500]) == {0.1} and set(lrs[2500:5000]) == {0.01} and set(lrs[5000:]) == {0.001}


def test_derive_rng_streams():
    a = T.derive_rng(1, "shuffle", "x").random(3)
    np.testing.assert_array_equal(a, T.derive_rng(1, "shuffle", "x").random(3))
    assert not np.array_equal(a, T.derive_rng(1, "shuffle", "y").random(3))


# --------------------------------------------------------------------------
# single task


def test_train_single_determinism_and_lr_trace():
    m, store = toy_corpus("c")
    recs = []
    for _ in range(2):
        b = T.scratch_bundle(SPEC, m, 0)
        recs.append(T.train_single(b, m, store, "scratch", quick(max_epochs=3)))
    assert recs[0].dev_trace == recs[1].dev_trace
    assert recs[0].test_uar == recs[1].test_uar
    r = recs[0]
    assert len(r.dev_trace) == 3 and r.n_updates == len(r.lr_trace) == 3 * 2
    per_epoch = len(r.lr_trace) // 3
    expected = [T.effective_lr(r.stage_trace[t // per_epoch], t) for t in range(r.n_updates)]
    assert r.lr_trace == expected
    assert r.final_dev_uar == max(r.dev_trace)


def test_best_weights_restored_at_end():
    m, store = toy_corpus("c")
    b = T.scratch_bundle(SPEC, m, 1)
    r = T.train_single(b, m, store, "scratch", quick(max_epochs=4))
    dev = T.evaluate(b, m.partition("dev"), store, m.label_space, "c")
    assert dev == pytest.approx(r.final_dev_uar)


def test_head_only_freezes_everything_else():
    m, store = toy_corpus("c")
    b = T.scratch_bundle(SPEC, m, 0)
    params = b.parameters()
    frozen = [k for k in params if not (k.startswith("domain/c/head/") or k.startswith("domain/c/bn/head/"))]
    before = M.checksum(params, frozen)
    r = T.train_single(b, m, store, "head_only", quick())
    assert M.checksum(b.parameters(), frozen) == before
    assert r.lr_trace[0] == 0.01


def test_transfer_updates_only_target_domain():
    src, s_store = toy_corpus("src", seed=1)
    tgt, t_store = toy_corpus("tgt", seed=2, feats=dict(s_store.features))
    pre = T.scratch_bundle(SPEC, src, 0)
    T.train_single(pre, src, s_store, "scratch", quick())
    pre_state = {k: v.copy() for k, v in pre.parameters().items()}
    bundle, rec = T.transfer_from(pre, tgt, t_store, quick())
    assert M.shared_checksum(bundle) == M.shared_checksum(pre)
    for k, v in pre.parameters().items():  # the source bundle is untouched
        np.testing.assert_array_equal(v, pre_state[k])
    after = bundle.parameters()
    changed = {k for k in after if k in pre_state and not np.array_equal(after[k], pre_state[k])}
    changed |= {k for k in after if k.startswith("domain/tgt/")}
    assert all(k.startswith("domain/tgt/") for k in changed)
    mask = M.trainable_mask(bundle, "adapters_and_head", "tgt")
    counts = M.parameter_counts(bundle)["domains"]["tgt"]
    assert sum(after[k].size for k in mask) == sum(counts.values())


def test_empty_train_partition():
    m, store = toy_corpus("c", per_part=(0, 2, 2))
    with pytest.raises(DataError):
        T.train_single(T.scratch_bundle(SPEC, m, 0), m, store, "scratch", quick())
    with pytest.raises(ConfigError):
        T.train_single(T.scratch_bundle(SPEC, m, 0), m, store, "multidomain", quick())


def test_on_epoch_can_stop_early():
    m, store = toy_corpus("c")
    r = T.train_single(T.scratch_bundle(SPEC, m, 0), m, store, "scratch", quick(max_epochs=10),
                       on_epoch=lambda epoch, uar: epoch >= 1)
    assert len(r.dev_trace) == 1


def test_run_record_json(tmp_path):
    r = T.RunRecord("scratch", ["c"], 3, [0.5, 0.75], [0.1, 0.1], 0.75, 0.5, 4, "x.ckpt", [0.1] * 4)
    r.save(tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["dev_trace"] == [0.5, 0.75] and "lr_trace" not in data


# --------------------------------------------------------------------------
# multi-domain and aggregation


def test_multidomain_round_robin(monkeypatch):
    feats = {}
    ma, _ = toy_corpus("a", seed=1, feats=feats)
    mb, _ = toy_corpus("b", labels=("fear", "joy", "relief"), per_part=(11, 2, 2), seed=2, feats=feats)
    store = C.MemoryStore(feats)
    bundle = M.build(SPEC, [("a", 2), ("b", 3)], seed=0)
    seen = []
    real = M.loss_and_grads

    def spy(bundle_, x, lengths, labels, domain_id, **kw):
        loss, grads, logits = real(bundle_, x, lengths, labels, domain_id, **kw)
        seen.append((domain_id, set(grads)))
        return loss, grads, logits

    monkeypatch.setattr(M, "loss_and_grads", spy)
    cfg = quick(round_robin_steps_per_stage=3, eval_every_rounds=4)
    recs = T.train_multidomain(bundle, [ma, mb], store, cfg)
    assert [d for d, _ in seen] == ["a", "b"] * 9
    for d, names in seen:
        other = "b" if d == "a" else "a"
        assert not any(n.startswith(f"domain/{other}/") for n in names)
        assert any(n.startswith("shared/") for n in names)
    r = recs["a"]
    assert len(r.lr_trace) == 18
    stages = T.round_robin_stage_lrs(3, cfg.lr_stages)
    assert r.lr_trace == [T.effective_lr(stages[t // 2], t) for t in range(18)]
    assert len(r.dev_trace) == 3  # rounds 4, 8 and the last one (9)
    assert 0 <= r.test_uar <= 1


def test_multidomain_other_domain_untouched():
    feats = {}
    ma, _ = toy_corpus("a", seed=1, feats=feats)
    mb, _ = toy_corpus("b", seed=2, feats=feats)
    mc, _ = toy_corpus("c", seed=3, feats=feats)
    store = C.MemoryStore(feats)
    bundle = M.build(SPEC, [("a", 2), ("b", 2), ("c", 2)], seed=0)
    keys = [k for k in bundle.parameters() if k.startswith("domain/c/")]
    before = M.checksum(bundle.parameters(), keys)
    T.train_multidomain(bundle, [ma, mb], store, quick())
    assert M.checksum(bundle.parameters(), keys) == before
    with pytest.raises(ConfigError):
        T.train_multidomain(bundle, [ma], store, quick())


def test_train_aggregated_targets():
    feats = {}
    m1, _ = toy_corpus("x", labels=("sadness", "anger"), seed=1, feats=feats)
    m2, _ = toy_corpus("y", labels=("boredom", "joy", "anger"), seed=2, feats=feats)
    store = C.MemoryStore(feats)
    bundle, recs = T.train_aggregated([m1, m2], store, "arousal", SPEC, quick())
    assert list(bundle.domains) == ["arousal"] and bundle.domains["arousal"].n_classes == 2
    bundle, recs = T.train_aggregated([m1, m2], store, "both", SPEC, quick())
    assert sorted(bundle.domains) == ["arousal", "valence"]
    assert bundle.domains["valence"].n_classes == 3
    assert set(recs) == {"arousal", "valence"}
    with pytest.raises(ConfigError):
        T.aggregated_manifests([m1], "dominance", 0)
