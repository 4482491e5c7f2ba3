"""Training regimes: single task, transfer, round-robin multi-domain, aggregated A/V."""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import corpus as C
from . import model as M
from .errors import ConfigError, DataError
from .stats import uar
from .tensor import sgd_momentum_step

log = logging.getLogger(__name__)

SINGLE_REGIMES = ("scratch", "head_only", "adapters_and_head")


@dataclass
class TrainConfig:
    batch_size: int = 64
    momentum: float = 0.9
    lr_stages: tuple = (0.1, 0.01, 0.001)
    per_update_decay: float = 1e-6
    patience_epochs: int = 50
    round_robin_steps_per_stage: int = 2500
    head_only_initial_lr: float = 0.01
    eval_every_rounds: int = 250
    max_epochs: int | None = None
    weight_decay: float = 0.0
    recalibrate_bn: bool = True
    seed: int = 0

    def __post_init__(self):
        self.lr_stages = tuple(float(x) for x in self.lr_stages)
        if not self.lr_stages or any(b >= a for a, b in zip(self.lr_stages, self.lr_stages[1:])):
            raise ConfigError("lr_stages must be non-empty and strictly decreasing")
        if self.patience_epochs < 1:
            raise ConfigError("patience_epochs must be at least 1")
        if self.batch_size < 1 or self.round_robin_steps_per_stage < 1 or self.eval_every_rounds < 1:
            raise ConfigError("batch_size, round_robin_steps_per_stage and eval_every_rounds must be positive")
        if self.max_epochs is not None and self.max_epochs < 1:
            raise ConfigError("max_epochs must be positive when set")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_stages"] = list(self.lr_stages)
        return d

    def stages_for(self, regime: str) -> tuple:
        if regime == "head_only":
            return (self.head_only_initial_lr,) + tuple(x for x in self.lr_stages if x < self.head_only_initial_lr)
        return self.lr_stages


@dataclass
class RunRecord:
    regime: str
    corpus_ids: list
    seed: int
    dev_trace: list = field(default_factory=list)
    stage_trace: list = field(default_factory=list)  # stage lr per epoch (or per evaluation)
    final_dev_uar: float = float("nan")
    test_uar: float = float("nan")
    n_updates: int = 0
    checkpoint: str | None = None
    lr_trace: list = field(default_factory=list, repr=False)  # every lr applied, in order

    def to_dict(self) -> dict:
        d = asdict(self)
        del d["lr_trace"]
        return d

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")


def derive_rng(seed: int, *keys: str) -> np.random.Generator:
    """Independent stream for ``(seed, *keys)``; stable when new keys are added elsewhere."""
    return np.random.default_rng([int(seed)] + [zlib.crc32(k.encode()) for k in keys])


def effective_lr(stage_lr: float, t: int, decay: float = 1e-6) -> float:
    """``stage_lr * (1 - decay) ** t`` with ``t`` updates done so far in the run."""
    if t < 0:
        raise ValueError("update index must be non-negative")
    return stage_lr * (1.0 - decay) ** t


def plateau_action(history, patience: int = 50, final_stage: bool = False) -> str:
    """``continue``, ``step_lr`` or ``stop`` for the dev-UAR history of the current stage.

    The stage plateaus once its best value (first occurrence) is ``patience``
    or more epochs old.
    """
    if not history:
        raise ValueError("empty history")
    best = int(np.argmax(history))
    if len(history) - 1 - best >= patience:
        return "stop" if final_stage else "step_lr"
    return "continue"


class PlateauSchedule:
    """Stage bookkeeping for plateau-driven training.

    ``observe`` returns the action; on ``step_lr`` the caller restores the
    best weights, and the next stage's history starts from that best score.
    """

    def __init__(self, stages, patience: int):
        self.stages = tuple(stages)
        self.patience = patience
        self.stage = 0
        self.history: list = []
        self.best = -np.inf
        self.best_epoch = -1
        self.epoch = 0

    @property
    def lr(self) -> float:
        return self.stages[self.stage]

    @property
    def final(self) -> bool:
        return self.stage == len(self.stages) - 1

    def observe(self, score: float) -> str:
        improved = score > self.best
        if improved:
            self.best, self.best_epoch = score, self.epoch
        self.epoch += 1
        self.history.append(score)
        action = plateau_action(self.history, self.patience, self.final)
        if action == "step_lr":
            self.stage += 1
            self.history = [self.best]
        return action


def round_robin_stage_lrs(steps_per_stage: int, stages) -> list:
    """Stage learning rate of every round; the run ends after the last stage."""
    return [lr for lr in stages for _ in range(steps_per_stage)]


# --------------------------------------------------------------------------
# helpers


class _Optimizer:
    def __init__(self, bundle: M.ModelBundle, config: TrainConfig):
        self.bundle = bundle
        self.config = config
        self.velocity: dict = {}
        self.t = 0
        self.lr_trace: list = []

    def step(self, grads: dict, stage_lr: float) -> None:
        lr = effective_lr(stage_lr, self.t, self.config.per_update_decay)
        sgd_momentum_step(self.bundle.parameters(), grads, self.velocity, lr, self.config.momentum,
                          self.config.weight_decay)
        self.lr_trace.append(lr)
        self.t += 1

    def reset_velocity(self) -> None:
        self.velocity = {}


def evaluate(bundle: M.ModelBundle, samples, store, label_space, domain_id: str, batch_size: int = 64) -> float:
    """Eval-mode UAR of ``bundle`` on ``samples``."""
    samples = list(samples)
    if not samples:
        raise DataError(f"nothing to evaluate for {domain_id}")
    preds, labels = [], []
    for batch in C.make_batches(samples, store, label_space, domain_id, batch_size):
        logits = M.forward(bundle, batch.features, batch.lengths, domain_id, "eval")
        preds.append(np.argmax(logits, axis=1))
        labels.append(batch.labels)
    return uar(np.concatenate(preds), np.concatenate(labels), len(label_space))


def _calibrate(bundle, manifest, store, domain_id, config) -> None:
    if config.recalibrate_bn:
        train = manifest.partition("train")
        M.recalibrate_bn(bundle, C.make_batches(train, store, manifest.label_space, domain_id, config.batch_size),
                         domain_id)


def _snapshot(bundle: M.ModelBundle, names) -> dict:
    state = bundle.state()
    return {k: state[k].copy() for k in names}


def _restore(bundle: M.ModelBundle, snap: dict) -> None:
    state = bundle.state()
    for k, v in snap.items():
        state[k][...] = v


def _domain_state_names(bundle, domain_id, trainable):
    buffers = {k for k in bundle.buffers() if k.startswith(f"domain/{domain_id}/")}
    return set(trainable) | buffers


def _ensure_domain(bundle: M.ModelBundle, manifest: C.CorpusManifest) -> None:
    dom = bundle.domain(manifest.corpus_id)
    if dom.n_classes != manifest.n_classes:
        raise ConfigError(f"domain {manifest.corpus_id} has {dom.n_classes} classes, corpus has {manifest.n_classes}")


# --------------------------------------------------------------------------
# regimes


def train_single(bundle: M.ModelBundle, manifest: C.CorpusManifest, store, regime: str,
                 config: TrainConfig, on_epoch=None) -> RunRecord:
    """Epoch-based training of one domain under the plateau schedule.

    Dev UAR is measured after every epoch; best weights are restored at each
    learning-rate step and at the end, then test UAR is measured once.
    ``on_epoch(epoch, dev_uar)`` may return True to end the run early.
    """
    if regime not in SINGLE_REGIMES:
        raise ConfigError(f"unknown single-task regime {regime!r}")
    domain_id = manifest.corpus_id
    _ensure_domain(bundle, manifest)
    train, dev, test = (manifest.partition(p) for p in C.PARTITIONS)
    if not train:
        raise DataError(f"{domain_id}: empty train partition")
    trainable = M.trainable_mask(bundle, regime, domain_id)
    tracked = _domain_state_names(bundle, domain_id, trainable)
    schedule = PlateauSchedule(config.stages_for(regime), config.patience_epochs)
    opt = _Optimizer(bundle, config)
    shuffle_rng = derive_rng(config.seed, "shuffle", domain_id)
    dropout_rng = derive_rng(config.seed, "dropout", domain_id)
    record = RunRecord(regime, [domain_id], config.seed)
    best_snap = _snapshot(bundle, tracked)
    while True:
        stage_lr = schedule.lr
        for batch in C.make_batches(train, store, manifest.label_space, domain_id, config.batch_size, shuffle_rng):
            _, grads, _ = M.loss_and_grads(bundle, batch.features, batch.lengths, batch.labels, domain_id,
                                           rng=dropout_rng, trainable=trainable)
            opt.step(grads, stage_lr)
        _calibrate(bundle, manifest, store, domain_id, config)
        score = evaluate(bundle, dev or train, store, manifest.label_space, domain_id, config.batch_size)
        record.dev_trace.append(score)
        record.stage_trace.append(stage_lr)
        improved = score > schedule.best
        action = schedule.observe(score)
        if improved:
            best_snap = _snapshot(bundle, tracked)
        log.debug("%s epoch %d lr %.4g dev %.4f -> %s", domain_id, schedule.epoch, stage_lr, score, action)
        if config.max_epochs is not None and schedule.epoch >= config.max_epochs:
            action = "stop"
        if on_epoch is not None and on_epoch(schedule.epoch, score):
            action = "stop"
        if action == "step_lr":
            _restore(bundle, best_snap)
            opt.reset_velocity()
        elif action == "stop":
            _restore(bundle, best_snap)
            break
    record.final_dev_uar = float(schedule.best)
    record.test_uar = evaluate(bundle, test, store, manifest.label_space, domain_id, config.batch_size) if test else float("nan")
    record.n_updates = opt.t
    record.lr_trace = opt.lr_trace
    return record


def scratch_bundle(spec: M.ArchitectureSpec, manifest: C.CorpusManifest, seed: int) -> M.ModelBundle:
    return M.build(spec, [(manifest.corpus_id, manifest.n_classes)], seed=seed)


def transfer_from(pretrained: M.ModelBundle, manifest: C.CorpusManifest, store, config: TrainConfig,
                  regime: str = "adapters_and_head", on_epoch=None):
    """Fresh adapters/head/BN for the target on a copy of ``pretrained``, then single-task training.

    Returns ``(bundle, record)``; the shared weights are never modified.
    """
    bundle = M.copy(pretrained)
    M.reinitialize_domain(bundle, manifest.corpus_id, manifest.n_classes, config.seed)
    before = M.shared_checksum(bundle)
    record = train_single(bundle, manifest, store, regime, config, on_epoch)
    if M.shared_checksum(bundle) != before:  # pragma: no cover - guarded by the freeze mask
        raise RuntimeError("shared parameters changed during transfer")
    return bundle, record


class _BatchCycle:
    """Endless reshuffled batch stream for one corpus."""

    def __init__(self, samples, store, label_space, domain_id, batch_size, rng):
        self.args = (samples, store, label_space, domain_id, batch_size, rng)
        self.queue: list = []

    def next(self) -> C.Batch:
        if not self.queue:
            self.queue = C.make_batches(*self.args)
        return self.queue.pop(0)


def train_multidomain(bundle: M.ModelBundle, manifests, store, config: TrainConfig,
                      finetune: bool = False) -> dict:
    """Round-robin training: every round takes one batch of each corpus in order.

    A batch of corpus ``d`` updates the shared parameters plus ``d``'s own.
    Stages switch every ``round_robin_steps_per_stage`` rounds; the run stops
    after the last stage. Returns ``corpus_id -> RunRecord``.
    """
    manifests = list(manifests)
    if len(manifests) < 2:
        raise ConfigError("multi-domain training needs at least two corpora")
    for m in manifests:
        _ensure_domain(bundle, m)
        if not m.partition("train"):
            raise DataError(f"{m.corpus_id}: empty train partition")
    ids = [m.corpus_id for m in manifests]
    masks = {d: M.trainable_mask(bundle, "shared_multidomain", d) for d in ids}
    cycles = {
        m.corpus_id: _BatchCycle(m.partition("train"), store, m.label_space, m.corpus_id, config.batch_size,
                                 derive_rng(config.seed, "shuffle", m.corpus_id))
        for m in manifests
    }
    dropout_rng = derive_rng(config.seed, "dropout", "multidomain")
    records = {d: RunRecord("multidomain", ids, config.seed) for d in ids}
    opt = _Optimizer(bundle, config)
    rounds = round_robin_stage_lrs(config.round_robin_steps_per_stage, config.lr_stages)
    for r, stage_lr in enumerate(rounds, 1):
        for d in ids:
            batch = cycles[d].next()
            _, grads, _ = M.loss_and_grads(bundle, batch.features, batch.lengths, batch.labels, d,
                                           rng=dropout_rng, trainable=masks[d])
            opt.step(grads, stage_lr)
        if r % config.eval_every_rounds == 0 or r == len(rounds):
            for m in manifests:
                _calibrate(bundle, m, store, m.corpus_id, config)
                split = m.partition("dev") or m.partition("train")
                score = evaluate(bundle, split, store, m.label_space, m.corpus_id, config.batch_size)
                records[m.corpus_id].dev_trace.append(score)
                records[m.corpus_id].stage_trace.append(stage_lr)
    for m in manifests:
        rec = records[m.corpus_id]
        rec.final_dev_uar = rec.dev_trace[-1]
        rec.n_updates = opt.t
        rec.lr_trace = opt.lr_trace
    if finetune:
        for m in manifests:
            records[m.corpus_id] = finetune_domain(bundle, m, store, config)
    else:
        for m in manifests:
            test = m.partition("test")
            records[m.corpus_id].test_uar = (
                evaluate(bundle, test, store, m.label_space, m.corpus_id, config.batch_size) if test else float("nan"))
    return records


def finetune_domain(bundle: M.ModelBundle, manifest: C.CorpusManifest, store, config: TrainConfig) -> RunRecord:
    """Adapter + head tuning of an existing domain with the single-task schedule."""
    record = train_single(bundle, manifest, store, "adapters_and_head", config)
    record.regime = "multidomain+finetune"
    return record


def aggregated_manifests(manifests, target: str, seed: int, mapping=None, aliases=None) -> list:
    """Arousal and/or valence tasks built from ``manifests`` (balanced per corpus and partition)."""
    targets = {"arousal": ["arousal"], "valence": ["valence"], "both": ["arousal", "valence"]}
    if target not in targets:
        raise ConfigError(f"unknown aggregation target {target!r}")
    return [C.aggregate(manifests, t, derive_rng(seed, "subsample", t), mapping, aliases) for t in targets[target]]


def train_aggregated(manifests, store, target: str, spec: M.ArchitectureSpec, config: TrainConfig,
                     mapping=None, aliases=None):
    """Pre-train on corpora merged into arousal (2-class) and/or valence (3-class) tasks.

    ``both`` trains the two tasks as domains of one round-robin run.
    Returns ``(bundle, {task: RunRecord})``.
    """
    tasks = aggregated_manifests(manifests, target, config.seed, mapping, aliases)
    bundle = M.build(spec, [(t.corpus_id, t.n_classes) for t in tasks], seed=config.seed)
    if len(tasks) == 1:
        record = train_single(bundle, tasks[0], store, "scratch", config)
        record.regime = f"aggregate-{target}"
        return bundle, {tasks[0].corpus_id: record}
    records = train_multidomain(bundle, tasks, store, config)
    for rec in records.values():
        rec.regime = "aggregate-both"
    return bundle, records
