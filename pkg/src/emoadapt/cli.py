"""``emoadapt`` command line: features, training, evaluation, statistics, toy data.

Configuration comes from an optional JSON file (``--config``) with the
sections printed by ``emoadapt dump-config``; command-line flags override it.
The feature cache root is ``--cache``, else the config, else ``$EMOADAPT_CACHE``,
else ``./emoadapt-cache``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from . import corpus as C
from . import dsp
from . import model as M
from . import stats as S
from . import trainer as T
from .errors import ConfigError, DataError, NumericError

log = logging.getLogger("emoadapt")

CACHE_ENV = "EMOADAPT_CACHE"
DEFAULT_CACHE = "emoadapt-cache"
PRESETS = {"full": M.ArchitectureSpec, "tiny": M.ArchitectureSpec.tiny}
TRAIN_KEYS = tuple(f.name for f in fields(T.TrainConfig) if f.name != "seed")
ARCH_KEYS = tuple(f.name for f in fields(M.ArchitectureSpec))
PATH_KEYS = ("cache", "out", "scores", "aliases")
TOP_KEYS = ("architecture", "train", "paths", "seeds")


# --------------------------------------------------------------------------
# configuration


def default_config() -> dict:
    return {
        "architecture": {"preset": "full"},
        "train": {k: v for k, v in T.TrainConfig().to_dict().items() if k != "seed"},
        "paths": {"cache": None, "out": "runs", "scores": None, "aliases": None},
        "seeds": [0],
    }


def _check_keys(section: str, given: dict, allowed) -> None:
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")


def load_config(path) -> dict:
    """Defaults merged with the JSON file at ``path`` (if any); unknown keys are rejected."""
    cfg = default_config()
    if path is None:
        return cfg
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    _check_keys("config", raw, TOP_KEYS)
    _check_keys("architecture", raw.get("architecture", {}), ARCH_KEYS + ("preset",))
    _check_keys("train", raw.get("train", {}), TRAIN_KEYS)
    _check_keys("paths", raw.get("paths", {}), PATH_KEYS)
    for key in ("architecture", "train", "paths"):
        cfg[key].update(raw.get(key, {}))
    if "seeds" in raw:
        cfg["seeds"] = [int(s) for s in raw["seeds"]]
    return cfg


def parse_seeds(text: str) -> list:
    """``"3"``, ``"0,2,5"`` or an inclusive range ``"0..9"``."""
    try:
        if ".." in text:
            lo, hi = (int(x) for x in text.split(".."))
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(x) for x in text.split(",")]
    except ValueError:
        raise ConfigError(f"bad seed list {text!r}; use N, N,M,... or A..B") from None


FLAG_TARGETS = {
    "arch": ("architecture", "preset"),
    "batch_size": ("train", "batch_size"),
    "max_epochs": ("train", "max_epochs"),
    "patience": ("train", "patience_epochs"),
    "steps_per_stage": ("train", "round_robin_steps_per_stage"),
    "eval_every": ("train", "eval_every_rounds"),
    "cache": ("paths", "cache"),
    "out": ("paths", "out"),
    "scores": ("paths", "scores"),
    "aliases": ("paths", "aliases"),
}


def resolve_config(args) -> dict:
    cfg = load_config(getattr(args, "config", None))
    for flag, (section, key) in FLAG_TARGETS.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg[section][key] = value
    if getattr(args, "seeds", None) is not None:
        cfg["seeds"] = parse_seeds(args.seeds)
    if cfg["paths"]["cache"] is None:
        cfg["paths"]["cache"] = os.environ.get(CACHE_ENV, DEFAULT_CACHE)
    return cfg


def build_spec(cfg: dict) -> M.ArchitectureSpec:
    arch = dict(cfg["architecture"])
    preset = arch.pop("preset", "full")
    if preset not in PRESETS:
        raise ConfigError(f"unknown architecture preset {preset!r}; choose from {sorted(PRESETS)}")
    try:
        return PRESETS[preset](**arch)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"architecture: {exc}") from exc


def build_train_config(cfg: dict, seed: int) -> T.TrainConfig:
    try:
        return T.TrainConfig.from_dict({**cfg["train"], "seed": seed})
    except TypeError as exc:
        raise ConfigError(f"train: {exc}") from exc


def resolved_dump(cfg: dict) -> dict:
    """Fully spelled-out config that re-ingests to the same run."""
    spec = build_spec(cfg)
    out = json.loads(json.dumps(cfg))
    out["architecture"] = {"preset": cfg["architecture"].get("preset", "full"), **spec.to_dict()}
    out["train"] = {k: v for k, v in build_train_config(cfg, 0).to_dict().items() if k != "seed"}
    return out


# --------------------------------------------------------------------------
# commands


def cmd_features(args, cfg) -> int:
    manifest = C.load_manifest(args.manifest)
    store = C.FeatureStore(cfg["paths"]["cache"])
    seed = cfg["seeds"][0]
    written = skipped = 0
    for sample in manifest.samples:
        stem = store.stem(sample)
        if dsp.feature_exists(stem) and not args.force:
            skipped += 1
            continue
        clip = dsp.load_wav(manifest.audio_file(sample))
        mel = dsp.extract(clip, T.derive_rng(seed, "chunk", sample.corpus_id, sample.audio_path))
        dsp.save_feature(stem, mel, sample.audio_path, sample.label)
        written += 1
    print(f"{manifest.corpus_id}: wrote {written}, skipped {skipped}")
    return 0


def _manifests(paths) -> list:
    manifests = [C.load_manifest(p) for p in paths]
    ids = [m.corpus_id for m in manifests]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate corpus ids: {ids}")
    return manifests


def _run_dir(cfg, model_id: str, tag: str, seed: int) -> Path:
    return Path(cfg["paths"]["out"]) / model_id / tag / f"seed{seed}"


def _finish(cfg, model_id: str, tag: str, seed: int, bundle, records: dict) -> None:
    run = _run_dir(cfg, model_id, tag, seed)
    run.mkdir(parents=True, exist_ok=True)
    ckpt = run / "model.ckpt"
    M.save(bundle, ckpt)
    for corpus_id, rec in records.items():
        rec.checkpoint = str(ckpt)
        rec.save(run / f"record-{corpus_id}.json")
        print(f"{model_id} {corpus_id} seed={seed} dev_uar={rec.final_dev_uar:.4f} test_uar={rec.test_uar:.4f}")
        if cfg["paths"]["scores"]:
            S.append_score(cfg["paths"]["scores"], model_id, corpus_id, seed, rec.final_dev_uar, rec.test_uar)


def _load_checkpoint(path_template: str, seed: int) -> M.ModelBundle:
    path = Path(path_template.replace("{seed}", str(seed)))
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    return M.load(path)


def cmd_train(args, cfg) -> int:
    spec = build_spec(cfg)
    store = C.FeatureStore(cfg["paths"]["cache"])
    regime = args.regime
    if regime in ("scratch", "head", "adapters") and len(args.manifest) != 1:
        raise ConfigError(f"train {regime} takes exactly one manifest")
    if regime in ("head", "adapters") and not args.from_ckpt:
        raise ConfigError(f"train {regime} needs --from <checkpoint>")
    manifests = _manifests(args.manifest)
    for seed in cfg["seeds"]:
        config = build_train_config(cfg, seed)
        tag = "+".join(m.corpus_id for m in manifests)
        if regime == "scratch":
            m = manifests[0]
            bundle = T.scratch_bundle(spec, m, seed)
            records = {m.corpus_id: T.train_single(bundle, m, store, "scratch", config)}
            default_id = "scratch"
        elif regime in ("head", "adapters"):
            m = manifests[0]
            pretrained = _load_checkpoint(args.from_ckpt, seed)
            inner = "head_only" if regime == "head" else "adapters_and_head"
            bundle, rec = T.transfer_from(pretrained, m, store, config, regime=inner)
            records = {m.corpus_id: rec}
            default_id = regime
        elif regime == "multidomain":
            bundle = M.build(spec, [(m.corpus_id, m.n_classes) for m in manifests], seed=seed)
            records = T.train_multidomain(bundle, manifests, store, config, finetune=args.finetune)
            default_id = "multidomain-finetune" if args.finetune else "multidomain"
        else:  # aggregate-av
            target = {"A": "arousal", "V": "valence", "AV": "both"}[args.target]
            aliases = C.load_aliases(cfg["paths"]["aliases"]) if cfg["paths"]["aliases"] else None
            bundle, records = T.train_aggregated(manifests, store, target, spec, config, aliases=aliases)
            default_id = f"aggregate-{args.target}"
        model_id = args.model_id or default_id
        _finish(cfg, model_id, tag, seed, bundle, records)
    return 0


def cmd_eval(args, cfg) -> int:
    bundle = M.load(args.checkpoint)
    manifest = C.load_manifest(args.manifest)
    domain = args.domain or manifest.corpus_id
    if domain not in bundle.domains:
        raise ConfigError(f"checkpoint has no domain {domain!r} (has {sorted(bundle.domains)})")
    if bundle.domains[domain].n_classes != manifest.n_classes:
        raise ConfigError(f"domain {domain!r} has {bundle.domains[domain].n_classes} classes, "
                          f"manifest has {manifest.n_classes}")
    store = C.FeatureStore(cfg["paths"]["cache"])
    bs = cfg["train"]["batch_size"]

    def score(part):
        samples = manifest.partition(part)
        if not samples:
            raise DataError(f"{manifest.corpus_id}: empty {part} partition")
        return T.evaluate(bundle, samples, store, manifest.label_space, domain, bs)

    value = score(args.partition)
    print(f"{domain} {args.partition} uar={value:.4f}")
    if cfg["paths"]["scores"]:
        other = "test" if args.partition == "dev" else "dev"
        uars = {args.partition: value, other: score(other)}
        S.append_score(cfg["paths"]["scores"], args.model_id, manifest.corpus_id, cfg["seeds"][0],
                       uars["dev"], uars["test"])
    return 0


def cmd_aso(args, cfg) -> int:
    sets = S.read_scores(args.scores_file)
    corpora = sorted({c for m, c in sets if m == args.model_a} & {c for m, c in sets if m == args.model_b})
    if args.corpus:
        corpora = [c for c in corpora if c == args.corpus]
    if not corpora:
        raise DataError(f"no corpus has scores for both {args.model_a!r} and {args.model_b!r}")
    alpha = S.bonferroni(args.alpha, args.adjust_n)
    for c in corpora:
        r = S.aso(sets[args.model_a, c].scores, sets[args.model_b, c].scores, alpha, args.bootstrap, seed=args.seed)
        print(json.dumps({"corpus_id": c, "model_a": args.model_a, "model_b": args.model_b,
                          "eps_min": r.eps_min, "eps_w2": r.eps_w2, "alpha_used": r.alpha_used,
                          "dominant": r.dominant}, sort_keys=True))
    return 0


def cmd_dominance(args, cfg) -> int:
    models, mat = S.dominance_matrix(S.read_scores(args.scores_file), args.alpha, args.adjust_n,
                                     args.bootstrap, args.seed)
    text = S.matrix_csv(models, mat)
    if args.output:
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_synth(args, cfg) -> int:
    for i in range(args.corpora):
        path = C.generate_synthetic_corpus(args.out_dir, f"{args.prefix}{i}", args.classes, args.samples_per_class,
                                           seed=cfg["seeds"][0] + i)
        print(path)
    return 0


def cmd_dump_config(args, cfg) -> int:
    print(json.dumps(resolved_dump(cfg), indent=2, sort_keys=True))
    return 0


# --------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _common(p, training: bool = False):
    p.add_argument("--config", help="JSON config file (see dump-config)")
    p.add_argument("--seeds", help="root seeds: N, N,M,... or A..B (inclusive)")
    p.add_argument("--cache", help=f"feature cache root (default ${CACHE_ENV} or ./{DEFAULT_CACHE})")
    p.add_argument("--scores", help="JSON Lines score file to append to")
    p.add_argument("-v", "--verbose", action="store_true")
    if training:
        p.add_argument("--arch", choices=sorted(PRESETS), help="architecture preset")
        p.add_argument("--out", help="directory for checkpoints and run records")
        p.add_argument("--batch-size", type=int)
        p.add_argument("--max-epochs", type=int, help="cap on epochs per single-task run")
        p.add_argument("--patience", type=int, help="plateau patience in epochs")
        p.add_argument("--steps-per-stage", type=int, help="round-robin rounds per learning-rate stage")
        p.add_argument("--eval-every", type=int, help="rounds between multi-domain dev evaluations")
        p.add_argument("--aliases", help="CSV mapping corpus labels to Table-AV labels")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="emoadapt", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("features", help="extract and cache log-mel features for a manifest")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--force", action="store_true", help="recompute existing feature files")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train a model")
    tsub = p.add_subparsers(dest="regime", required=True, parser_class=_Parser)
    for name, help_ in (("scratch", "single task from random init"),
                        ("head", "transfer: train the classifier head only"),
                        ("adapters", "transfer: train adapters and head"),
                        ("multidomain", "round-robin over several corpora"),
                        ("aggregate-av", "pre-train on arousal/valence-mapped corpora")):
        q = tsub.add_parser(name, help=help_)
        _common(q, training=True)
        if name == "aggregate-av":
            q.add_argument("target", choices=["A", "V", "AV"])
        q.add_argument("--manifest", nargs="+", required=True)
        q.add_argument("--model-id", help="model id written to the score file")
        if name in ("head", "adapters"):
            q.add_argument("--from", dest="from_ckpt", required=True,
                           help="pre-trained checkpoint; '{seed}' is replaced by the run seed")
        if name == "multidomain":
            q.add_argument("--finetune", action="store_true", help="tune adapters and heads per corpus afterwards")
        q.set_defaults(func=cmd_train, from_ckpt=None, finetune=False)

    p = sub.add_parser("eval", help="UAR of a checkpoint on one partition")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--partition", choices=["dev", "test"], default="test")
    p.add_argument("--domain", help="domain id in the checkpoint (default: manifest corpus id)")
    p.add_argument("--model-id", default="eval")
    p.set_defaults(func=cmd_eval)

    for name, func in (("aso", cmd_aso), ("dominance", cmd_dominance)):
        p = sub.add_parser(name, help="ASO test of two models" if name == "aso" else "mean eps_min matrix as CSV")
        p.add_argument("scores_file")
        p.add_argument("--alpha", type=float, default=0.05)
        p.add_argument("--bootstrap", type=int, default=1000)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "aso":
            p.add_argument("model_a")
            p.add_argument("model_b")
            p.add_argument("--corpus")
            p.add_argument("--adjust-n", type=int, default=1, help="Bonferroni divisor")
        else:
            p.add_argument("--adjust-n", type=int, default=None,
                           help="Bonferroni divisor (default: corpora x model pairs)")
            p.add_argument("--output", help="CSV path (default: stdout)")
        p.set_defaults(func=func)

    p = sub.add_parser("synth", help="write synthetic tone corpora")
    _common(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--corpora", type=int, default=1)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--samples-per-class", type=int, default=50)
    p.add_argument("--prefix", default="synth")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("dump-config", help="print the effective configuration as JSON")
    _common(p, training=True)
    p.set_defaults(func=cmd_dump_config)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"emoadapt: error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError) as exc:
        print(f"emoadapt: data error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, FloatingPointError) as exc:
        print(f"emoadapt: numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
