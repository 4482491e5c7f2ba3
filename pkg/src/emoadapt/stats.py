"""UAR, Almost Stochastic Order and score-file handling."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .errors import DataError


def uar(predictions, labels, n_classes: int | None = None) -> float:
    """Unweighted average recall over the classes present in ``labels``."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("uar of an empty set")
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    classes = np.unique(labels) if n_classes is None else [c for c in range(n_classes) if np.any(labels == c)]
    recalls = [np.mean(predictions[labels == c] == c) for c in classes]
    return float(np.mean(recalls))


@dataclass
class RunScoreSet:
    model_id: str
    corpus_id: str
    scores: list
    seeds: list

    def __post_init__(self):
        if len(self.scores) != len(self.seeds) or len(self.scores) < 2:
            raise DataError(f"{self.model_id}/{self.corpus_id}: need >= 2 runs with one seed each")
        if any(not 0.0 <= s <= 1.0 for s in self.scores):
            raise DataError(f"{self.model_id}/{self.corpus_id}: scores must lie in [0, 1]")


@dataclass
class AsoResult:
    eps_min: float
    eps_w2: float
    alpha_used: float
    n_bootstrap: int

    @property
    def dominant(self) -> bool:
        return self.eps_min < 0.5


def _grid(grid_points: int) -> np.ndarray:
    return (np.arange(grid_points) + 0.5) / grid_points


def _quantiles(sorted_x: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Empirical inverse CDF along the last axis: ``x_(ceil(n t))``."""
    n = sorted_x.shape[-1]
    idx = np.clip(np.ceil(n * t).astype(int) - 1, 0, n - 1)
    return sorted_x[..., idx]


def _violation(qa: np.ndarray, qb: np.ndarray) -> np.ndarray:
    diff = qa - qb
    sq = diff * diff
    total = sq.sum(axis=-1)
    viol = np.where(diff < 0, sq, 0.0).sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, viol / np.where(total > 0, total, 1.0), 0.5)


def violation_ratio(scores_a, scores_b, grid_points: int = 1000) -> float:
    """Share of the squared 2-Wasserstein distance where A's quantiles fall below B's.

    Identical distributions (distance 0) give 0.5.
    """
    t = _grid(grid_points)
    qa = _quantiles(np.sort(np.asarray(scores_a, dtype=np.float64)), t)
    qb = _quantiles(np.sort(np.asarray(scores_b, dtype=np.float64)), t)
    return float(_violation(qa, qb))


def aso(scores_a, scores_b, alpha: float = 0.05, n_bootstrap: int = 1000, grid_points: int = 1000,
        seed: int = 0) -> AsoResult:
    """Almost Stochastic Order test of "A dominates B".

    ``eps_min`` is the one-sided ``1 - alpha`` upper confidence bound of the
    violation ratio, using the bootstrap standard deviation, clamped to [0, 1].
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("aso needs at least two scores per side")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    t = _grid(grid_points)
    qa = _quantiles(np.sort(a), t)
    qb = _quantiles(np.sort(b), t)
    if np.all(qa == qb):
        return AsoResult(0.5, 0.5, alpha, n_bootstrap)
    eps = float(_violation(qa, qb))
    rng = np.random.default_rng(seed)
    ra = np.sort(a[rng.integers(0, a.size, size=(n_bootstrap, a.size))], axis=1)
    rb = np.sort(b[rng.integers(0, b.size, size=(n_bootstrap, b.size))], axis=1)
    boot = _violation(_quantiles(ra, t), _quantiles(rb, t))
    sigma = float(boot.std())
    eps_min = min(max(eps + norm.ppf(1 - alpha) * sigma, 0.0), 1.0)
    return AsoResult(eps_min, eps, alpha, n_bootstrap)


def bonferroni(alpha: float, n_comparisons: int) -> float:
    if n_comparisons < 1:
        raise ValueError("need at least one comparison")
    return alpha / n_comparisons


def dominance_matrix(score_sets: dict, alpha: float = 0.05, adjust_n: int | None = None,
                     n_bootstrap: int = 1000, seed: int = 0):
    """Mean ``eps_min`` over corpora for every ordered model pair.

    ``score_sets`` maps ``(model_id, corpus_id)`` to a :class:`RunScoreSet`.
    ``adjust_n`` defaults to ``n_corpora * n_models * (n_models - 1) / 2``.
    Returns ``(model_ids, matrix)``.
    """
    models = sorted({m for m, _ in score_sets})
    corpora = sorted({c for _, c in score_sets})
    for m in models:
        for c in corpora:
            if (m, c) not in score_sets:
                raise DataError(f"missing scores for model {m!r} on corpus {c!r}")
    if adjust_n is None:
        adjust_n = max(1, len(corpora) * len(list(combinations(models, 2))))
    alpha_adj = bonferroni(alpha, adjust_n)
    mat = np.full((len(models), len(models)), 0.5)
    for i, mi in enumerate(models):
        for j, mj in enumerate(models):
            if i == j:
                continue
            mat[i, j] = np.mean([
                aso(score_sets[mi, c].scores, score_sets[mj, c].scores, alpha_adj, n_bootstrap, seed=seed).eps_min
                for c in corpora
            ])
    return models, mat


# --------------------------------------------------------------------------
# score files


def score_line(model_id: str, corpus_id: str, seed: int, dev_uar: float, test_uar: float) -> str:
    rec = {"model_id": model_id, "corpus_id": corpus_id, "seed": int(seed),
           "dev_uar": float(dev_uar), "test_uar": float(test_uar)}
    return json.dumps(rec, sort_keys=True)


def append_score(path, model_id: str, corpus_id: str, seed: int, dev_uar: float, test_uar: float) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        fh.write(score_line(model_id, corpus_id, seed, dev_uar, test_uar) + "\n")


def read_scores(path) -> dict:
    """Group a JSON Lines score file into ``(model_id, corpus_id) -> RunScoreSet`` (test UAR)."""
    groups: dict = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read score file {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            key = (rec["model_id"], rec["corpus_id"])
            groups.setdefault(key, ([], []))
            groups[key][0].append(float(rec["test_uar"]))
            groups[key][1].append(int(rec["seed"]))
        except (ValueError, KeyError) as exc:
            raise DataError(f"{path}:{n}: malformed score record ({exc})") from exc
    return {k: RunScoreSet(k[0], k[1], s, seeds) for k, (s, seeds) in groups.items()}


def matrix_csv(models, matrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([""] + list(models))
    for m, row in zip(models, matrix):
        w.writerow([m] + [f"{v:.6f}" for v in row])
    return buf.getvalue()
