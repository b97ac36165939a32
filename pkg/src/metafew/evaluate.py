"""Evaluation drivers: run a method over seeded episodes, aggregate rows.

Methods:

- gnn_noft        pretrained model, frozen, GNN prediction
- gnn_simpft      pretrained model, inner fine-tuning on the plain support
- gnn_simpft_da   pretrained model, inner fine-tuning on the augmented support
- gnn_metaft_da   meta fine-tuned model, inner fine-tuning on the augmented support
- baseline_ft_da  pretrained backbone + fresh classifier, Adam + weight decay
- ensemble        softmax-sum of gnn_metaft_da and baseline_ft_da scores

The same (seed, index)-addressed episodes serve every method, so method
comparisons are paired. Augmentation draws are keyed by episode, not by
method: all DA methods fine-tune on the identical pool. Aggregation runs
in episode-index order and is deterministic to the byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .adapt import (
    AugmentationPolicy,
    AugmentedSupport,
    ModelScores,
    adapt_extractor,
    augment_support,
    baseline_finetune_predict,
    ensemble_predict,
    gnn_predict,
)
from .episodes import Dataset, Episode, EpisodeSpec, sample_episode
from .errors import ConfigError
from .meta import InnerLoopConfig, MetaModel

METHODS = (
    "gnn_noft",
    "gnn_simpft",
    "gnn_simpft_da",
    "gnn_metaft_da",
    "baseline_ft_da",
    "ensemble",
)


@dataclass
class EvalSetup:
    pretrained: MetaModel | None
    meta: MetaModel | None
    inner: InnerLoopConfig
    baseline: InnerLoopConfig
    policy: AugmentationPolicy
    seed: int

    def model_for(self, method: str) -> MetaModel:
        if method == "gnn_metaft_da":
            if self.meta is None:
                raise ConfigError(f"method {method} needs paths.meta_checkpoint")
            return self.meta
        if self.pretrained is None:
            raise ConfigError(f"method {method} needs paths.pretrain_checkpoint")
        return self.pretrained


def _plain_pool(episode: Episode) -> AugmentedSupport:
    n = episode.support_images.shape[0]
    return AugmentedSupport(
        images=episode.support_images,
        labels=episode.support_labels,
        weights=np.ones(n, dtype=np.int64),
        n_original=n,
    )


def method_scores(method: str, setup: EvalSetup, episode: Episode) -> ModelScores:
    """Score one episode's queries with one method."""
    if method == "ensemble":
        if setup.meta is None or setup.pretrained is None:
            raise ConfigError("method ensemble needs both model checkpoints")
        a = method_scores("gnn_metaft_da", setup, episode)
        b = method_scores("baseline_ft_da", setup, episode)
        _, combined = ensemble_predict([a, b])
        return ModelScores("ensemble", combined)
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}, expected one of {', '.join(METHODS)}")

    model = setup.model_for(method)
    if method == "gnn_noft":
        return gnn_predict(model.backbone, model.gnn, episode.support_images,
                           episode.support_labels, episode.query_images, method)
    if method == "baseline_ft_da":
        pool = augment_support(episode.support_images, episode.support_labels,
                               setup.policy, setup.seed, episode.index)
        return baseline_finetune_predict(model, setup.baseline, pool,
                                         episode.query_images, setup.seed, episode.index)
    if method == "gnn_simpft":
        pool = _plain_pool(episode)
    else:  # gnn_simpft_da, gnn_metaft_da
        pool = augment_support(episode.support_images, episode.support_labels,
                               setup.policy, setup.seed, episode.index)
    extractor = adapt_extractor(model, setup.inner, pool, setup.seed, episode.index, method)
    return gnn_predict(extractor, model.gnn, episode.support_images,
                       episode.support_labels, episode.query_images, method)


@dataclass
class EpisodeResult:
    index: int
    fingerprint: str
    accuracy: float
    scores: ModelScores
    query_labels: np.ndarray


def effective_setup(setup: EvalSetup, dataset: Dataset) -> EvalSetup:
    """Flip augmentation is dropped for orientation-sensitive datasets."""
    if setup.policy.allow_flips and "oriented" in dataset.domain_tags:
        return replace(setup, policy=replace(setup.policy, allow_flips=False))
    return setup


def evaluate_method(method: str, setup: EvalSetup, dataset: Dataset, spec: EpisodeSpec,
                    n_episodes: int, on_episode=None) -> list:
    """Evaluate `method` on episodes 0..n_episodes-1 of (dataset, spec)."""
    setup = effective_setup(setup, dataset)
    results = []
    for i in range(n_episodes):
        episode = sample_episode(dataset, spec, i)
        ms = method_scores(method, setup, episode)
        acc = float((ms.predictions == episode.query_labels).mean())
        res = EpisodeResult(i, episode.fingerprint, acc, ms, episode.query_labels)
        results.append(res)
        if on_episode is not None:
            on_episode(res)
    return results


# -- aggregation and reporting ---------------------------------------------------


@dataclass(frozen=True)
class ResultRow:
    method: str
    dataset: str
    n_shot: int
    n_episodes: int
    mean_accuracy: float  # percent
    half_width: float     # percent, 95% CI

    def __post_init__(self):
        if not 0.0 <= self.mean_accuracy <= 100.0 or self.half_width < 0.0:
            raise ConfigError("result row out of range")


def result_row(method: str, dataset: str, n_shot: int, accuracies) -> ResultRow:
    """Aggregate per-episode accuracies (fractions) into a table row.

    half_width = 1.96 * sample std / sqrt(n) * 100; a single episode has
    no spread estimate, so n = 1 reports 0 by convention.
    """
    acc = np.asarray(list(accuracies), dtype=np.float64)
    n = acc.shape[0]
    mean = float(acc.mean()) * 100.0 if n else 0.0
    half = 1.96 * float(acc.std(ddof=1)) / math.sqrt(n) * 100.0 if n > 1 else 0.0
    return ResultRow(method, dataset, n_shot, n, mean, half)


def format_table(rows, preamble=()) -> str:
    """Aligned text table; `preamble` lines are emitted as comments."""
    header = ("method", "dataset", "shots", "episodes", "accuracy")
    cells = [header]
    for r in rows:
        cells.append((r.method, r.dataset, str(r.n_shot), str(r.n_episodes),
                      f"{r.mean_accuracy:.2f}% ± {r.half_width:.2f}%"))
    widths = [max(len(row[c]) for row in cells) for c in range(len(header))]
    lines = [f"# {p}" for p in preamble]
    for row in cells:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def write_results_csv(path, per_episode_rows) -> None:
    """results.csv: method,dataset,shots,episode,accuracy (one row per episode)."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("method,dataset,shots,episode,accuracy\n")
        for method, dataset, shots, res in per_episode_rows:
            f.write(f"{method},{dataset},{shots},{res.index},{res.accuracy:.6f}\n")


def write_scores_csv(path, per_episode_rows, n_way: int) -> None:
    """Query-level scores: one row per (method, episode, query)."""
    score_cols = ",".join(f"score_{c}" for c in range(n_way))
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"method,dataset,shots,episode,fingerprint,query,true_label,predicted,{score_cols}\n")
        for method, dataset, shots, res in per_episode_rows:
            preds = res.scores.predictions
            for q in range(res.scores.scores.shape[0]):
                vals = ",".join(f"{v:.6f}" for v in res.scores.scores[q])
                f.write(
                    f"{method},{dataset},{shots},{res.index},{res.fingerprint},"
                    f"{q},{int(res.query_labels[q])},{int(preds[q])},{vals}\n"
                )
