"""Test-time adaptation on a target-domain episode.

Pieces, in evaluation order:

- `augment_support` expands each support image into `extra_per_image`
  randomized variants (crop + resize, optional horizontal flip,
  brightness/contrast jitter). Originals stay in the pool and are
  overweighted `original_weight`-to-1 in the fine-tuning sampling pool.
- `adapt_extractor` runs the same inner fine-tuning loop used in
  meta-training over the (augmented) support, returning a merged
  extractor whose prefix is shared frozen state.
- `gnn_predict` scores queries with the GNN on the adapted features.
  Predictions always use the original, un-augmented support and query
  images.
- `baseline_finetune_predict` is the comparison model: last block plus a
  fresh linear classifier, Adam with weight decay, 20 epochs over the
  augmented support; queries are scored by the classifier itself.
- `ensemble_predict` softmax-normalizes each model's scores per query,
  sums, and argmaxes (ties: lowest class index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as _rng
from .backbone import FeatureExtractor, merge_params
from .episodes import _bilinear_resize
from .errors import ContractError, DimensionError
from .gnn import GnnMetric
from .meta import InnerLoopConfig, MetaModel, inner_finetune
from .tensor import constant, matmul


@dataclass(frozen=True)
class AugmentationPolicy:
    extra_per_image: int = 17
    original_weight: int = 3
    allow_flips: bool = True
    brightness: tuple = (0.6, 1.4)
    contrast: tuple = (0.6, 1.4)
    crop_scale: tuple = (0.7, 1.0)

    def __post_init__(self):
        if self.extra_per_image < 0 or self.original_weight < 1:
            raise ContractError("extra_per_image must be >= 0 and original_weight >= 1")


@dataclass
class AugmentedSupport:
    images: np.ndarray   # [N_s * (1 + extra), C, H, W]; originals first
    labels: np.ndarray
    weights: np.ndarray  # sampling-pool multiplicity per image
    n_original: int


def horizontal_flip(image: np.ndarray) -> np.ndarray:
    """Mirror [C, H, W] left-right. Applying it twice is the identity."""
    return np.ascontiguousarray(image[:, :, ::-1])


def _one_variant(image: np.ndarray, policy: AugmentationPolicy, gen: np.random.Generator) -> np.ndarray:
    c, h, w = image.shape
    scale = float(gen.uniform(*policy.crop_scale))
    side_h = max(1, int(round(h * scale)))
    side_w = max(1, int(round(w * scale)))
    top = int(gen.integers(0, h - side_h + 1))
    left = int(gen.integers(0, w - side_w + 1))
    flip = bool(gen.random() < 0.5)
    brightness = float(gen.uniform(*policy.brightness))
    contrast = float(gen.uniform(*policy.contrast))

    out = image[:, top : top + side_h, left : left + side_w]
    if (side_h, side_w) != (h, w):
        out = _bilinear_resize(np.asarray(out, np.float32), h, w)
    if flip and policy.allow_flips:
        out = out[:, :, ::-1]
    out = out * brightness
    mean = out.mean()
    out = mean + (out - mean) * contrast
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment_support(
    images: np.ndarray,
    labels: np.ndarray,
    policy: AugmentationPolicy,
    seed: int,
    episode_index: int = 0,
) -> AugmentedSupport:
    """Build the fine-tuning pool for one episode's support set.

    Deterministic in (images, policy, seed, episode_index). Output order:
    all originals, then variants grouped by source image.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if images.ndim != 4 or labels.shape != (images.shape[0],):
        raise DimensionError(
            f"augment_support expects [N,C,H,W] images with matching labels, "
            f"got {images.shape} / {labels.shape}"
        )
    n = images.shape[0]
    variants, variant_labels = [], []
    for i in range(n):
        gen = _rng.stream("aug", seed, episode_index, i)
        for _ in range(policy.extra_per_image):
            variants.append(_one_variant(images[i], policy, gen))
            variant_labels.append(labels[i])
    if variants:
        all_images = np.concatenate([images, np.stack(variants)])
        all_labels = np.concatenate([labels, np.asarray(variant_labels, dtype=np.int64)])
    else:
        all_images, all_labels = images.copy(), labels.copy()
    weights = np.ones(all_images.shape[0], dtype=np.int64)
    weights[:n] = policy.original_weight
    return AugmentedSupport(all_images, all_labels, weights, n)


def adapt_extractor(
    model: MetaModel,
    inner: InnerLoopConfig,
    support: AugmentedSupport,
    seed: int,
    episode_index: int,
    stream_tag: str,
) -> FeatureExtractor:
    """Fine-tune the last k blocks on a support pool; return the merged extractor.

    The throwaway classifier drives the adaptation loss and is dropped;
    prediction afterwards is the GNN's job. The model itself is untouched.
    """
    res = inner_finetune(
        model.backbone,
        inner,
        support.images,
        support.labels,
        model.gnn.config.n_way,
        clf_gen=_rng.stream("adapt-clf", stream_tag, seed, episode_index),
        batch_gen=_rng.stream("adapt-inner", stream_tag, seed, episode_index),
        sample_weights=support.weights,
    )
    return merge_params(model.backbone, res.partition, res.adapted)


@dataclass
class ModelScores:
    model_id: str
    scores: np.ndarray  # [N_q, n_way]

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float32)
        if self.scores.ndim != 2:
            raise DimensionError(f"scores must be [N_q, n_way], got {self.scores.shape}")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError(f"{self.model_id}: scores contain non-finite values")

    @property
    def predictions(self) -> np.ndarray:
        return self.scores.argmax(axis=1)


def gnn_predict(
    extractor: FeatureExtractor,
    gnn: GnnMetric,
    support_images: np.ndarray,
    support_labels: np.ndarray,
    query_images: np.ndarray,
    model_id: str,
) -> ModelScores:
    """GNN query scores using (possibly adapted) extractor features.

    Runs off-tape; inputs are the original episode images.
    """
    sup = extractor.features(constant(support_images))
    qry = extractor.features(constant(query_images))
    scores = gnn.query_scores(sup, support_labels, qry)
    return ModelScores(model_id, scores.data)


def baseline_finetune_predict(
    pretrained: MetaModel,
    baseline: InnerLoopConfig,
    support: AugmentedSupport,
    query_images: np.ndarray,
    seed: int,
    episode_index: int,
) -> ModelScores:
    """The non-meta comparison model: fine-tuned linear classifier scores."""
    res = inner_finetune(
        pretrained.backbone,
        baseline,
        support.images,
        support.labels,
        pretrained.gnn.config.n_way,
        clf_gen=_rng.stream("adapt-clf", "baseline_ft", seed, episode_index),
        batch_gen=_rng.stream("adapt-inner", "baseline_ft", seed, episode_index),
        sample_weights=support.weights,
    )
    merged = merge_params(pretrained.backbone, res.partition, res.adapted)
    feats = merged.features(constant(query_images))
    logits = matmul(feats, res.classifier_w) + res.classifier_b
    return ModelScores("baseline_ft_da", logits.data)


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Stable per-row softmax of a [N, K] array."""
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def ensemble_predict(model_scores: list) -> tuple:
    """Combine per-model scores: softmax each, sum, argmax.

    Returns (predicted labels, combined [N_q, n_way] matrix). Ties pick
    the lowest class index. Pure function of the inputs.
    """
    if not model_scores:
        raise ContractError("ensemble needs at least one ModelScores")
    shape = model_scores[0].scores.shape
    for ms in model_scores:
        if ms.scores.shape != shape:
            raise DimensionError(
                f"ensemble score shapes disagree: {ms.scores.shape} vs {shape}"
            )
        if not np.all(np.isfinite(ms.scores)):
            raise ValueError(f"{ms.model_id}: non-finite scores")
    combined = np.zeros(shape, dtype=np.float64)
    for ms in model_scores:
        combined += softmax_rows(ms.scores.astype(np.float64))
    return combined.argmax(axis=1), combined.astype(np.float32)
