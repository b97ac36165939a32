"""Episodic training with first-order meta fine-tuning.

One meta step on an episode:

1. Freeze the first L-k backbone blocks; make fresh copies of the last k
   and initialize a throwaway linear classifier.
2. Run S inner fine-tuning steps on the support set (S = epochs *
   ceil(pool / batch)), updating only the copies and the classifier. The
   frozen prefix is pushed through once and its activations cached.
3. Merge frozen prefix + adapted suffix, forward support and query
   through the merged extractor and the GNN, and take the query
   cross-entropy.
4. Backprop at the adapted parameters and apply those gradients to the
   *initial* parameters with the outer optimizer (first-order rule: the
   inner trajectory is not differentiated through).

With S = 0 the adapted copies equal the originals and a meta step is
bit-identical to a plain episodic training step, which is how episodic
pretraining is run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as _rng
from .backbone import (
    BackboneConfig,
    FeatureExtractor,
    ParamPartition,
    adapted_copies,
    merge_params,
    split_params,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ContractError
from .gnn import GnnConfig, GnnMetric
from .optim import Adam, OptimizerState, Sgd, adam_step, sgd_step
from .tensor import Tape, Tensor, constant, cross_entropy, matmul, reshape
from .episodes import Episode, EpisodeSpec, sample_episode


@dataclass(frozen=True)
class InnerLoopConfig:
    k: int = 1
    optimizer: str = "adam"
    learning_rate: float = 3e-3
    epochs: int = 15
    batch_size: int | None = None  # None: full pool every step
    weight_decay: float = 0.0

    def steps_for(self, pool_size: int) -> int:
        b = pool_size if self.batch_size is None else min(self.batch_size, pool_size)
        return self.epochs * math.ceil(pool_size / b) if pool_size else 0


@dataclass
class MetaModel:
    backbone: FeatureExtractor
    gnn: GnnMetric

    @classmethod
    def create(cls, backbone_config: BackboneConfig, gnn_config: GnnConfig, seed: int) -> "MetaModel":
        if gnn_config.feature_dim != backbone_config.feature_dim:
            raise ContractError(
                f"gnn expects feature dim {gnn_config.feature_dim}, "
                f"backbone produces {backbone_config.feature_dim}"
            )
        return cls(FeatureExtractor.create(backbone_config, seed),
                   GnnMetric.create(gnn_config, seed))

    def all_params(self):
        return self.backbone.param_list() + self.gnn.param_list()

    def named_tensors(self) -> dict:
        out = {f"backbone.{n}": t for n, t in self.backbone.params.items()}
        out.update({f"gnn.{n}": t for n, t in self.gnn.params.items()})
        return out


def save_model(path, model: MetaModel) -> None:
    bc, gc = model.backbone.config, model.gnn.config
    tensors = {
        "config.backbone": np.array(
            [bc.in_channels, bc.in_size, bc.kernel, bc.stride, bc.padding, *bc.widths],
            dtype=np.float32,
        ),
        "config.gnn": np.array(
            [gc.feature_dim, gc.n_way, gc.d_k, gc.depth, gc.average_from], dtype=np.float32
        ),
    }
    tensors.update(model.named_tensors())
    save_checkpoint(path, tensors)


def load_model(path) -> MetaModel:
    blobs = load_checkpoint(path)
    try:
        cb = blobs.pop("config.backbone").astype(np.int64)
        cg = blobs.pop("config.gnn").astype(np.int64)
    except KeyError as e:
        raise ValueError(f"{path}: checkpoint is missing {e.args[0]}") from None
    bcfg = BackboneConfig(in_channels=int(cb[0]), in_size=int(cb[1]), widths=tuple(int(v) for v in cb[5:]),
                          kernel=int(cb[2]), stride=int(cb[3]), padding=int(cb[4]))
    gcfg = GnnConfig(feature_dim=int(cg[0]), n_way=int(cg[1]), d_k=int(cg[2]),
                     depth=int(cg[3]), average_from=int(cg[4]))
    bb_params, gnn_params = {}, {}
    for name, arr in blobs.items():
        if name.startswith("backbone."):
            bb_params[name[len("backbone."):]] = Tensor(arr, requires_grad=True)
        elif name.startswith("gnn."):
            gnn_params[name[len("gnn."):]] = Tensor(arr, requires_grad=True)
        else:
            raise ValueError(f"{path}: unexpected tensor {name!r}")
    return MetaModel(FeatureExtractor(bcfg, bb_params), GnnMetric(gcfg, gnn_params))


@dataclass
class InnerResult:
    partition: ParamPartition
    adapted: dict                # name -> Tensor (fresh copies, post fine-tuning)
    classifier_w: Tensor
    classifier_b: Tensor
    steps_run: int


def init_classifier(feature_dim: int, n_way: int, gen: np.random.Generator):
    w = Tensor(_rng.xavier_uniform(gen, (feature_dim, n_way), feature_dim, n_way),
               requires_grad=True)
    b = Tensor(np.zeros(n_way, dtype=np.float32), requires_grad=True)
    return w, b


def inner_finetune(
    backbone: FeatureExtractor,
    cfg: InnerLoopConfig,
    images: np.ndarray,
    labels: np.ndarray,
    n_way: int,
    clf_gen: np.random.Generator,
    batch_gen: np.random.Generator,
    sample_weights: np.ndarray | None = None,
) -> InnerResult:
    """Fine-tune copies of the last k blocks plus a fresh classifier.

    `sample_weights` (ints) repeat samples inside the shuffled pool, which
    is how augmented supports overweight the original images. The frozen
    prefix runs exactly once over the distinct images.
    """
    part = split_params(backbone, cfg.k)
    adapted = adapted_copies(backbone, part)
    labels = np.asarray(labels, dtype=np.int64)
    cut = backbone.depth - cfg.k

    w, b = init_classifier(backbone.feature_dim, n_way, clf_gen)
    if sample_weights is None:
        pool = np.arange(images.shape[0])
    else:
        weights = np.asarray(sample_weights, dtype=np.int64)
        if weights.shape != (images.shape[0],) or (weights < 1).any():
            raise ContractError("sample_weights must be positive ints, one per image")
        pool = np.repeat(np.arange(images.shape[0]), weights)
    batch = pool.shape[0] if cfg.batch_size is None else min(cfg.batch_size, pool.shape[0])

    steps_planned = cfg.steps_for(pool.shape[0])
    if steps_planned == 0:
        return InnerResult(part, adapted, w, b, 0)

    # prefix features are constant during the loop: compute once, off-tape
    prefix = backbone.activations(constant(images), 0, cut).data
    merged = merge_params(backbone, part, adapted)

    params = [w, b] + [adapted[name] for name in part.adapted_names]
    if cfg.optimizer == "adam":
        opt = Adam(params, cfg.learning_rate, cfg.weight_decay)
    elif cfg.optimizer == "sgd":
        opt = Sgd(params, cfg.learning_rate, cfg.weight_decay)
    else:
        raise ContractError(f"unknown inner optimizer {cfg.optimizer!r}")

    steps = 0
    feat_dim = backbone.feature_dim
    for _ in range(cfg.epochs):
        order = batch_gen.permutation(pool)
        for lo in range(0, order.shape[0], batch):
            chunk = order[lo : lo + batch]
            with Tape() as tape:
                acts = merged.activations(constant(prefix[chunk]), start=cut)
                feats = reshape(acts, (chunk.shape[0], feat_dim))
                logits = matmul(feats, w) + b
                loss = cross_entropy(logits, labels[chunk])
            tape.backward(loss)
            opt.step()
            opt.zero_grad()
            steps += 1
    return InnerResult(part, adapted, w, b, steps)


@dataclass
class MetaState:
    model: MetaModel
    inner: InnerLoopConfig
    outer: OptimizerState
    seed: int
    outer_params: list = field(default_factory=list)

    def __post_init__(self):
        if not self.outer_params:
            self.outer_params = self.model.all_params()

    @classmethod
    def create(cls, model: MetaModel, inner: InnerLoopConfig, seed: int,
               outer_lr: float = 1e-3) -> "MetaState":
        return cls(model, inner, OptimizerState("adam", outer_lr), seed)


@dataclass
class StepStats:
    episode_index: int
    query_loss: float
    query_accuracy: float
    adapted_gap: float
    inner_steps: int


def meta_step(state: MetaState, episode: Episode) -> StepStats:
    """One outer update from one episode. Mutates the model in place."""
    model, inner = state.model, state.inner
    n_way = model.gnn.config.n_way
    if int(episode.support_labels.max()) + 1 != n_way:
        raise ContractError(
            f"episode is {int(episode.support_labels.max()) + 1}-way, model expects {n_way}"
        )
    res = inner_finetune(
        model.backbone,
        inner,
        episode.support_images,
        episode.support_labels,
        n_way,
        clf_gen=_rng.stream("clf", state.seed, episode.index),
        batch_gen=_rng.stream("inner", state.seed, episode.index),
    )
    gap = 0.0
    for name in res.partition.adapted_names:
        d = res.adapted[name].data - model.backbone.params[name].data
        gap += float((d * d).sum())
    gap = math.sqrt(gap)

    merged = merge_params(model.backbone, res.partition, res.adapted)
    with Tape() as tape:
        sup = merged.features(constant(episode.support_images))
        qry = merged.features(constant(episode.query_images))
        scores = model.gnn.query_scores(sup, episode.support_labels, qry)
        loss = cross_entropy(scores, episode.query_labels)
    tape.backward(loss)

    grads = []
    for name, p in model.backbone.params.items():
        src = res.adapted[name] if name in res.adapted else p
        grads.append(src.grad)
    for p in model.gnn.param_list():
        grads.append(p.grad)
    adam_step(state.outer_params, grads, state.outer)
    for p in state.outer_params:
        p.grad = None
    for t in res.adapted.values():
        t.grad = None

    pred = scores.data.argmax(axis=1)
    acc = float((pred == episode.query_labels).mean())
    return StepStats(episode.index, float(loss.data), acc, gap, res.steps_run)


def train_meta(
    state: MetaState,
    dataset,
    spec: EpisodeSpec,
    n_episodes: int,
    trace_path=None,
) -> list:
    """Run meta_step over episodes 0..n_episodes-1; optionally write loss.csv."""
    trace = []
    for i in range(n_episodes):
        episode = sample_episode(dataset, spec, i)
        trace.append(meta_step(state, episode))
    if trace_path is not None:
        with open(trace_path, "w", encoding="utf-8", newline="") as f:
            f.write("episode_index,query_loss,query_accuracy,adapted_gap\n")
            for s in trace:
                f.write(f"{s.episode_index},{s.query_loss:.6f},{s.query_accuracy:.6f},{s.adapted_gap:.6f}\n")
    return trace


def pretrain_inner_config(template: InnerLoopConfig | None = None) -> InnerLoopConfig:
    """Inner config with S forced to 0: plain episodic training."""
    base = template or InnerLoopConfig()
    return InnerLoopConfig(k=base.k, optimizer=base.optimizer,
                           learning_rate=base.learning_rate, epochs=0,
                           batch_size=base.batch_size, weight_decay=base.weight_decay)
