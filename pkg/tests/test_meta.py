"""Meta-training: inner fine-tuning loop, outer episodic update, persistence."""

import math

import numpy as np
import pytest

from metafew import rng as _rng
from metafew.backbone import BackboneConfig, FeatureExtractor, merge_params
from metafew.checkpoint import save_checkpoint
from metafew.episodes import Episode
from metafew.errors import ContractError
from metafew.gnn import GnnConfig
from metafew.meta import (
    InnerLoopConfig,
    MetaModel,
    MetaState,
    inner_finetune,
    load_model,
    meta_step,
    pretrain_inner_config,
    save_model,
    train_meta,
)
from metafew.optim import OptimizerState, adam_step
from metafew.tensor import Tape, constant, cross_entropy

SMALL_BB = BackboneConfig(in_channels=3, in_size=16, widths=(4, 8))
SMALL_GNN = GnnConfig(feature_dim=SMALL_BB.feature_dim, n_way=2, d_k=8, depth=1)


def small_model(seed=0):
    return MetaModel.create(SMALL_BB, SMALL_GNN, seed=seed)


def toy_episode(index=0, n_way=2, n_shot=3, n_query=4, seed=5):
    gen = np.random.default_rng(seed + index)
    sup = gen.uniform(0.0, 1.0, (n_way * n_shot, 3, 16, 16)).astype(np.float32)
    qry = gen.uniform(0.0, 1.0, (n_way * n_query, 3, 16, 16)).astype(np.float32)
    return Episode(
        support_images=sup,
        support_labels=np.repeat(np.arange(n_way, dtype=np.int64), n_shot),
        query_images=qry,
        query_labels=np.repeat(np.arange(n_way, dtype=np.int64), n_query),
        class_ids=np.arange(n_way),
        index=index,
        fingerprint=f"toy{index:04d}",
    )


def snapshot(model):
    return {n: t.data.copy() for n, t in model.named_tensors().items()}


class TestStepsArithmetic:
    def test_full_pool_means_one_step_per_epoch(self):
        cfg = InnerLoopConfig(epochs=7, batch_size=None)
        assert cfg.steps_for(1) == 7
        assert cfg.steps_for(500) == 7

    def test_minibatches_round_up(self):
        cfg = InnerLoopConfig(epochs=3, batch_size=4)
        assert cfg.steps_for(10) == 3 * 3
        assert cfg.steps_for(8) == 3 * 2
        assert cfg.steps_for(2) == 3  # batch clamps to the pool

    def test_empty_pool_or_zero_epochs_means_zero_steps(self):
        assert InnerLoopConfig(epochs=3).steps_for(0) == 0
        assert InnerLoopConfig(epochs=0).steps_for(64) == 0


class TestModelAssembly:
    def test_create_rejects_feature_dim_mismatch(self):
        bad = GnnConfig(feature_dim=SMALL_BB.feature_dim + 1, n_way=2, d_k=8, depth=1)
        with pytest.raises(ContractError, match="feature dim"):
            MetaModel.create(SMALL_BB, bad, seed=0)

    def test_named_tensors_cover_both_modules(self):
        model = small_model()
        names = set(model.named_tensors())
        assert {f"backbone.{n}" for n in model.backbone.params} <= names
        assert {f"gnn.{n}" for n in model.gnn.params} <= names
        assert len(names) == len(model.all_params())

    def test_save_load_round_trip(self, tmp_path):
        model = small_model(seed=3)
        path = tmp_path / "model.ckpt"
        save_model(path, model)
        back = load_model(path)
        assert back.backbone.config == SMALL_BB
        assert back.gnn.config == SMALL_GNN
        theirs = back.named_tensors()
        for name, arr in snapshot(model).items():
            np.testing.assert_array_equal(theirs[name].data, arr)
        assert all(t.requires_grad for t in back.all_params())

    def test_load_rejects_checkpoint_without_configs(self, tmp_path):
        path = tmp_path / "bare.ckpt"
        save_checkpoint(path, {"backbone.block0.w": np.zeros((1, 1, 1, 1), np.float32)})
        with pytest.raises(ValueError, match="missing"):
            load_model(path)

    def test_load_rejects_unexpected_tensor(self, tmp_path):
        from metafew.checkpoint import load_checkpoint

        model = small_model()
        path = tmp_path / "model.ckpt"
        save_model(path, model)
        blobs = load_checkpoint(path)
        blobs["rogue"] = np.zeros(3, np.float32)
        save_checkpoint(path, blobs)
        with pytest.raises(ValueError, match="rogue"):
            load_model(path)


class TestInnerFinetune:
    def run_inner(self, cfg, model=None, episode=None, weights=None, seed=11):
        model = model or small_model()
        episode = episode or toy_episode()
        return inner_finetune(
            model.backbone,
            cfg,
            episode.support_images,
            episode.support_labels,
            n_way=2,
            clf_gen=_rng.stream("clf", seed, episode.index),
            batch_gen=_rng.stream("inner", seed, episode.index),
            sample_weights=weights,
        )

    def test_zero_epochs_returns_untouched_copies(self):
        model = small_model()
        before = snapshot(model)
        res = self.run_inner(InnerLoopConfig(epochs=0), model=model)
        assert res.steps_run == 0
        for name in res.partition.adapted_names:
            np.testing.assert_array_equal(res.adapted[name].data,
                                          before[f"backbone.{name}"])

    def test_zero_learning_rate_changes_nothing(self):
        model = small_model()
        before = snapshot(model)
        res = self.run_inner(InnerLoopConfig(learning_rate=0.0, epochs=2), model=model)
        assert res.steps_run == 2
        for name in res.partition.adapted_names:
            np.testing.assert_array_equal(res.adapted[name].data,
                                          before[f"backbone.{name}"])

    def test_adaptation_touches_only_suffix_copies(self):
        model = small_model()
        before = snapshot(model)
        res = self.run_inner(InnerLoopConfig(epochs=2), model=model)
        assert res.steps_run == 2
        assert set(res.adapted) == set(res.partition.adapted_names)
        assert {n.split(".")[0] for n in res.adapted} == {"block1"}
        for name in res.adapted:
            assert not np.array_equal(res.adapted[name].data, before[f"backbone.{name}"])
        for name, arr in before.items():  # originals stay bitwise intact
            np.testing.assert_array_equal(model.named_tensors()[name].data, arr)

    def test_steps_run_matches_plan_for_minibatches(self):
        cfg = InnerLoopConfig(epochs=3, batch_size=4)
        res = self.run_inner(cfg)
        assert res.steps_run == cfg.steps_for(6) == 6

    def test_weighted_pool_equals_explicit_repeats(self):
        cfg = InnerLoopConfig(epochs=2, batch_size=5)
        episode = toy_episode()
        weights = np.array([3, 1, 1, 2, 1, 1], dtype=np.int64)

        res_w = self.run_inner(cfg, model=small_model(), episode=episode,
                               weights=weights)

        expanded = Episode(
            support_images=np.repeat(episode.support_images, weights, axis=0),
            support_labels=np.repeat(episode.support_labels, weights),
            query_images=episode.query_images,
            query_labels=episode.query_labels,
            class_ids=episode.class_ids,
            index=episode.index,
            fingerprint=episode.fingerprint,
        )
        res_e = self.run_inner(cfg, model=small_model(), episode=expanded)

        np.testing.assert_array_equal(res_w.classifier_w.data, res_e.classifier_w.data)
        for name in res_w.partition.adapted_names:
            np.testing.assert_array_equal(res_w.adapted[name].data,
                                          res_e.adapted[name].data)

    def test_rejects_bad_weights_and_bad_optimizer(self):
        with pytest.raises(ContractError, match="sample_weights"):
            self.run_inner(InnerLoopConfig(epochs=1),
                           weights=np.array([1, 1, 1], dtype=np.int64))
        with pytest.raises(ContractError, match="sample_weights"):
            self.run_inner(InnerLoopConfig(epochs=1),
                           weights=np.array([1, 0, 1, 1, 1, 1], dtype=np.int64))
        with pytest.raises(ContractError, match="optimizer"):
            self.run_inner(InnerLoopConfig(optimizer="rprop", epochs=1))


class TestPretrainConfig:
    def test_epochs_forced_to_zero_rest_copied(self):
        template = InnerLoopConfig(k=2, optimizer="sgd", learning_rate=0.5,
                                   epochs=9, batch_size=7, weight_decay=1e-4)
        cfg = pretrain_inner_config(template)
        assert cfg.epochs == 0
        assert (cfg.k, cfg.optimizer, cfg.learning_rate) == (2, "sgd", 0.5)
        assert (cfg.batch_size, cfg.weight_decay) == (7, 1e-4)

    def test_default_template_is_package_default(self):
        cfg = pretrain_inner_config()
        base = InnerLoopConfig()
        assert cfg.epochs == 0
        assert cfg.k == base.k and cfg.learning_rate == base.learning_rate


class TestMetaStep:
    def test_rejects_wrong_way_episode(self):
        state = MetaState.create(small_model(), InnerLoopConfig(epochs=0), seed=0)
        with pytest.raises(ContractError, match="2"):
            meta_step(state, toy_episode(n_way=3))

    def test_zero_inner_steps_equals_plain_episodic_update(self):
        """With no inner steps the outer update must be the ordinary
        episodic gradient step, bit for bit."""
        episode = toy_episode()
        outer_lr = 1e-3

        state = MetaState.create(small_model(seed=4),
                                 InnerLoopConfig(epochs=0), seed=0,
                                 outer_lr=outer_lr)
        stats = meta_step(state, episode)
        assert stats.inner_steps == 0
        assert stats.adapted_gap == 0.0

        plain = small_model(seed=4)
        with Tape() as tape:
            sup = plain.backbone.features(constant(episode.support_images))
            qry = plain.backbone.features(constant(episode.query_images))
            scores = plain.gnn.query_scores(sup, episode.support_labels, qry)
            loss = cross_entropy(scores, episode.query_labels)
        tape.backward(loss)
        params = plain.all_params()
        adam_step(params, [p.grad for p in params], OptimizerState("adam", outer_lr))

        assert stats.query_loss == float(loss.data)
        want = snapshot(plain)
        got = snapshot(state.model)
        for name in want:
            np.testing.assert_array_equal(got[name], want[name])

    def test_outer_update_uses_adapted_leaf_gradients(self):
        """First-order contract: the query gradient is taken at the adapted
        weights and applied to the original weights; no gradient flows
        through the inner trajectory."""
        episode = toy_episode(index=2)
        seed, outer_lr = 7, 1e-3
        inner_cfg = InnerLoopConfig(epochs=2)

        state = MetaState.create(small_model(seed=4), inner_cfg, seed=seed,
                                 outer_lr=outer_lr)
        stats = meta_step(state, episode)
        assert stats.inner_steps == 2

        manual = small_model(seed=4)
        res = inner_finetune(
            manual.backbone, inner_cfg,
            episode.support_images, episode.support_labels, n_way=2,
            clf_gen=_rng.stream("clf", seed, episode.index),
            batch_gen=_rng.stream("inner", seed, episode.index),
        )
        gap = math.sqrt(sum(
            float(((res.adapted[n].data - manual.backbone.params[n].data) ** 2).sum())
            for n in res.partition.adapted_names))
        merged = merge_params(manual.backbone, res.partition, res.adapted)
        with Tape() as tape:
            sup = merged.features(constant(episode.support_images))
            qry = merged.features(constant(episode.query_images))
            scores = manual.gnn.query_scores(sup, episode.support_labels, qry)
            loss = cross_entropy(scores, episode.query_labels)
        tape.backward(loss)
        grads = []
        for name, p in manual.backbone.params.items():
            src = res.adapted[name] if name in res.adapted else p
            grads.append(src.grad)
        grads += [p.grad for p in manual.gnn.param_list()]
        params = manual.all_params()
        adam_step(params, grads, OptimizerState("adam", outer_lr))

        assert stats.query_loss == float(loss.data)
        assert stats.adapted_gap == pytest.approx(gap, rel=1e-12)
        want = snapshot(manual)
        got = snapshot(state.model)
        for name in want:
            np.testing.assert_array_equal(got[name], want[name])

    def test_every_parameter_group_moves(self):
        state = MetaState.create(small_model(seed=9), InnerLoopConfig(epochs=1), seed=1)
        before = snapshot(state.model)
        meta_step(state, toy_episode(index=1))
        after = snapshot(state.model)
        for name in before:
            assert not np.array_equal(after[name], before[name]), name

    def test_gradients_cleared_after_step(self):
        state = MetaState.create(small_model(), InnerLoopConfig(epochs=1), seed=1)
        meta_step(state, toy_episode())
        assert all(p.grad is None for p in state.model.all_params())


class TestTrainMeta:
    def test_trace_and_csv_rows(self, tmp_path):
        from metafew.episodes import Dataset, EpisodeSpec

        gen = np.random.default_rng(3)
        images = gen.uniform(0, 1, (24, 3, 16, 16)).astype(np.float32)
        labels = np.repeat(np.arange(4, dtype=np.int64), 6)
        dataset = Dataset("toy", images, labels, [f"c{i}" for i in range(4)])
        spec = EpisodeSpec(2, 2, 3, seed=77)

        state = MetaState.create(small_model(), InnerLoopConfig(epochs=1), seed=5)
        path = tmp_path / "loss.csv"
        trace = train_meta(state, dataset, spec, 3, trace_path=path)

        assert [s.episode_index for s in trace] == [0, 1, 2]
        assert all(math.isfinite(s.query_loss) for s in trace)
        lines = path.read_text().splitlines()
        assert lines[0] == "episode_index,query_loss,query_accuracy,adapted_gap"
        assert len(lines) == 4
        for row, s in zip(lines[1:], trace):
            idx, loss, acc, gap = row.split(",")
            assert int(idx) == s.episode_index
            assert float(loss) == pytest.approx(s.query_loss, abs=5e-7)
            assert float(acc) == pytest.approx(s.query_accuracy, abs=5e-7)
            assert float(gap) == pytest.approx(s.adapted_gap, abs=5e-7)
