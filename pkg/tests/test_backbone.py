"""Feature extractor shapes, determinism, and the freeze/adapt partition."""

import numpy as np
import pytest

from metafew.backbone import (
    BackboneConfig,
    FeatureExtractor,
    adapted_copies,
    merge_params,
    split_params,
)
from metafew.errors import ContractError, DimensionError
from metafew.tensor import Tape, Tensor, tsum

SMALL = BackboneConfig(in_channels=3, in_size=16, widths=(4, 8))


def images(n=2, config=SMALL, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, size=(n, config.in_channels, config.in_size, config.in_size)).astype(np.float32)


def test_default_config_shape_arithmetic():
    cfg = BackboneConfig()
    shapes = cfg.block_shapes()
    # 3x3 conv with padding 1 keeps spatial size; each pool halves it
    assert shapes == [(3, 32, 32), (8, 16, 16), (16, 8, 8), (32, 4, 4), (64, 2, 2)]
    assert cfg.depth == 4
    assert cfg.feature_dim == 64 * 2 * 2


def test_config_rejects_collapsing_spatial_dims():
    with pytest.raises(DimensionError):
        BackboneConfig(in_size=8, widths=(4, 8, 16, 32)).block_shapes()


def test_create_is_deterministic_per_seed():
    a = FeatureExtractor.create(SMALL, seed=3)
    b = FeatureExtractor.create(SMALL, seed=3)
    c = FeatureExtractor.create(SMALL, seed=4)
    for name in a.params:
        assert np.array_equal(a.params[name].data, b.params[name].data)
    assert any(not np.array_equal(a.params[n].data, c.params[n].data) for n in a.params)


def test_activations_and_features_shapes():
    fe = FeatureExtractor.create(SMALL, seed=0)
    x = images(3)
    acts = fe.activations(x)
    assert acts.shape == (3, 8, 4, 4)
    feats = fe.features(x)
    assert feats.shape == (3, SMALL.feature_dim)
    single = fe.features(x[0])
    assert single.shape == (SMALL.feature_dim,)
    assert np.allclose(single.data, feats.data[0], atol=1e-6)


def test_activations_block_ranges_compose():
    fe = FeatureExtractor.create(SMALL, seed=1)
    x = images(2, seed=2)
    full = fe.activations(x).data
    staged = fe.activations(fe.activations(x, 0, 1), start=1).data
    assert np.array_equal(full, staged)


def test_activations_validates_range_and_channels():
    fe = FeatureExtractor.create(SMALL, seed=0)
    with pytest.raises(ContractError):
        fe.activations(images(1), start=1, stop=0)
    with pytest.raises(ContractError):
        fe.activations(images(1), stop=5)
    with pytest.raises(DimensionError):
        fe.activations(np.zeros((1, 5, 16, 16), dtype=np.float32))
    with pytest.raises(DimensionError):
        fe.activations(np.zeros((4, 8, 16, 16), dtype=np.float32), start=1)  # wants 4 channels


def test_param_name_and_shape_validation():
    fe = FeatureExtractor.create(SMALL, seed=0)
    good = fe.named_params()
    with pytest.raises(ContractError):
        FeatureExtractor(SMALL, dict(list(good.items())[:-1]))
    bad = dict(good)
    bad["block1.w"] = Tensor(np.zeros((8, 4, 5, 5), dtype=np.float32))
    with pytest.raises(ContractError):
        FeatureExtractor(SMALL, bad)


def test_split_params_partitions_by_block():
    fe = FeatureExtractor.create(BackboneConfig(in_size=32), seed=0)
    part = split_params(fe, 1)
    assert part.adapted_names == ("block3.w", "block3.b")
    assert len(part.frozen_names) == 6
    assert set(part.frozen_names) | set(part.adapted_names) == set(fe.params)
    all_part = split_params(fe, fe.depth)
    assert all_part.frozen_names == ()
    none_part = split_params(fe, 0)
    assert none_part.adapted_names == ()
    with pytest.raises(ContractError):
        split_params(fe, 5)
    with pytest.raises(ContractError):
        split_params(fe, -1)


def test_adapted_copies_are_fresh_tensors():
    fe = FeatureExtractor.create(SMALL, seed=0)
    part = split_params(fe, 1)
    copies = adapted_copies(fe, part)
    for name, t in copies.items():
        assert t is not fe.params[name]
        assert t.data is not fe.params[name].data
        assert np.array_equal(t.data, fe.params[name].data)
        assert t.requires_grad


def test_merge_shares_frozen_tensors_and_uses_adapted():
    fe = FeatureExtractor.create(SMALL, seed=0)
    part = split_params(fe, 1)
    copies = adapted_copies(fe, part)
    merged = merge_params(fe, part, copies)
    for name in part.frozen_names:
        assert merged.params[name] is fe.params[name]
    for name in part.adapted_names:
        assert merged.params[name] is copies[name]
    copies["block1.w"].data += 1.0
    x = images(1, seed=5)
    assert not np.allclose(merged.features(x).data, fe.features(x).data)


def test_merge_rejects_wrong_names_or_shapes():
    fe = FeatureExtractor.create(SMALL, seed=0)
    part = split_params(fe, 1)
    with pytest.raises(ContractError):
        merge_params(fe, part, {})
    bad = adapted_copies(fe, part)
    bad["block1.w"] = Tensor(np.zeros((1, 1, 1, 1), dtype=np.float32))
    with pytest.raises(ContractError):
        merge_params(fe, part, bad)


def test_gradients_reach_only_merged_suffix():
    fe = FeatureExtractor.create(SMALL, seed=0)
    part = split_params(fe, 1)
    copies = adapted_copies(fe, part)
    merged = merge_params(fe, part, copies)
    # frozen prefix tensors still require_grad (they are trainable elsewhere);
    # drop the flag on the shared tensors to model a frozen inner loop
    frozen_before = {n: fe.params[n].data.copy() for n in part.frozen_names}
    with Tape() as tape:
        loss = tsum(merged.features(images(2, seed=7)))
    tape.backward(loss)
    for name in part.adapted_names:
        assert copies[name].grad is not None
    for name in part.frozen_names:
        assert np.array_equal(fe.params[name].data, frozen_before[name])
