"""Scratch: pretrain a seed for a given episode count. Not shipped."""
import sys
import time

from metafew import rng as _rng
from metafew.backbone import BackboneConfig
from metafew.episodes import EpisodeSpec, synthetic_domain
from metafew.gnn import GnnConfig
from metafew.meta import (MetaModel, MetaState, pretrain_inner_config,
                          save_model, train_meta)
from metafew.optim import OptimizerState

seed = int(sys.argv[1])
episodes = int(sys.argv[2])
out = sys.argv[3]

source = synthetic_domain("source", 7)
bb = BackboneConfig()
model = MetaModel.create(bb, GnnConfig(feature_dim=bb.feature_dim), seed)
state = MetaState(model, pretrain_inner_config(), OptimizerState("adam", 1e-3), seed)
spec = EpisodeSpec(5, 5, 15, seed=_rng.derive_seed(seed, "pretrain-episodes"))
t0 = time.time()
stats = train_meta(state, source, spec, episodes)
save_model(out, model)
acc = sum(s.query_accuracy for s in stats[-50:]) / 50
print(f"seed {seed}: {episodes} eps in {time.time() - t0:.0f}s, "
      f"final-50 source acc {acc:.3f} -> {out}", flush=True)
