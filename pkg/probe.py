"""Scratch: quick ladder probes on the current mid chain. Not shipped."""
import sys
import time

from metafew.adapt import AugmentationPolicy
from metafew.episodes import EpisodeSpec, synthetic_domain
from metafew.evaluate import EvalSetup, evaluate_method, result_row
from metafew.meta import InnerLoopConfig, load_model

methods = sys.argv[1].split(",") if len(sys.argv) > 1 else ["gnn_noft"]
episodes = int(sys.argv[2]) if len(sys.argv) > 2 else 60
seeds = [int(s) for s in sys.argv[3].split(",")] if len(sys.argv) > 3 else [0, 1, 2]

mid = synthetic_domain("mid", 7)
spec = EpisodeSpec(5, 20, 15, seed=1000)
for method in methods:
    for seed in seeds:
        setup = EvalSetup(
            pretrained=load_model(f"/tmp/cal_pre_{seed}.ckpt"),
            meta=None,
            inner=InnerLoopConfig(),
            baseline=InnerLoopConfig(learning_rate=0.01, epochs=20, weight_decay=1e-3),
            policy=AugmentationPolicy(),
            seed=1000,
        )
        t0 = time.time()
        vals = [r.accuracy for r in evaluate_method(method, setup, mid, spec, episodes)]
        row = result_row(method, "mid", 20, vals)
        print(f"{method}/s{seed} ({episodes} eps): {row.mean_accuracy:.2f} "
              f"+- {row.half_width:.2f} ({time.time() - t0:.0f}s)", flush=True)
