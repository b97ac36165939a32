"""Scratch: criterion-6 pooled measurement + policy probes. Not shipped."""
import json
import os
import time
from dataclasses import replace

import numpy as np

from metafew import rng as _rng
from metafew.adapt import AugmentationPolicy
from metafew.backbone import BackboneConfig
from metafew.episodes import EpisodeSpec, synthetic_domain
from metafew.evaluate import EvalSetup, evaluate_method, result_row
from metafew.gnn import GnnConfig
from metafew.meta import (InnerLoopConfig, MetaModel, MetaState, load_model,
                          pretrain_inner_config, save_model, train_meta)
from metafew.optim import OptimizerState

LOG = "/tmp/precheck2.log"
ACC = "/tmp/precheck2_acc.json"


def log(msg):
    line = f"[{time.strftime('%H:%M:%S')}] {msg}"
    print(line, flush=True)
    with open(LOG, "a") as f:
        f.write(line + "\n")


def bench_setup(pretrained, policy=None):
    return EvalSetup(
        pretrained=pretrained,
        meta=None,
        inner=InnerLoopConfig(),
        baseline=InnerLoopConfig(learning_rate=0.01, epochs=20, weight_decay=1e-3),
        policy=policy or AugmentationPolicy(),
        seed=1000,
    )


def pretrained(seed, source):
    path = f"/tmp/cal_pre_{seed}.ckpt"
    if os.path.exists(path):
        return load_model(path)
    bb = BackboneConfig()
    model = MetaModel.create(bb, GnnConfig(feature_dim=bb.feature_dim), seed)
    state = MetaState(model, pretrain_inner_config(), OptimizerState("adam", 1e-3), seed)
    spec = EpisodeSpec(5, 5, 15, seed=_rng.derive_seed(seed, "pretrain-episodes"))
    t0 = time.time()
    train_meta(state, source, spec, 400)
    save_model(path, model)
    log(f"pretrained seed {seed} in {time.time() - t0:.0f}s -> {path}")
    return model


def main():
    source = synthetic_domain("source", 7)
    mid = synthetic_domain("mid", 7)
    spec = EpisodeSpec(5, 20, 15, seed=1000)
    accs = {}
    if os.path.exists(ACC):
        accs = json.load(open(ACC))

    def measure(key, method, setup, episodes=300):
        if key in accs:
            return accs[key]
        t0 = time.time()
        res = evaluate_method(method, setup, mid, spec, episodes)
        vals = [r.accuracy for r in res]
        accs[key] = vals
        json.dump(accs, open(ACC, "w"))
        row = result_row(method, "mid", 20, vals)
        log(f"{key}: {row.mean_accuracy:.2f} +- {row.half_width:.2f} ({time.time() - t0:.0f}s)")
        return vals

    models = {s: pretrained(s, source) for s in (0, 1, 2)}

    # Phase 1: the pooled criterion-6 statistic, ordered cheap-first.
    for method in ("gnn_noft", "gnn_simpft", "gnn_simpft_da"):
        for seed in (0, 1, 2):
            measure(f"{method}/s{seed}", method, bench_setup(models[seed]))
        pooled = sum((accs[f"{method}/s{s}"] for s in (0, 1, 2)), [])
        row = result_row(method, "mid", 20, pooled)
        log(f"POOLED {method}: {row.mean_accuracy:.2f} +- {row.half_width:.2f} (n={row.n_episodes})")

    rows = {m: result_row(m, "mid", 20, sum((accs[f"{m}/s{s}"] for s in (0, 1, 2)), []))
            for m in ("gnn_noft", "gnn_simpft", "gnn_simpft_da")}
    noft, simp, da = rows["gnn_noft"], rows["gnn_simpft"], rows["gnn_simpft_da"]
    gap_ft = simp.mean_accuracy - noft.mean_accuracy
    gap_da = da.mean_accuracy - simp.mean_accuracy
    log(f"VERDICT gap_ft={gap_ft:.2f} vs max_hw={max(noft.half_width, simp.half_width):.2f}"
        f" -> {'PASS' if gap_ft > max(noft.half_width, simp.half_width) else 'FAIL'}")
    log(f"VERDICT gap_da={gap_da:.2f} vs max_hw={max(simp.half_width, da.half_width):.2f}"
        f" -> {'PASS' if gap_da > max(simp.half_width, da.half_width) else 'FAIL'}")

    # Phase 2: policy probes on seed 0 (only relevant if phase 1 fails).
    measure("da_w1/s0", "gnn_simpft_da",
            bench_setup(models[0], AugmentationPolicy(original_weight=1)))
    measure("da_crop50/s0", "gnn_simpft_da",
            bench_setup(models[0], AugmentationPolicy(crop_scale=(0.5, 1.0))))
    for key in ("da_w1/s0", "da_crop50/s0"):
        row = result_row("gnn_simpft_da", "mid", 20, accs[key])
        base = result_row("gnn_simpft", "mid", 20, accs["gnn_simpft/s0"])
        log(f"PROBE {key}: {row.mean_accuracy:.2f} +- {row.half_width:.2f} "
            f"(gap vs simpft/s0 = {row.mean_accuracy - base.mean_accuracy:.2f})")
    log("done")


if __name__ == "__main__":
    main()
