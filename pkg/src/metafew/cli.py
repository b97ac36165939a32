"""Command-line harness.

Commands:

  pretrain          episodic training of backbone + GNN (no inner loop)
  metatrain         meta fine-tuning, continuing from a pretrain checkpoint
  evaluate          run method variants over seeded episodes, emit tables
  ablation          the fixed fine-tuning ladder plus the two-model comparison
  export-synthetic  write the synthetic benchmark as PPM image folders

Runs are deterministic: same config and seed give byte-identical
checkpoints, CSVs and tables (reports embed the config hash and dataset
fingerprints instead of timestamps). Evaluation episodes are processed
sequentially in index order; aggregation is order-independent.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

from . import __version__
from . import rng as _rng
from .config import (
    BENCHMARK_SHOTS,
    Config,
    augmentation_policy,
    backbone_config,
    baseline_config,
    describe_defaults,
    episode_spec,
    gnn_config,
    inner_config,
    load_dataset,
)
from .episodes import DOMAINS, export_image_folder, two_class_task, synthetic_domain
from .errors import ConfigError, MetafewError
from .evaluate import (
    METHODS,
    EvalSetup,
    evaluate_method,
    format_table,
    result_row,
    write_results_csv,
    write_scores_csv,
)
from .meta import (
    InnerLoopConfig,
    MetaModel,
    MetaState,
    load_model,
    pretrain_inner_config,
    save_model,
    train_meta,
)
from .optim import OptimizerState

LADDER = ("gnn_noft", "gnn_simpft", "gnn_simpft_da", "gnn_metaft_da")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _overrides(args) -> dict:
    ov = {}
    if args.seed is not None:
        ov[("run", "seed")] = args.seed
    return ov


def _load_config(args) -> Config:
    return Config.load(args.config, _overrides(args))


def _checkpoint_model(cfg: Config, key: str) -> MetaModel:
    path = cfg.get("paths", key)
    if not path:
        raise ConfigError(f"config key paths.{key} is required for this command")
    if not Path(path).is_file():
        raise ConfigError(f"config key paths.{key}: no such file {path}")
    return load_model(path)


def _preamble(cfg: Config, extra=()) -> list:
    return [f"metafew {__version__}", f"config_hash: {cfg.config_hash}", *extra]


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    seed = cfg.get("run", "seed")
    episodes = args.episodes if args.episodes is not None else cfg.get("train", "episodes")
    dataset = load_dataset(cfg, cfg.get("data", "train_domain"))
    model = MetaModel.create(backbone_config(cfg), gnn_config(cfg), seed)
    state = MetaState(model, pretrain_inner_config(inner_config(cfg)),
                      OptimizerState("adam", cfg.get("outer", "learning_rate")), seed)
    spec = episode_spec(cfg, seed=_rng.derive_seed(seed, "pretrain-episodes"))
    trace = train_meta(state, dataset, spec, episodes, trace_path=out / "loss.csv")
    ckpt = out / "model.ckpt"
    save_model(ckpt, model)
    tail = trace[-min(50, len(trace)):]
    acc = sum(s.query_accuracy for s in tail) / max(len(tail), 1)
    print(f"pretrained {episodes} episodes on {dataset.name} (fingerprint {dataset.fingerprint})")
    print(f"mean query accuracy, last {len(tail)} episodes: {acc:.4f}")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_metatrain(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    seed = cfg.get("run", "seed")
    episodes = args.episodes if args.episodes is not None else cfg.get("train", "meta_episodes")
    dataset = load_dataset(cfg, cfg.get("data", "train_domain"))
    model = _checkpoint_model(cfg, "pretrain_checkpoint")
    state = MetaState(model, inner_config(cfg),
                      OptimizerState("adam", cfg.get("outer", "learning_rate")), seed)
    spec = episode_spec(cfg, seed=_rng.derive_seed(seed, "metatrain-episodes"))
    trace = train_meta(state, dataset, spec, episodes, trace_path=out / "loss.csv")
    ckpt = out / "model.ckpt"
    save_model(ckpt, model)
    tail = trace[-min(50, len(trace)):]
    acc = sum(s.query_accuracy for s in tail) / max(len(tail), 1)
    print(f"meta fine-tuned {episodes} episodes on {dataset.name} (fingerprint {dataset.fingerprint})")
    print(f"mean query accuracy, last {len(tail)} episodes: {acc:.4f}")
    print(f"checkpoint: {ckpt}")
    return 0


def _eval_setup(cfg: Config, methods) -> EvalSetup:
    needs_pre = any(m != "gnn_metaft_da" for m in methods)
    needs_meta = any(m in ("gnn_metaft_da", "ensemble") for m in methods)
    pretrained = _checkpoint_model(cfg, "pretrain_checkpoint") if needs_pre else None
    meta = _checkpoint_model(cfg, "meta_checkpoint") if needs_meta else None
    n_way = cfg.get("episode", "n_way")
    for label, model in (("pretrain", pretrained), ("meta", meta)):
        if model is not None and model.gnn.config.n_way != n_way:
            raise ConfigError(
                f"config key episode.n_way: {label} checkpoint was trained "
                f"{model.gnn.config.n_way}-way, config asks {n_way}-way"
            )
    return EvalSetup(
        pretrained=pretrained,
        meta=meta,
        inner=inner_config(cfg),
        baseline=baseline_config(cfg),
        policy=augmentation_policy(cfg),
        seed=cfg.get("eval", "seed"),
    )


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    methods = (args.method,) if args.method else cfg.get("eval", "methods")
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}, expected one of {', '.join(METHODS)}")
    shots = (args.shots,) if args.shots else cfg.get("eval", "shots")
    episodes = args.episodes if args.episodes is not None else cfg.get("eval", "episodes")
    domains = cfg.get("eval", "domains")
    setup = _eval_setup(cfg, methods)

    rows, per_episode, preamble_extra = [], [], []
    for domain in domains:
        dataset = load_dataset(cfg, domain)
        preamble_extra.append(f"dataset {dataset.name}: fingerprint {dataset.fingerprint}")
        for n_shot in shots:
            spec = episode_spec(cfg, n_shot=n_shot, seed=cfg.get("eval", "seed"))
            for method in methods:
                results = evaluate_method(method, setup, dataset, spec, episodes)
                rows.append(result_row(method, dataset.name, n_shot,
                                       [r.accuracy for r in results]))
                per_episode.extend((method, dataset.name, n_shot, r) for r in results)

    table = format_table(rows, _preamble(cfg, preamble_extra + [f"eval episodes: {episodes}"]))
    (out / "table.txt").write_text(table, encoding="utf-8")
    write_results_csv(out / "results.csv", per_episode)
    write_scores_csv(out / "scores.csv", per_episode, cfg.get("episode", "n_way"))
    print(table, end="")
    print(f"wrote {out / 'table.txt'}, {out / 'results.csv'}, {out / 'scores.csv'}")
    return 0


def cmd_ablation(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    episodes = args.episodes if args.episodes is not None else cfg.get("eval", "episodes")
    setup = _eval_setup(cfg, ("gnn_noft", "gnn_simpft", "gnn_simpft_da",
                              "gnn_metaft_da", "baseline_ft_da"))
    dataset = load_dataset(cfg, "mid")

    cache = {}

    def run(method, n_shot):
        key = (method, n_shot)
        if key not in cache:
            spec = episode_spec(cfg, n_shot=n_shot, seed=cfg.get("eval", "seed"))
            cache[key] = evaluate_method(method, setup, dataset, spec, episodes)
        return cache[key]

    ladder_shot = 20
    ladder_rows = [result_row(m, dataset.name, ladder_shot,
                              [r.accuracy for r in run(m, ladder_shot)]) for m in LADDER]
    compare_rows = [
        result_row(m, dataset.name, s, [r.accuracy for r in run(m, s)])
        for s in (5, 20)
        for m in ("gnn_metaft_da", "baseline_ft_da")
    ]

    digest = hashlib.sha256()
    per_episode = []
    for (method, n_shot), results in sorted(cache.items()):
        for r in results:
            digest.update(f"{method},{n_shot},{r.index},{r.fingerprint}".encode())
            per_episode.append((method, n_shot, r))
    preamble = _preamble(cfg, [
        f"dataset {dataset.name}: fingerprint {dataset.fingerprint}",
        f"eval episodes: {episodes}, eval seed: {cfg.get('eval', 'seed')}",
        f"episode fingerprint digest: {digest.hexdigest()[:16]}",
    ])
    report = [
        format_table(ladder_rows, preamble + [f"fine-tuning ladder ({dataset.name}, {ladder_shot}-shot)"]),
        format_table(compare_rows, [f"single-model comparison ({dataset.name})"]),
    ]
    text = "\n".join(report)
    (out / "report.txt").write_text(text, encoding="utf-8")
    with open(out / "report.csv", "w", encoding="utf-8", newline="") as f:
        f.write("method,dataset,shots,episode,fingerprint,accuracy\n")
        for method, n_shot, r in per_episode:
            f.write(f"{method},{dataset.name},{n_shot},{r.index},{r.fingerprint},{r.accuracy:.6f}\n")
    print(text, end="")
    print(f"wrote {out / 'report.txt'}, {out / 'report.csv'}")
    return 0


def cmd_export_synthetic(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    seed = cfg.get("data", "synthetic_seed")
    total = 0
    for domain in DOMAINS:
        n = export_image_folder(synthetic_domain(domain, seed), out / domain)
        print(f"{domain}: {n} images -> {out / domain}")
        total += n
    n = export_image_folder(two_class_task(seed), out / "twoclass")
    print(f"twoclass: {n} images -> {out / 'twoclass'}")
    print(f"exported {total + n} images (synthetic seed {seed})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metafew",
        description=__doc__,
        epilog="config keys and defaults:\n" + describe_defaults(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"metafew {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, episodes_help):
        p.add_argument("--config", default=None, help="INI config file (defaults apply without one)")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--episodes", type=int, default=None, help=episodes_help)

    p = sub.add_parser("pretrain", help="episodic pretraining of backbone + GNN")
    common(p, "override train.episodes")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("metatrain", help="meta fine-tuning from a pretrain checkpoint")
    common(p, "override train.meta_episodes")
    p.set_defaults(func=cmd_metatrain)

    p = sub.add_parser("evaluate", help="evaluate methods over seeded episodes")
    common(p, "override eval.episodes")
    p.add_argument("--method", choices=METHODS, default=None, help="evaluate a single method")
    p.add_argument("--shots", type=int, choices=BENCHMARK_SHOTS, default=None,
                   help="evaluate a single n_shot value")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablation", help="fine-tuning ladder + two-model comparison on the mid domain")
    common(p, "override eval.episodes")
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("export-synthetic", help="write synthetic domains as PPM folders")
    p.add_argument("--config", default=None, help="INI config file")
    p.add_argument("--seed", type=int, default=None, help="override run.seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_export_synthetic)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MetafewError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
