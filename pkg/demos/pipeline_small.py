"""Run the full pretrain -> meta fine-tune -> evaluate pipeline at toy scale.

Drives the same command-line entry points a real run would use, with a small
backbone and tiny episode budgets so the whole thing finishes in about a
minute. Artifacts (checkpoints, loss traces, the result table) land in the
directory given by --out.
"""

import argparse
import pathlib

from metafew import cli

CONFIG = """
[backbone]
widths = 8,16

[gnn]
d_k = 16

[inner]
epochs = 5

[train]
episodes = 30
meta_episodes = 15

[eval]
methods = gnn_noft,gnn_simpft,gnn_metaft_da
domains = near
episodes = 10

[paths]
pretrain_checkpoint = {out}/pretrain/model.ckpt
meta_checkpoint = {out}/metatrain/model.ckpt
"""


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="demo_run")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = out / "small.ini"
    config.write_text(CONFIG.format(out=out), encoding="utf-8")

    for stage in ("pretrain", "metatrain"):
        print(f"== {stage} ==")
        code = cli.main([stage, "--config", str(config), "--seed", str(args.seed),
                         "--out", str(out / stage)])
        assert code == 0, f"{stage} failed"

    print("== evaluate ==")
    code = cli.main(["evaluate", "--config", str(config), "--seed", str(args.seed),
                     "--out", str(out / "evaluate")])
    assert code == 0, "evaluate failed"

    print(f"\nartifacts under {out}/: pretrain/, metatrain/, evaluate/")


if __name__ == "__main__":
    main()
