"""Train every model family on every dataset kind and write the results table.

Desk-scale version of the full comparison: three models x three meshes, each
over the configured seeds. Example::

    python scripts/desk_table.py --n 64 --epochs 50 --out runs/table
"""

import argparse
import time
from pathlib import Path

from meshbench import cli, report, trainer

MODELS = {
    "unet": [],
    "encoder": [],
    "mgn": ["model.latent=32", "model.n_mp=4"],
}
KINDS = ("darcy", "graded", "magnetostatic")


def run_cell(kind, family, args):
    overrides = [f'dataset.kind="{kind}"', f"dataset.n={args.n}", f'model.family="{family}"',
                 f"train.epochs={args.epochs}", f"train.seeds={list(args.seeds)}",
                 f'train.dtype="{args.dtype}"', f'output.dir="{args.out / f"{family}-{kind}"}"']
    if args.lr is not None:
        overrides.append(f"train.peak_lr={args.lr}")
    cfg = cli.load_config(None, overrides + MODELS[family])
    sset = cli.load_dataset(cfg)
    data = cli.model_data(cfg, sset)
    rep = trainer.run_trials(lambda s: cli.build_model(cfg, sset, s), data, cli.train_config(cfg),
                             family, kind)
    run_dir = Path(cfg["output"]["dir"])
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "report.csv").write_text(rep.to_csv(), encoding="utf-8")
    return rep


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=64, help="samples per dataset")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--lr", type=float, help="peak learning rate for every model (default: per family)")
    p.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    p.add_argument("--out", type=Path, default=cli.output_root() / "desk-table")
    args = p.parse_args()

    reports = []
    for kind in KINDS:
        for family in MODELS:
            t0 = time.perf_counter()
            rep = run_cell(kind, family, args)
            base = sum(t.baseline_rmse for t in rep.trials) / len(rep.trials)
            print(f"{kind:14s} {family:8s} rmse {rep.mu:.4g} +- {rep.sigma:.2g} "
                  f"(baseline {base:.4g}) tte {rep.tte_mu:.3f}s  [{time.perf_counter() - t0:.0f}s]",
                  flush=True)
            reports.append(rep)
    markdown, table_csv = report.render_table(reports)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "table.md").write_text(markdown, encoding="utf-8")
    (args.out / "table.csv").write_text(table_csv, encoding="utf-8")
    print(markdown)


if __name__ == "__main__":
    main()
