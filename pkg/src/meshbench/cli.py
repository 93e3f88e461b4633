"""``meshbench`` command line: gen, train, eval, compare, figs.

An experiment config is TOML with ``[dataset]``, ``[model]``, ``[train]`` and
``[output]`` tables. Flags and ``--set section.key=value`` override the file;
the fully resolved config is written into every run directory.
"""

from __future__ import annotations

import argparse
import copy
import logging
import os
import sys
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from . import adcore as ad
from . import datastore, models, report, trainer
from .errors import ConfigError, MeshBenchError
from .transforms import pack_unstructured

ROOT_ENV = "MESHBENCH_ROOT"
FAMILIES = {"unet": "image", "encoder": "image", "mgn": "graph"}
MODEL_KEYS = {
    "unet": {"depth", "base_channels"},
    "encoder": {"patch_size", "embed_dim", "n_blocks", "n_heads", "trainable_last",
                "encoder_lr_scale", "decoder_channels"},
    "mgn": {"latent", "n_mp", "k"},
}
SECTIONS = ("dataset", "model", "train", "output")
DATASET_KEYS = {"kind", "n", "seed", "path", "params"}
TRAIN_KEYS = set(trainer.TrainConfig.__dataclass_fields__)


def output_root() -> Path:
    return Path(os.environ.get(ROOT_ENV, "runs"))


# --- configuration ------------------------------------------------------------------

def resolve_config(raw: dict) -> dict:
    """Fill defaults and validate; raises ConfigError listing every problem."""
    cfg = copy.deepcopy(raw)
    problems = [f"unknown section [{s}]" for s in cfg if s not in SECTIONS]
    ds = cfg.setdefault("dataset", {})
    md = cfg.setdefault("model", {})
    tr = cfg.setdefault("train", {})
    out = cfg.setdefault("output", {})

    problems += [f"dataset.{k}: unknown key" for k in ds if k not in DATASET_KEYS]
    if "path" not in ds:
        kind = ds.setdefault("kind", "darcy")
        if kind not in datastore.KINDS:
            problems.append(f"dataset.kind: must be one of {sorted(datastore.KINDS)}, got {kind!r}")
        else:
            params = ds.setdefault("params", {})
            unknown = sorted(set(params) - set(datastore.DEFAULT_PARAMS[kind]))
            problems += [f"dataset.params.{k}: unknown for kind {kind}" for k in unknown]
            ds["params"] = {**datastore.DEFAULT_PARAMS[kind], **params}
        ds.setdefault("n", 64)
        ds.setdefault("seed", 0)
        if not isinstance(ds["n"], int) or ds["n"] < 3:
            problems.append(f"dataset.n: need an integer >= 3 for an 80/10/10 split, got {ds['n']!r}")
    elif not Path(ds["path"]).is_dir():
        problems.append(f"dataset.path: {ds['path']} is not a directory")

    family = md.setdefault("family", "unet")
    if family not in FAMILIES:
        problems.append(f"model.family: must be one of {sorted(FAMILIES)}, got {family!r}")
    else:
        problems += [f"model.{k}: unknown for family {family}" for k in md
                     if k not in MODEL_KEYS[family] | {"family"}]

    problems += [f"train.{k}: unknown key" for k in tr if k not in TRAIN_KEYS]
    if family in FAMILIES:
        tr.setdefault("peak_lr", trainer.GRAPH_LR if FAMILIES[family] == "graph" else trainer.IMAGE_LR)
    known = {k: v for k, v in tr.items() if k in TRAIN_KEYS}
    try:
        tc = trainer.TrainConfig(**{**known, "warmup_epochs": known.get("warmup_epochs"),
                                    "min_lr": known.get("min_lr")})
        tr.update(epochs=tc.epochs, batch_size=tc.batch_size, peak_lr=tc.peak_lr, min_lr=tc.min_lr,
                  warmup_epochs=tc.warmup_epochs, seeds=list(tc.seeds), split=list(tc.split),
                  split_seed=tc.split_seed, normalize=tc.normalize, dtype=tc.dtype,
                  pooled_rmse=tc.pooled_rmse, include_padding=tc.include_padding)
    except (ValueError, TypeError) as exc:
        problems += [f"train: {p}" for p in str(exc).split("; ")]

    out.setdefault("name", f"{family}-{ds.get('kind') or Path(ds['path']).name}")
    out.setdefault("dir", str(output_root() / out["name"]))
    if problems:
        raise ConfigError(problems)
    return cfg


def _parse_override(text):
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError([f"--set {text!r}: expected section.key=value"])
    key, value = text.split("=", 1)
    try:
        parsed = tomli.loads(f"v = {value}")["v"]
    except tomli.TOMLDecodeError:
        parsed = value
    *path, leaf = key.strip().split(".")
    return path, leaf, parsed


def load_config(path, overrides=()) -> dict:
    raw = {}
    if path:
        try:
            raw = tomli.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, tomli.TOMLDecodeError) as exc:
            raise ConfigError([f"{path}: {exc}"]) from exc
    for text in overrides:
        keys, leaf, value = _parse_override(text)
        node = raw
        for k in keys:
            node = node.setdefault(k, {})
        node[leaf] = value
    return resolve_config(raw)


def train_config(cfg) -> trainer.TrainConfig:
    return trainer.TrainConfig(**cfg["train"])


def build_model(cfg, sset: datastore.SampleSet, seed: int):
    md = {k: v for k, v in cfg["model"].items() if k not in ("family", "k")}
    family = cfg["model"]["family"]
    cin, cout = len(sset.input_names), len(sset.target_names)
    if family == "unet":
        return models.UNetMini(cin, cout, seed=seed, **md)
    if family == "encoder":
        if "decoder_channels" in md:
            md["decoder_channels"] = tuple(md["decoder_channels"])
        return models.EncoderHead(cin, cout, sset.image_size(), seed=seed, **md)
    node_in = cin if sset.kind == "graded" else cin + 2
    return models.MGNMini(node_in, cout, seed=seed, **md)


def model_data(cfg, sset):
    if FAMILIES[cfg["model"]["family"]] == "graph":
        return sset.to_graph(k=cfg["model"].get("k", 8))
    return sset.to_image()


def load_dataset(cfg) -> datastore.SampleSet:
    ds = cfg["dataset"]
    if "path" in ds:
        return datastore.read_set(ds["path"])
    return datastore.generate_set(ds["kind"], ds["n"], ds["seed"], ds["params"])


# --- subcommands --------------------------------------------------------------------

def cmd_gen(args):
    if args.config:
        cfg = load_config(args.config, args.set)
        ds = cfg["dataset"]
        kind, n, seed, params = ds["kind"], ds["n"], ds["seed"], dict(ds["params"])
    else:
        kind, n, seed, params = args.kind, args.n, 0, {}
    kind = args.kind or kind
    n = args.n if args.n is not None else n
    seed = args.seed if args.seed is not None else seed
    if args.res is not None:
        if kind == "darcy":
            params["res"] = args.res
        elif kind == "graded":
            params["n_stream"] = args.res
        else:
            params["n_angular"] = args.res
    problems = []
    if kind not in datastore.KINDS:
        problems.append(f"--kind: must be one of {sorted(datastore.KINDS)}")
    if n is None or n < 1:
        problems.append("--n: need a positive sample count")
    if problems:
        raise ConfigError(problems)
    out = Path(args.out) if args.out else output_root() / "data" / f"{kind}-{n}-s{seed}"
    sset = datastore.generate_set(kind, n, seed, params)
    datastore.write_set(sset, out)
    print(f"wrote {len(sset)} {kind} samples to {out}")
    return 0


def _save_trial(run_dir: Path, seed, model, norm, pred, test_idx):
    named = dict(model.named_parameters())
    named.update({"norm.x_mean": ad.Tensor(norm.x[0]), "norm.x_std": ad.Tensor(norm.x[1]),
                  "norm.y_mean": ad.Tensor(norm.y[0]), "norm.y_std": ad.Tensor(norm.y[1])})
    ad.save_checkpoint(run_dir / f"seed{seed}.ckpt", named)
    np.save(run_dir / f"pred_seed{seed}.npy", pred)
    np.save(run_dir / "test_indices.npy", test_idx)


def cmd_train(args):
    overrides = list(args.set)
    if args.epochs is not None:
        overrides.append(f"train.epochs={args.epochs}")
    if args.seeds:
        overrides.append(f"train.seeds=[{','.join(str(s) for s in args.seeds)}]")
    if args.dataset:
        overrides.append(f'dataset.path="{args.dataset}"')
    if args.out:
        overrides.append(f'output.dir="{args.out}"')
    cfg = load_config(args.config, overrides)
    run_dir = Path(cfg["output"]["dir"])
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.toml").write_text(tomli_w.dumps(cfg), encoding="utf-8")

    sset = load_dataset(cfg)
    data = model_data(cfg, sset)
    tc = train_config(cfg)
    _, _, test_idx = trainer.split_dataset(len(data), tc.split, tc.split_seed)

    def on_trial(seed, model, result, pred):
        _save_trial(run_dir, seed, model, model.normalizer, pred, test_idx)

    rep = trainer.run_trials(lambda s: build_model(cfg, sset, s), data, tc, cfg["model"]["family"],
                             sset.name, parallel=args.parallel_seeds, on_trial=on_trial)
    (run_dir / "report.csv").write_text(rep.to_csv(), encoding="utf-8")
    (run_dir / "epochs.csv").write_text(rep.epoch_log_csv(), encoding="utf-8")
    print(f"{rep.model} on {rep.dataset}: rmse mu={rep.mu:.4g} sigma={rep.sigma:.4g} "
          f"tte mu={rep.tte_mu:.3f}s -> {run_dir}")
    return 0


def _run_config(run_dir: Path):
    path = run_dir / "config.toml"
    if not path.is_file():
        raise ConfigError([f"{run_dir}: no config.toml, not a completed run"])
    return resolve_config(tomli.loads(path.read_text(encoding="utf-8")))


def cmd_eval(args):
    run_dir = Path(args.run)
    cfg = _run_config(run_dir)
    tc = train_config(cfg)
    sset = load_dataset(cfg)
    data = model_data(cfg, sset)
    _, _, test_idx = trainer.split_dataset(len(data), tc.split, tc.split_seed)
    seeds = args.seeds or list(tc.seeds)
    for seed in seeds:
        arrays = ad.load_checkpoint(run_dir / f"seed{seed}.ckpt")
        norm = trainer.Normalizer((arrays.pop("norm.x_mean"), arrays.pop("norm.x_std")),
                                  (arrays.pop("norm.y_mean"), arrays.pop("norm.y_std")))
        model = build_model(cfg, sset, seed)
        model.load_state_dict(arrays)
        model.astype(np.dtype(tc.dtype))
        value, _ = trainer.evaluate(model, data, test_idx, norm, tc)
        print(f"seed {seed}: test rmse {value!r}")
    return 0


def cmd_compare(args):
    if len(args.runs) < 2:
        raise ConfigError(["compare: need at least two run directories"])
    reports = []
    for run in args.runs:
        path = Path(run) / "report.csv"
        if not path.is_file():
            raise ConfigError([f"{run}: no report.csv, not a completed run"])
        reports += trainer.RunReport.from_csv(path.read_text(encoding="utf-8"))
    markdown, table_csv = report.render_table(reports)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.md").write_text(markdown, encoding="utf-8")
        (out / "table.csv").write_text(table_csv, encoding="utf-8")
    sys.stdout.write(markdown)
    return 0


def _figure_arrays(sset, family, pred, sample, test_pos):
    """Prediction, truth and mask for one test sample as 2-d arrays."""
    truth_native = sset.targets[sample].astype(float)          # (C, *shape)
    if FAMILIES[family] == "graph":
        p = pred[test_pos].T.reshape(truth_native.shape)
    elif sset.topography == "unstructured":
        flat = pred[test_pos].reshape(pred.shape[1], -1)
        p = flat[:, :sset.field_shape[0]]
    else:
        rows, cols = sset.field_shape
        p = pred[test_pos][:, :rows, :cols]
    if sset.topography == "unstructured":
        side = sset.image_size()
        t_img = pack_unstructured(truth_native.T, side)
        p_img = pack_unstructured(p.T, side)
        return p_img.data[..., 0], t_img.data[..., 0], t_img.mask
    return p[0], truth_native[0], np.ones(truth_native.shape[1:], bool)


def cmd_figs(args):
    run_dir = Path(args.run)
    cfg = _run_config(run_dir)
    tc = train_config(cfg)
    seed = args.seed if args.seed is not None else tc.seeds[0]
    pred_path = run_dir / f"pred_seed{seed}.npy"
    if not pred_path.is_file():
        raise ConfigError([f"{run_dir}: no saved predictions for seed {seed}"])
    pred = np.load(pred_path)
    test_idx = np.load(run_dir / "test_indices.npy")
    sset = load_dataset(cfg)
    out = Path(args.out) if args.out else run_dir / "figs"
    out.mkdir(parents=True, exist_ok=True)
    picks = args.samples if args.samples else list(range(min(3, len(test_idx))))
    for pos in picks:
        if not 0 <= pos < len(test_idx):
            raise ConfigError([f"--samples: {pos} outside 0..{len(test_idx) - 1}"])
        p, t, m = _figure_arrays(sset, cfg["model"]["family"], pred, int(test_idx[pos]), pos)
        fig = report.diff_field(p, t, m, percentile=None if args.max_scale else 99.0)
        path = report.render_pgm(fig, out / f"diff_seed{seed}_test{pos}.pgm")
        print(f"wrote {path} (vmax {fig.vmax:.4g})")
    return 0


# --- entry point --------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="meshbench", description="Mesh-based PDE surrogate benchmark")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a sample set")
    g.add_argument("--config")
    g.add_argument("--kind", choices=sorted(datastore.KINDS))
    g.add_argument("--n", type=int)
    g.add_argument("--res", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one model family over the configured seeds")
    t.add_argument("--config")
    t.add_argument("--dataset", help="existing sample set directory")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seeds", type=int, nargs="+")
    t.add_argument("--out")
    t.add_argument("--parallel-seeds", action="store_true")
    t.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="recompute test RMSE from checkpoints")
    e.add_argument("run")
    e.add_argument("--seeds", type=int, nargs="+")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="results table over completed runs")
    c.add_argument("runs", nargs="+")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)

    f = sub.add_parser("figs", help="difference-field PGM images for test samples")
    f.add_argument("run")
    f.add_argument("--seed", type=int)
    f.add_argument("--samples", type=int, nargs="+")
    f.add_argument("--max-scale", action="store_true", help="scale to the maximum error, not the 99th percentile")
    f.add_argument("--out")
    f.set_defaults(func=cmd_figs)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except ConfigError as exc:
        print("meshbench: config error: " + "; ".join(exc.problems), file=sys.stderr)
        return 2
    except (MeshBenchError, OSError, ValueError) as exc:
        print(f"meshbench: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
