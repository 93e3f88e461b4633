"""Training protocol: splits, warm-up cosine schedule, Adam loop, seeded trials.

Image models train on :class:`ImageData` (NCHW arrays plus masks); the graph
model trains on :class:`GraphData` (one :class:`MeshGraph` per sample, batched
as a disjoint union). RMSE is always reported in target units over valid
cells only, pooled across all samples of a split.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import adcore as ad
from .errors import DegenerateInputError, NumericError, ShapeError, SizeError
from .transforms import MeshGraph

log = logging.getLogger(__name__)

IMAGE_LR = 1e-5
GRAPH_LR = 1e-3


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    peak_lr: float = IMAGE_LR
    min_lr: Optional[float] = None
    warmup_epochs: Optional[int] = None
    seeds: tuple = (0, 1, 2)
    split: tuple = (0.8, 0.1, 0.1)
    split_seed: int = 0
    normalize: bool = True
    dtype: str = "float64"
    pooled_rmse: bool = True
    include_padding: bool = False

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.split = tuple(float(f) for f in self.split)
        if self.min_lr is None:
            self.min_lr = self.peak_lr / 100.0
        if self.warmup_epochs is None:
            self.warmup_epochs = int(0.05 * self.epochs)
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))

    def problems(self):
        out = []
        if self.epochs < 1:
            out.append(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            out.append(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.warmup_epochs < max(self.epochs, 1):
            out.append(f"warmup_epochs must lie in [0, epochs), got {self.warmup_epochs}")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            out.append(f"split fractions must be three non-negative numbers summing to 1, got {self.split}")
        if not self.seeds:
            out.append("at least one seed is required")
        if self.peak_lr < 0 or self.min_lr < 0:
            out.append("learning rates must be non-negative")
        if self.dtype not in ("float64", "float32"):
            out.append(f"dtype must be float64 or float32, got {self.dtype}")
        return out


def lr_at(epoch, cfg: TrainConfig) -> float:
    """Linear warm-up from 0 to ``peak_lr``, then cosine decay towards ``min_lr``."""
    w, total = cfg.warmup_epochs, cfg.epochs
    if epoch < w:
        return cfg.peak_lr * epoch / w
    frac = (epoch - w) / (total - w)
    return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * frac))


def split_sizes(n, fractions):
    """Validation and test sizes round half up; the remainder goes to training.

    A nonzero fraction always gets at least one sample.
    """
    n_val, n_test = (max(int(math.floor(f * n + 0.5)), int(f > 0)) for f in fractions[1:])
    return n - n_val - n_test, n_val, n_test


def split_dataset(n_samples, fractions=(0.8, 0.1, 0.1), seed=0):
    """Disjoint ``(train, val, test)`` index arrays from a seeded shuffle."""
    n = n_samples if isinstance(n_samples, (int, np.integer)) else len(n_samples)
    if n < 3:
        raise SizeError(f"need at least 3 samples to split, got {n}")
    n_train, n_val, n_test = split_sizes(n, fractions)
    perm = np.random.default_rng(seed).permutation(n)
    return (np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]),
            np.sort(perm[n_train + n_val:]))


def rmse(pred, target, mask=None, pooled=True):
    """Root mean squared error over valid cells.

    ``pooled`` takes a single mean over all valid cells of all samples;
    otherwise per-sample RMSEs (first axis) are averaged.
    """
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    m = np.ones(pred.shape, bool) if mask is None else np.broadcast_to(np.asarray(mask, bool), pred.shape)
    if not m.any():
        raise DegenerateInputError("RMSE mask selects no cells")
    sq = (pred - target) ** 2
    if pooled:
        return float(np.sqrt(sq[m].sum() / m.sum()))
    per = [np.sqrt(s[k].sum() / k.sum()) for s, k in zip(sq, m) if k.any()]
    return float(np.mean(per))


# --- data adapters ------------------------------------------------------------------

class ImageData:
    """``inputs (S, C, H, W)``, ``targets (S, Co, H, W)``, ``masks (S, H, W)``."""

    kind = "image"

    def __init__(self, inputs, targets, masks):
        self.inputs = np.asarray(inputs, dtype=float)
        self.targets = np.asarray(targets, dtype=float)
        self.masks = np.asarray(masks, dtype=bool)
        if not (len(self.inputs) == len(self.targets) == len(self.masks)):
            raise ShapeError("inputs, targets and masks must have equal sample counts")

    def __len__(self):
        return len(self.inputs)

    @property
    def in_channels(self):
        return self.inputs.shape[1]

    @property
    def out_channels(self):
        return self.targets.shape[1]

    def target_mask(self, idx, include_padding=False):
        m = self.masks[idx][:, None]
        if include_padding:
            m = np.ones_like(m)
        return np.broadcast_to(m, self.targets[idx].shape)

    def batch(self, idx, x_norm, dtype):
        x = ((self.inputs[idx] - x_norm[0][None, :, None, None]) / x_norm[1][None, :, None, None])
        x = x * self.masks[idx][:, None]
        return (x.astype(dtype), self.masks[idx])

    def forward(self, model, inputs):
        return model(inputs[0], inputs[1])

    def channel_stats(self, idx):
        m = self.masks[idx][:, None]
        def stats(a):
            mm = np.broadcast_to(m, a.shape)
            cnt = mm.sum(axis=(0, 2, 3))
            mu = (a * mm).sum(axis=(0, 2, 3)) / cnt
            var = (((a - mu[None, :, None, None]) ** 2) * mm).sum(axis=(0, 2, 3)) / cnt
            return mu, np.sqrt(np.maximum(var, 1e-24))
        return stats(self.inputs[idx]), stats(self.targets[idx])

    def to_model_target(self, idx, y_norm):
        return (self.targets[idx] - y_norm[0][None, :, None, None]) / y_norm[1][None, :, None, None]

    def from_model_output(self, out, y_norm):
        return out * y_norm[1][None, :, None, None] + y_norm[0][None, :, None, None]


class GraphData:
    """One graph per sample; targets ``(S, N, Co)`` aligned with graph nodes."""

    kind = "graph"

    def __init__(self, graphs: Sequence[MeshGraph], targets):
        self.graphs = list(graphs)
        self.targets = np.asarray(targets, dtype=float)
        if self.targets.ndim == 2:
            self.targets = self.targets[:, :, None]
        if len(self.graphs) != len(self.targets):
            raise ShapeError("one target array per graph is required")
        self.masks = np.ones(self.targets.shape[:2], dtype=bool)

    def __len__(self):
        return len(self.graphs)

    @property
    def in_channels(self):
        return self.graphs[0].node_feat.shape[1]

    @property
    def out_channels(self):
        return self.targets.shape[2]

    def target_mask(self, idx, include_padding=False):
        return np.broadcast_to(self.masks[idx][:, :, None], self.targets[idx].shape)

    def batch(self, idx, x_norm, dtype):
        parts = [self.graphs[i] for i in idx]
        offsets = np.cumsum([0] + [g.n_nodes for g in parts[:-1]])
        feat = np.concatenate([g.node_feat for g in parts])
        feat = (feat - x_norm[0]) / x_norm[1]
        return MeshGraph(
            node_pos=np.concatenate([g.node_pos for g in parts]),
            node_feat=feat.astype(dtype),
            edges=np.concatenate([g.edges + o for g, o in zip(parts, offsets)]),
            edge_feat=np.concatenate([g.edge_feat for g in parts]).astype(dtype),
        )

    def forward(self, model, graph):
        out = model(graph)
        n_nodes = self.targets.shape[1]
        return ad.reshape(out, (graph.n_nodes // n_nodes, n_nodes, self.out_channels))

    def channel_stats(self, idx):
        feat = np.concatenate([self.graphs[i].node_feat for i in idx])
        y = self.targets[idx].reshape(-1, self.out_channels)
        return ((feat.mean(0), np.maximum(feat.std(0), 1e-12)),
                (y.mean(0), np.maximum(y.std(0), 1e-12)))

    def to_model_target(self, idx, y_norm):
        return (self.targets[idx] - y_norm[0]) / y_norm[1]

    def from_model_output(self, out, y_norm):
        return out * y_norm[1] + y_norm[0]


# --- reports ------------------------------------------------------------------------

@dataclass
class TrialResult:
    seed: int
    rmse: float
    tte_s: float
    epoch_losses: list
    val_rmse: list
    baseline_rmse: float
    max_abs_error: float = float("nan")


@dataclass
class RunReport:
    model: str
    dataset: str
    trials: list = field(default_factory=list)

    @property
    def rmse_values(self):
        return np.array([t.rmse for t in self.trials])

    @property
    def mu(self):
        return float(np.mean(self.rmse_values))

    @property
    def sigma(self):
        return float(np.std(self.rmse_values))

    @property
    def tte_mu(self):
        return float(np.mean([t.tte_s for t in self.trials]))

    @property
    def tte_sigma(self):
        return float(np.std([t.tte_s for t in self.trials]))

    CSV_COLUMNS = ("model", "dataset", "seed", "rmse", "tte_s")

    def to_csv(self, timing=True) -> str:
        cols = self.CSV_COLUMNS if timing else self.CSV_COLUMNS[:-1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for t in self.trials:
            row = [self.model, self.dataset, t.seed, repr(float(t.rmse))]
            if timing:
                row.append(f"{t.tte_s:.3f}")
            w.writerow(row)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> list["RunReport"]:
        reports = {}
        for row in csv.DictReader(io.StringIO(text)):
            key = (row["model"], row["dataset"])
            rep = reports.setdefault(key, cls(*key))
            rep.trials.append(TrialResult(seed=int(row["seed"]), rmse=float(row["rmse"]),
                                          tte_s=float(row.get("tte_s") or "nan"), epoch_losses=[],
                                          val_rmse=[], baseline_rmse=float("nan")))
        return list(reports.values())

    def epoch_log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed", "epoch", "train_loss", "val_rmse"])
        for t in self.trials:
            for e, (loss, v) in enumerate(zip(t.epoch_losses, t.val_rmse)):
                w.writerow([t.seed, e, repr(float(loss)), repr(float(v))])
        return buf.getvalue()


# --- training -----------------------------------------------------------------------

@dataclass
class Normalizer:
    x: tuple
    y: tuple

    @classmethod
    def fit(cls, data, idx, enabled=True):
        (xm, xs), (ym, ys) = data.channel_stats(idx)
        if not enabled:
            xm, xs, ym, ys = np.zeros_like(xm), np.ones_like(xs), np.zeros_like(ym), np.ones_like(ys)
        return cls((xm, xs), (ym, ys))


def predict(model, data, idx, norm: Normalizer, cfg: TrainConfig):
    """Predictions in target units for samples ``idx``."""
    dtype = np.dtype(cfg.dtype)
    outs = []
    with ad.no_grad():
        for start in range(0, len(idx), cfg.batch_size):
            b = idx[start:start + cfg.batch_size]
            out = data.forward(model, data.batch(b, norm.x, dtype))
            outs.append(data.from_model_output(out.data.astype(float), norm.y))
    return np.concatenate(outs) if outs else np.zeros((0,) + data.targets.shape[1:])


def evaluate(model, data, idx, norm, cfg):
    pred = predict(model, data, idx, norm, cfg)
    return rmse(pred, data.targets[idx], data.target_mask(idx, cfg.include_padding), cfg.pooled_rmse), pred


def mean_baseline_rmse(data, train_idx, test_idx, cfg: TrainConfig):
    """RMSE of predicting the training-target mean everywhere."""
    m = data.target_mask(train_idx)
    mean = data.targets[train_idx][m].mean()
    tgt = data.targets[test_idx]
    return rmse(np.full_like(tgt, mean), tgt, data.target_mask(test_idx, cfg.include_padding), cfg.pooled_rmse)


def train(model, data, cfg: TrainConfig, seed: int, splits=None, return_predictions=False,
          clock=time.perf_counter):
    """One seeded trial. Returns a :class:`TrialResult` (and test predictions on request).

    ``clock`` times the optimisation part of each epoch; validation is excluded.
    """
    dtype = np.dtype(cfg.dtype)
    if model.dtype != dtype:
        model.astype(dtype)
    train_idx, val_idx, test_idx = splits or split_dataset(len(data), cfg.split, cfg.split_seed)
    norm = Normalizer.fit(data, train_idx, cfg.normalize)
    opt = ad.Adam(model.trainable_parameters(), lr=cfg.peak_lr)
    rng = np.random.default_rng([seed, 1])
    epoch_losses, val_curve, times = [], [], []
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(train_idx)
        losses = []
        t0 = clock()
        for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
            b = np.sort(order[start:start + cfg.batch_size])
            inputs = data.batch(b, norm.x, dtype)
            target = data.to_model_target(b, norm.y).astype(dtype)
            opt.zero_grad()
            out = data.forward(model, inputs)
            loss = ad.mse_loss(out, target, data.target_mask(b, cfg.include_padding))
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {bi}")
            loss.backward()
            opt.step(lr=lr)
            losses.append(value)
        times.append(clock() - t0)
        epoch_losses.append(float(np.mean(losses)))
        val_curve.append(evaluate(model, data, val_idx, norm, cfg)[0] if len(val_idx) else float("nan"))
        log.debug("epoch %d lr %.3e loss %.4e val %.4e", epoch, lr, epoch_losses[-1], val_curve[-1])
    test_rmse, pred = evaluate(model, data, test_idx, norm, cfg)
    err = np.abs(pred - data.targets[test_idx])
    mask = data.target_mask(test_idx, cfg.include_padding)
    result = TrialResult(
        seed=seed, rmse=test_rmse,
        tte_s=max(round(float(np.mean(times)) if times else 0.0, 3), 0.001),
        epoch_losses=epoch_losses, val_rmse=val_curve,
        baseline_rmse=mean_baseline_rmse(data, train_idx, test_idx, cfg),
        max_abs_error=float(err[mask].max()),
    )
    model.normalizer = norm
    if return_predictions:
        return result, pred
    return result


def run_trials(make_model: Callable[[int], object], data, cfg: TrainConfig, model_name: str,
               dataset_name: str, parallel=False, on_trial=None, clock=time.perf_counter) -> RunReport:
    """Train one fresh model per seed and collect a :class:`RunReport`.

    ``on_trial(seed, model, result, predictions)`` is called after each trial.
    """
    report = RunReport(model_name, dataset_name)
    splits = split_dataset(len(data), cfg.split, cfg.split_seed)

    def one(seed):
        model = make_model(seed)
        res, pred = train(model, data, cfg, seed, splits=splits, return_predictions=True, clock=clock)
        if on_trial is not None:
            on_trial(seed, model, res, pred)
        return res

    if parallel:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=len(cfg.seeds)) as pool:
            report.trials = list(pool.map(one, cfg.seeds))
    else:
        report.trials = [one(s) for s in cfg.seeds]
    return report
