"""Difference-field images and results tables."""

from __future__ import annotations

import csv
import io
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError
from .trainer import RunReport

KINDS = ("ground-truth", "absolute-difference")
MISSING = "—"


@dataclass(frozen=True)
class FieldFigure:
    values: np.ndarray        # (H, W)
    vmin: float
    vmax: float
    kind: str = "absolute-difference"
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ShapeError(f"figure values must be 2-d, got {v.shape}")
        if not self.vmin < self.vmax:
            raise ValueError(f"need vmin < vmax, got ({self.vmin}, {self.vmax})")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        object.__setattr__(self, "values", v)

    @property
    def scale(self):
        return (self.vmin, self.vmax)

    def to_bytes(self) -> np.ndarray:
        """8-bit intensities. Difference figures map vmin to white, vmax to black."""
        t = (np.clip(self.values, self.vmin, self.vmax) - self.vmin) / (self.vmax - self.vmin)
        if self.mask is not None:
            t = np.where(self.mask, t, 0.0)
        level = np.floor(255.0 * t + 0.5)
        if self.kind == "absolute-difference":
            level = 255.0 - level
        return level.astype(np.uint8)


def diff_field(pred, truth, mask=None, vmax: Optional[float] = None, percentile: Optional[float] = 99.0):
    """Per-cell ``|pred - truth|``; invalid cells hold 0 and render at ``vmin``.

    ``vmax`` defaults to the given percentile of the valid errors, or to
    their maximum when ``percentile`` is None.
    """
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    m = np.ones(pred.shape, bool) if mask is None else np.asarray(mask, bool)
    if m.shape != pred.shape:
        raise ShapeError(f"mask {m.shape} does not match field {pred.shape}")
    err = np.where(m, np.abs(pred - truth), 0.0)
    if vmax is None:
        valid = err[m]
        vmax = float(np.percentile(valid, percentile)) if percentile is not None and valid.size else float(err.max())
    if vmax <= 0.0:
        vmax = 1.0
    return FieldFigure(err, 0.0, float(vmax), "absolute-difference", m)


def render_pgm(fig: FieldFigure, path) -> Path:
    """Binary 8-bit PGM plus a ``<name>.scale.txt`` sidecar holding vmin and vmax."""
    path = Path(path)
    data = fig.to_bytes()
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
    sidecar = path.with_name(path.stem + ".scale.txt")
    sidecar.write_text(f"kind {fig.kind}\nvmin {fig.vmin!r}\nvmax {fig.vmax!r}\n", encoding="utf-8")
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(raw[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)


# --- tables -------------------------------------------------------------------------

def _grid(reports: Sequence[RunReport]):
    models, datasets, cells = [], [], {}
    for r in reports:
        if r.model not in models:
            models.append(r.model)
        if r.dataset not in datasets:
            datasets.append(r.dataset)
        cells.setdefault((r.dataset, r.model), RunReport(r.model, r.dataset)).trials.extend(r.trials)
    return models, datasets, cells


def _fmt(x):
    return f"{x:.3g}"


def render_table(reports: Sequence[RunReport]):
    """``(markdown, csv)``: one row per dataset, RMSE and TTE mu/sigma per model.

    The lowest mean RMSE of each dataset row is bold; ties are all bold.
    """
    models, datasets, cells = _grid(reports)
    head = ["Dataset"] + [f"{m} RMSE μ/σ | {m} TTE μ/σ (s)" for m in models]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * (1 + 2 * len(models))]
    for d in datasets:
        present = [cells[(d, m)].mu for m in models if (d, m) in cells]
        best = min(present) if present else None
        row = [d]
        for m in models:
            c = cells.get((d, m))
            if c is None:
                row += [MISSING, MISSING]
                continue
            entry = f"{_fmt(c.mu)} / {_fmt(c.sigma)}"
            row.append(f"**{entry}**" if c.mu == best else entry)
            row.append(f"{_fmt(c.tte_mu)} / {_fmt(c.tte_sigma)}")
        lines.append("| " + " | ".join(row) + " |")
    markdown = "\n".join(lines) + "\n"

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dataset", "model", "n_seeds", "rmse_mu", "rmse_sigma", "tte_mu", "tte_sigma"])
    for d in datasets:
        for m in models:
            c = cells.get((d, m))
            if c is None:
                w.writerow([d, m, 0, "", "", "", ""])
            else:
                w.writerow([d, m, len(c.trials), repr(c.mu), repr(c.sigma), repr(c.tte_mu), repr(c.tte_sigma)])
    return markdown, buf.getvalue()


def read_table_csv(text: str):
    """``{(dataset, model): (rmse_mu, rmse_sigma, tte_mu, tte_sigma)}``; missing cells are skipped."""
    out = OrderedDict()
    for row in csv.DictReader(io.StringIO(text)):
        if row["rmse_mu"]:
            out[(row["dataset"], row["model"])] = tuple(
                float(row[k]) for k in ("rmse_mu", "rmse_sigma", "tte_mu", "tte_sigma"))
    return out
