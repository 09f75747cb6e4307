"""Attention-deficit diagnostics: per-modality activation, self/cross
disparity, exponential layer-decay fits and the cumulative cross-modal error,
plus JSON/CSV export of attention traces.
"""
import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BothZero, IoFailure, NonPositiveSeries, ShapeMismatch
from .modality import ModalityPair, Segment, positions

SCHEMA_VERSION = 1

METADATA = {
    "disparity": "100 * |self_mean - cross_mean| / max(self_mean, cross_mean)",
    "self_mean": "mean attention weight over (focus query, focus key) entries",
    "cross_mean": "mean attention weight over (focus query, other-modality key) entries",
    "epsilon": "per-layer multiplicative residual of a log-linear decay fit",
}


@dataclass(frozen=True, eq=False)
class TraceLayer:
    layer_index: int
    weights: np.ndarray
    segmentation: tuple

    @property
    def n(self):
        return sum(s.length for s in self.segmentation)


@dataclass(frozen=True, eq=False)
class AttentionTrace:
    """Per-layer attention weights. Each weight matrix is ``N x (N + sinks)``:
    the first ``N`` columns follow the segmentation, any extra trailing
    columns hold sink mass."""
    layers: tuple = ()

    def __post_init__(self):
        layers = tuple(self.layers)
        last = None
        for lay in layers:
            w = np.asarray(lay.weights)
            if w.ndim != 2 or w.shape[0] != lay.n or w.shape[1] < lay.n:
                raise ShapeMismatch(f"layer {lay.layer_index}: weights {w.shape} vs N={lay.n}")
            if not np.allclose(w.sum(axis=1), 1.0, rtol=0, atol=1e-10):
                raise ValueError(f"layer {lay.layer_index}: rows do not sum to one")
            if last is not None and lay.layer_index <= last:
                raise ValueError("layer indices must be strictly increasing")
            last = lay.layer_index
        object.__setattr__(self, "layers", layers)

    def __len__(self):
        return len(self.layers)


@dataclass(frozen=True)
class DecayProfile:
    gamma: float
    residuals: tuple
    e_dda: float = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "residuals", tuple(float(r) for r in self.residuals))
        if self.e_dda is None:
            object.__setattr__(self, "e_dda", cumulative_dda(self.gamma, self.residuals))

    def recompute(self):
        return cumulative_dda(self.gamma, self.residuals)


def modality_activation(trace_layer, pair):
    """Mean self-modal and cross-modal weight for queries of ``pair.focus``.

    ``trace_layer`` is a :class:`TraceLayer` or a ``(weights, segmentation)``
    tuple.
    """
    if isinstance(trace_layer, TraceLayer):
        w, seg = trace_layer.weights, trace_layer.segmentation
    else:
        w, seg = trace_layer
    seg = tuple(Segment(*s) for s in seg)
    w = np.asarray(w, dtype=np.float64)
    n = sum(s.length for s in seg)
    if w.shape[0] != n or w.shape[1] < n:
        raise ShapeMismatch(f"weights {w.shape} inconsistent with {n} tokens")
    pair.check(seg)
    qi = positions(seg, {pair.focus})
    ri = positions(seg, pair.rest)
    rows = w[qi]
    self_mean = float(rows[:, qi].mean())
    cross_mean = float(rows[:, ri].mean()) if len(ri) else 0.0
    return self_mean, cross_mean


def disparity(self_mean, cross_mean):
    """Percent gap between the two means, relative to the larger one."""
    if self_mean < 0 or cross_mean < 0:
        raise ValueError("activation means must be nonnegative")
    top = max(self_mean, cross_mean)
    if top == 0:
        raise BothZero("self and cross activation are both zero")
    return 100.0 * (abs(self_mean - cross_mean) / top)


def fit_decay(series):
    """Least-squares fit of ``log v_l = log c + l log gamma`` for l = 1..L.

    Returns ``(gamma, residuals)`` with ``residuals[l] = v_l / (c gamma^l)``.
    """
    v = np.asarray(series, dtype=np.float64)
    if v.ndim != 1 or v.size < 2:
        raise ValueError("need at least two layers to fit a decay")
    if not np.all(np.isfinite(v)) or np.any(v <= 0):
        raise NonPositiveSeries("decay fit needs strictly positive finite values")
    layers = np.arange(1, v.size + 1, dtype=np.float64)
    design = np.column_stack([np.ones_like(layers), layers])
    y = np.log(v)
    (log_c, log_gamma), *_ = np.linalg.lstsq(design, y, rcond=None)
    residuals = np.exp(y - (log_c + log_gamma * layers))
    return float(np.exp(log_gamma)), [float(r) for r in residuals]


def cumulative_dda(gamma, eps):
    """``prod_l gamma^l * eps_l`` over l = 1..L, accumulated in log space."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.size == 0:
        raise ValueError("need at least one layer")
    if not np.all(np.isfinite(eps)) or not math.isfinite(gamma):
        raise ValueError("gamma and eps must be finite")
    layers = np.arange(1, eps.size + 1)
    factors = np.concatenate([np.full(1, gamma), eps])
    if np.any(factors == 0):
        return 0.0
    negative = int(np.sum(eps < 0)) + (int(layers.sum()) if gamma < 0 else 0)
    log_mag = float(np.sum(layers) * math.log(abs(gamma)) + np.sum(np.log(np.abs(eps))))
    mag = math.exp(log_mag) if log_mag < 709.78 else math.inf
    return -mag if negative % 2 else mag


def decay_profile(series):
    gamma, residuals = fit_decay(series)
    return DecayProfile(gamma, residuals)


def _layer_records(lay):
    recs = []
    for s in lay.segmentation:
        pair = ModalityPair.of(lay.segmentation, s.modality)
        sm, cm = modality_activation(lay, pair)
        try:
            disp = disparity(sm, cm)
        except BothZero:
            disp = None
        recs.append({"layer": lay.layer_index, "focus": s.modality,
                     "self_mean": sm, "cross_mean": cm, "disparity": disp})
    return recs


def layer_summary(trace):
    """One record per (layer, focus modality)."""
    return [r for lay in trace.layers for r in _layer_records(lay)]


def layer_disparities(trace):
    """Per-layer disparity averaged over focus modalities; layers holding a
    single modality are skipped."""
    out = []
    for lay in trace.layers:
        if len(lay.segmentation) < 2:
            continue
        vals = [r["disparity"] for r in _layer_records(lay) if r["disparity"] is not None]
        if vals:
            out.append(float(np.mean(vals)))
    return out


def mean_disparity(trace):
    d = layer_disparities(trace)
    return float(np.mean(d)) if d else float("nan")


def series(summary, focus, metric="cross_mean"):
    """Pull one metric for one focus modality out of summary records."""
    return [r[metric] for r in summary if r["focus"] == focus]


def trace_document(trace, heatmaps=False):
    layers = []
    for lay in trace.layers:
        rec = {"layer": lay.layer_index,
               "segmentation": [list(s) for s in lay.segmentation],
               "modalities": [{k: r[k] for k in ("focus", "self_mean", "cross_mean", "disparity")}
                              for r in _layer_records(lay)]}
        if heatmaps:
            rec["heatmap"] = np.asarray(lay.weights).tolist()
        layers.append(rec)
    return {"schema_version": SCHEMA_VERSION, "metadata": METADATA, "layers": layers}


def export_trace(trace, path, heatmaps=False):
    """Write ``path`` (JSON) and a CSV companion next to it.

    The CSV has one row per (layer, focus, metric). Returns both paths.
    """
    path = Path(path)
    csv_path = path.with_suffix(".csv")
    doc = trace_document(trace, heatmaps)
    try:
        path.write_text(json.dumps(doc, indent=1))
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "focus", "metric", "value"])
            for lay in doc["layers"]:
                for rec in lay["modalities"]:
                    for metric in ("self_mean", "cross_mean", "disparity"):
                        val = rec[metric]
                        w.writerow([lay["layer"], rec["focus"], metric,
                                    "" if val is None else repr(val)])
    except OSError as exc:
        raise IoFailure(f"cannot write trace to {path}: {exc}") from exc
    return path, csv_path


def read_trace(path):
    """Parse an exported trace; returns ``(document, flat summary records)``."""
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read trace {path}: {exc}") from exc
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported trace schema {doc.get('schema_version')!r}")
    flat = [dict(m, layer=lay["layer"]) for lay in doc["layers"] for m in lay["modalities"]]
    return doc, flat
