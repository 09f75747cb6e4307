"""Training loop, evaluation, metric history and ablation grids."""
import csv
import io
import math
from dataclasses import dataclass, replace

import numpy as np

from ..diagnostics import fit_decay, layer_disparities, layer_summary, series
from ..errors import DivergedLoss, IoFailure, NonPositiveSeries
from ..rng import derive
from .config import AttentionKind
from .data import stack
from .model import backward_batch, cross_entropy, forward_batch, init_model, make_trace
from .optim import AdamW, cosine_lr


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-3
    steps: int = 2000
    batch: int = 32
    eval_every: int = 250
    weight_decay: float = 0.01
    warmup: float = 0.03
    seed: int = 0


MASK_KEYS = {"mask_variant": "variant", "beta": "beta", "p_base": "p_base",
             "fixed_value": "fixed_value"}

MDM_DAA_GRID = [
    {"name": "baseline", "attention_kind": "BASELINE_JOINT"},
    {"name": "mdm", "attention_kind": "MODA", "use_mdm": True, "use_daa": False},
    {"name": "daa", "attention_kind": "MODA", "use_mdm": False, "use_daa": True},
    {"name": "mdm+daa", "attention_kind": "MODA", "use_mdm": True, "use_daa": True},
]
ALIGNER_GRID = [{"name": v, "aligner_variant": v} for v in ("MLP", "MLP2", "MLP_GELU", "COV")]
FUSION_GRID = [{"name": v, "fuser_mode": v}
               for v in ("SELF_ONLY", "ALIGNED_ONLY", "CONCAT", "ADD")]
MASK_GRID = [{"name": v, "mask_variant": v} for v in ("INF", "FIX", "LEARN", "SPECIAL_TOKEN")]
PRESET_GRIDS = {"mdm_daa": MDM_DAA_GRID, "aligner": ALIGNER_GRID,
                "fusion": FUSION_GRID, "mask": MASK_GRID}


def apply_overrides(config, overrides):
    """Model config with block fields (and mask fields) replaced."""
    block = config.block
    mask = {MASK_KEYS[k]: v for k, v in overrides.items() if k in MASK_KEYS}
    rest = {k: v for k, v in overrides.items() if k not in MASK_KEYS and k != "name"}
    if mask:
        rest["mask_spec"] = replace(block.mask_spec, **mask)
    return replace(config, block=replace(block, **rest))


def _arrays(data):
    if isinstance(data, tuple):
        return data
    return stack(data)


def evaluate(state, x, y, chunk=512):
    """Loss, accuracy and the batch-mean attention trace on ``(x, y)``."""
    losses, correct, wsum = 0.0, 0, None
    for lo in range(0, len(y), chunk):
        xb, yb = x[lo:lo + chunk], y[lo:lo + chunk]
        logits, weights, _ = forward_batch(state, xb)
        loss, _ = cross_entropy(logits, yb)
        losses += loss * len(yb)
        correct += int(np.sum(np.argmax(logits, axis=1) == yb))
        ws = [w.sum(axis=0) for w in weights]
        wsum = ws if wsum is None else [a + b for a, b in zip(wsum, ws)]
    n = len(y)
    trace = make_trace(state.config, [w[None] / n for w in wsum or []])
    return {"loss": losses / n, "accuracy": correct / n, "trace": trace}


def _eval_row(step, lr, train_loss, ev, n_blocks):
    row = {"step": step, "lr": lr, "train_loss": train_loss,
           "eval_loss": ev["loss"], "eval_accuracy": ev["accuracy"]}
    disp = layer_disparities(ev["trace"])
    for i in range(n_blocks):
        row[f"disparity_{i + 1}"] = disp[i] if i < len(disp) else float("nan")
    row["mean_disparity"] = float(np.mean(disp)) if disp else float("nan")
    return row


def train(state, dataset, hyper, eval_data=None):
    """Train a copy of ``state``; returns ``(trained state, history)``.

    ``history`` gets one row every ``eval_every`` steps and one at the final
    step. Batches are drawn with replacement from a stream seeded by
    ``hyper.seed``.
    """
    x, y = _arrays(dataset)
    if len(y) == 0:
        raise ValueError("dataset is empty")
    ex, ey = (x, y) if eval_data is None else _arrays(eval_data)
    state = state.copy()
    opt = AdamW(state.params, weight_decay=hyper.weight_decay)
    rng = derive(hyper.seed, "batches")
    history, running = [], []
    n_blocks = state.config.n_blocks
    for step in range(hyper.steps):
        idx = rng.integers(0, len(y), hyper.batch)
        logits, _, cache = forward_batch(state, x[idx])
        loss, d_logits = cross_entropy(logits, y[idx])
        if not math.isfinite(loss):
            raise DivergedLoss(f"loss became {loss} at step {step}")
        grads, _ = backward_batch(state, cache, d_logits)
        lr = cosine_lr(step, hyper.steps, hyper.lr, hyper.warmup)
        opt.step(state.params, grads, lr)
        running.append(loss)
        done = step + 1
        if done % hyper.eval_every == 0 or done == hyper.steps:
            ev = evaluate(state, ex, ey)
            if not math.isfinite(ev["loss"]):
                raise DivergedLoss(f"eval loss became {ev['loss']} at step {done}")
            history.append(_eval_row(done, lr, float(np.mean(running)), ev, n_blocks))
            running = []
    return state, history


def history_columns(n_blocks):
    return (["step", "lr", "train_loss", "eval_loss", "eval_accuracy"]
            + [f"disparity_{i + 1}" for i in range(n_blocks)] + ["mean_disparity"])


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_rows(rows, columns, path=None):
    """CSV text for ``rows`` (dicts); also written to ``path`` if given."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    text = buf.getvalue()
    if path is not None:
        try:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        except OSError as exc:
            raise IoFailure(f"cannot write {path}: {exc}") from exc
    return text


def decay_rate(trace, focus="T", metric="cross_mean"):
    """Fitted per-layer decay of one activation series; NaN when the series
    is too short or not strictly positive."""
    vals = series(layer_summary(trace), focus, metric)
    try:
        return fit_decay(vals)[0]
    except (ValueError, NonPositiveSeries):
        return float("nan")


ABLATION_COLUMNS = ["row", "name", "attention_kind", "use_mdm", "use_daa", "aligner_variant",
                    "fuser_mode", "mask_variant", "accuracy", "mean_disparity", "gamma"]


def ablate(grid, dataset, base_config, hyper, eval_data=None, model_seed=0):
    """Train one model per grid row (same init seed and batch stream for
    every row) and report accuracy, mean disparity and decay rate."""
    if not grid:
        raise ValueError("ablation grid is empty")
    rows = []
    for i, overrides in enumerate(grid):
        cfg = apply_overrides(base_config, overrides)
        state, history = train(init_model(cfg, model_seed), dataset, hyper, eval_data)
        ex, ey = _arrays(dataset if eval_data is None else eval_data)
        ev = evaluate(state, ex, ey)
        b = cfg.block
        moda = b.attention_kind is AttentionKind.MODA
        disp = layer_disparities(ev["trace"])
        rows.append({
            "row": i, "name": overrides.get("name", f"row{i}"),
            "attention_kind": b.attention_kind.value,
            "use_mdm": moda and b.use_mdm, "use_daa": moda and b.use_daa,
            "aligner_variant": b.aligner_variant.value, "fuser_mode": b.fuser_mode.value,
            "mask_variant": b.mask_spec.variant.value,
            "accuracy": ev["accuracy"],
            "mean_disparity": float(np.mean(disp)) if disp else float("nan"),
            "gamma": decay_rate(ev["trace"]),
        })
    return rows
