"""Command-line entry point.

    moda demo     [--config FILE] [--out DIR] [--seed N]
    moda train    [--config FILE] [--out DIR] [--seed N]
    moda ablate   [--config FILE] [--out DIR] [--seed N]
    moda diagnose --trace FILE [--config FILE] [--out DIR] [--seed N]

Exit codes: 0 ok, 2 invalid config or input, 3 diverged loss, 4 I/O failure.

The config file is INI-style (``key = value`` under ``[section]``). Sections:
``run``, ``model``, ``task``, ``train``, ``diag``, ``ablate`` and any number
of ``[grid.NAME]`` sections, each one ablation row of model overrides.
Unknown sections or keys are rejected.
"""
import argparse
import configparser
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diagnostics
from .errors import ConfigError, DivergedLoss, IoFailure, ModaError, NonPositiveSeries
from .modality import ModalityPair
from .modmask import MaskSpec, build_mask
from .toymodel import checkpoint
from .toymodel.config import BlockConfig, ModelConfig
from .toymodel.data import SyntheticTask, embed_ids, gen_ids
from .toymodel.model import type_rows, forward, init_model
from .toymodel.train import (ABLATION_COLUMNS, PRESET_GRIDS, TrainConfig, ablate,
                             apply_overrides, evaluate, history_columns, train, write_rows)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_int(s):
    return None if s.strip().lower() in ("", "none", "auto") else int(s)


def _str(s):
    return s.strip()


MODEL_KEYS = {
    "d": int, "blocks": int, "attention_kind": _str, "mask_variant": _str, "beta": float,
    "p_base": float, "fixed_value": float, "aligner_variant": _str, "fuser_mode": _str,
    "use_mdm": _bool, "use_daa": _bool, "combine": _str, "align_values": _bool,
    "adapter_rank": _opt_int, "ffn_mult": int,
}
SCHEMA = {
    "run": {"seed": int, "output_dir": _str},
    "model": MODEL_KEYS,
    "task": {"n_visual": int, "n_text": int, "visual_vocab": int, "text_vocab": int,
             "visual_scale": float, "position_sensitive": _bool, "train_count": int,
             "test_count": int},
    "train": {"lr": float, "steps": int, "batch": int, "eval_every": int,
              "weight_decay": float, "warmup": float},
    "diag": {"focus": _str, "metric": _str},
    "ablate": {"grid": _str},
}
GRID_KEYS = {k: v for k, v in MODEL_KEYS.items() if k not in ("d", "blocks")}

DEFAULT_CONFIG = """\
[run]
seed = 0
output_dir = moda-out

[model]
d = 32
blocks = 2
attention_kind = MODA
mask_variant = LEARN
beta = 0.1
p_base = 0.0
fixed_value = -10.0
aligner_variant = COV
fuser_mode = CONCAT
use_mdm = true
use_daa = true
combine = concat
align_values = false
adapter_rank = auto
ffn_mult = 2

[task]
n_visual = 8
n_text = 4
visual_vocab = 16
text_vocab = 16
visual_scale = 0.05
position_sensitive = true
train_count = 4096
test_count = 1024

[train]
lr = 0.002
steps = 2000
batch = 32
eval_every = 250
weight_decay = 0.01
warmup = 0.03

[diag]
focus = T
metric = cross_mean

[ablate]
grid = mdm_daa
"""


@dataclass
class RunConfig:
    seed: int
    output_dir: Path
    model: ModelConfig
    task: SyntheticTask
    train: TrainConfig
    train_count: int
    test_count: int
    diag_focus: str = "T"
    diag_metric: str = "cross_mean"
    grid: list = field(default_factory=list)


def _line_of(text, section, key=None):
    sec = None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[(.+)\]$", s)
        if m:
            sec = m.group(1).strip()
            if key is None and sec == section:
                return no
            continue
        if sec == section and key is not None and re.match(rf"{re.escape(key)}\s*[=:]", s):
            return no
    return 0


def _parse_ini(text, source):
    cp = configparser.ConfigParser(interpolation=None, default_section="__defaults__",
                                   inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return cp


def _typed(cp, text, source, schema_for):
    """``{section: {key: value}}`` with every key checked and converted."""
    out = {}
    for sec in cp.sections():
        schema = schema_for(sec)
        if schema is None:
            raise ConfigError(f"{source}: line {_line_of(text, sec)}: unknown section [{sec}]")
        vals = {}
        for key, raw in cp.items(sec):
            line = _line_of(text, sec, key)
            if key not in schema:
                raise ConfigError(f"{source}: line {line}: unknown key {key!r} in [{sec}]")
            try:
                vals[key] = schema[key](raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: line {line}: bad value for {key}: {exc}") from exc
        out[sec] = vals
    return out


def load_config(path=None, seed=None, out=None):
    """Parse ``path`` over the built-in defaults. ``seed``/``out`` override."""
    defaults = _parse_ini(DEFAULT_CONFIG, "<defaults>")
    merged = _typed(defaults, DEFAULT_CONFIG, "<defaults>", SCHEMA.get)
    user, text, source, grid = {}, "", "<defaults>", []
    if path is not None:
        source = str(path)
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cp = _parse_ini(text, source)
        user = _typed(cp, text, source,
                      lambda s: GRID_KEYS if s.startswith("grid.") else SCHEMA.get(s))
        for sec, vals in user.items():
            if sec.startswith("grid."):
                grid.append(dict(vals, name=sec[len("grid."):]))
            else:
                merged[sec].update(vals)
        if "seed" not in user.get("run", {}) and seed is None:
            raise ConfigError(f"{source}: [run] seed is required")
    if seed is not None:
        merged["run"]["seed"] = int(seed)
    if out is not None:
        merged["run"]["output_dir"] = str(out)
    try:
        return _build(merged, grid)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def _build(c, grid):
    run, m, t, tr = c["run"], c["model"], c["task"], c["train"]
    seed = run["seed"]
    block = BlockConfig(
        d=m["d"], attention_kind=m["attention_kind"],
        mask_spec=MaskSpec(m["mask_variant"], beta=m["beta"], p_base=m["p_base"],
                           fixed_value=m["fixed_value"]),
        aligner_variant=m["aligner_variant"], fuser_mode=m["fuser_mode"],
        use_mdm=m["use_mdm"], use_daa=m["use_daa"], combine=m["combine"],
        align_values=m["align_values"], adapter_rank=m["adapter_rank"], ffn_mult=m["ffn_mult"])
    task = SyntheticTask(seed=seed, n_visual=t["n_visual"], n_text=t["n_text"], d=m["d"],
                         visual_vocab=t["visual_vocab"], text_vocab=t["text_vocab"],
                         visual_scale=t["visual_scale"],
                         position_sensitive=t["position_sensitive"])
    model = ModelConfig(block=block, n_blocks=m["blocks"], layout=task.layout)
    if not grid:
        name = c["ablate"]["grid"]
        if name not in PRESET_GRIDS:
            raise ValueError(f"unknown preset grid {name!r}; choose from {sorted(PRESET_GRIDS)}")
        grid = [dict(g) for g in PRESET_GRIDS[name]]
    for g in grid:
        apply_overrides(model, g)
    if c["diag"]["metric"] not in ("self_mean", "cross_mean", "disparity"):
        raise ValueError("diag metric must be self_mean, cross_mean or disparity")
    return RunConfig(
        seed=seed, output_dir=Path(run["output_dir"]), model=model, task=task,
        train=TrainConfig(lr=tr["lr"], steps=tr["steps"], batch=tr["batch"],
                          eval_every=tr["eval_every"], weight_decay=tr["weight_decay"],
                          warmup=tr["warmup"], seed=seed),
        train_count=t["train_count"], test_count=t["test_count"],
        diag_focus=c["diag"]["focus"], diag_metric=c["diag"]["metric"], grid=grid)


def _outdir(cfg):
    try:
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {cfg.output_dir}: {exc}") from exc
    return cfg.output_dir


def _write(path, text):
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _fmt_mask(mask):
    """Rows of mask logits; hidden positions carrying a pseudo score get a ``*``."""
    rows = []
    for logit_row, pseudo_row in zip(mask.logits, mask.pseudo):
        cells = [f"{v:g}" + ("*" if p else "") for v, p in zip(logit_row, pseudo_row)]
        rows.append("  [" + ", ".join(cells) + "]")
    return "\n".join(rows)


def _data(cfg):
    def arrays(split, count):
        v, t, y = gen_ids(cfg.task, count, split)
        return embed_ids(cfg.task, v, t), y
    return arrays("train", cfg.train_count), arrays("test", cfg.test_count)


def cmd_demo(cfg):
    """One forward pass of a micro MODA model, with its masks, Gram norms and
    per-modality attention activation."""
    from .aligner import gram_matrix
    spec = cfg.model.block.mask_spec
    micro_task = SyntheticTask(seed=cfg.seed, n_visual=2, n_text=2, d=4)
    micro = ModelConfig(block=BlockConfig(d=4, mask_spec=spec,
                                          aligner_variant=cfg.model.block.aligner_variant,
                                          fuser_mode=cfg.model.block.fuser_mode),
                        n_blocks=1, layout=micro_task.layout)
    state = init_model(micro, cfg.seed)
    from .toymodel.data import gen_synthetic_dataset
    seq, label = gen_synthetic_dataset(micro_task, 1, "demo")[0]
    logits, trace = forward(state, seq)
    mask3 = build_mask(spec, 3)
    first = [f"{v:g}" for v in mask3.logits[0][mask3.pseudo[0]]]
    lines = [f"mask variant {spec.variant.value}, beta={spec.beta:g}, p_base={spec.p_base:g}",
             "(* marks a hidden position holding a pseudo score)",
             "mask (n=3):", _fmt_mask(mask3),
             f"pseudo scores of the first row: [{', '.join(first)}]"]
    for s in seq.segmentation:
        ms, mc = state.block_masks(0, s.modality)
        lines += [f"self mask for {s.modality}:", _fmt_mask(ms),
                  f"cross mask for {s.modality}:", _fmt_mask(mc)]
    p = state.params
    x = seq.tokens + p["pos"] + p["type"][type_rows(micro)]
    keys = x @ p["b0.wk"]
    for s in seq.segmentation:
        g = gram_matrix(keys[s.start:s.stop], s.modality)
        lines.append(f"Gram norm {s.modality}: {g.norm_value:.6g}")
    lay = trace.layers[0]
    for s in seq.segmentation:
        sm, cm = diagnostics.modality_activation(lay, ModalityPair.of(seq.segmentation, s.modality))
        lines.append(f"activation {s.modality}: self {sm:.6g} cross {cm:.6g}")
    lines.append(f"logits: {np.array2string(logits[0], precision=6)} (label {label})")
    report = "\n".join(lines) + "\n"
    print(report, end="")
    _write(_outdir(cfg) / "report.txt", report)
    return EXIT_OK


def cmd_train(cfg):
    out = _outdir(cfg)
    train_data, test_data = _data(cfg)
    state = init_model(cfg.model, cfg.seed)
    state, history = train(state, train_data, cfg.train, test_data)
    write_rows(history, history_columns(cfg.model.n_blocks), out / "metrics.csv")
    ev = evaluate(state, *test_data)
    diagnostics.export_trace(ev["trace"], out / "trace.json")
    checkpoint.save(state, out / "checkpoint.json")
    report = (f"steps {cfg.train.steps}\ntest accuracy {ev['accuracy']!r}\n"
              f"test loss {ev['loss']!r}\n"
              f"mean disparity {diagnostics.mean_disparity(ev['trace'])!r}\n")
    _write(out / "report.txt", report)
    print(report, end="")
    return EXIT_OK


def cmd_ablate(cfg):
    out = _outdir(cfg)
    train_data, test_data = _data(cfg)
    rows = ablate(cfg.grid, train_data, cfg.model, cfg.train, test_data, model_seed=cfg.seed)
    text = write_rows(rows, ABLATION_COLUMNS, out / "ablation.csv")
    _write(out / "report.txt", text)
    print(text, end="")
    return EXIT_OK


def cmd_diagnose(cfg, trace_path):
    out = _outdir(cfg)
    try:
        _, summary = diagnostics.read_trace(trace_path)
    except (ValueError, KeyError) as exc:
        raise IoFailure(f"malformed trace {trace_path}: {exc}") from exc
    vals = diagnostics.series(summary, cfg.diag_focus, cfg.diag_metric)
    prof = diagnostics.decay_profile(vals)
    report = (f"series {cfg.diag_metric} focus {cfg.diag_focus}: {vals!r}\n"
              f"gamma {prof.gamma!r}\nresiduals {list(prof.residuals)!r}\n"
              f"E_DDA {prof.e_dda!r}\n")
    _write(out / "report.txt", report)
    print(report, end="")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="moda", description=__doc__.split("\n\n")[0])
    ap.add_argument("command", choices=["demo", "train", "ablate", "diagnose"])
    ap.add_argument("--config", type=Path)
    ap.add_argument("--out", type=Path)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--trace", type=Path, help="trace JSON for the diagnose command")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.out)
        if args.command == "demo":
            return cmd_demo(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        if args.trace is None:
            raise ConfigError("diagnose needs --trace")
        return cmd_diagnose(cfg, args.trace)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonPositiveSeries as exc:
        print(f"cannot fit decay: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedLoss as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except IoFailure as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except ModaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
