"""Acceptance criteria, one test each, at their stated tolerances.

Each test records a one-line PASS/FAIL verdict (shown in the pytest summary
under "acceptance criteria") before asserting.
"""
import itertools
import math
import time
import timeit

import numpy as np
import pytest

import oracle
from acceptance_log import record
from helpers import (aligner_chain_error, attention_grad_error, model_grad_error, oracle_cfg,
                     perturbed, split_grad_error)
from moda import aligner, cli
from moda.aligner import AlignerVariant, FuserMode, gram_matrix, normalize_gram
from moda.attention import AttentionConfig, ProjectionSet, split_modal_attention
from moda.diagnostics import cumulative_dda, fit_decay
from moda.modality import ModalityPair, ModalSequence, make_segmentation
from moda.modmask import (MaskSpec, MaskVariant, build_learnable_mask, build_modal_masks,
                          build_pseudo_mask)
from moda.numerics import gelu
from moda.toymodel import (MDM_DAA_GRID, PRESET_GRIDS, BlockConfig, ModelConfig, SyntheticTask,
                           TrainConfig, ablate, apply_overrides, block_forward, forward_batch,
                           gen_ids, init_model)
from moda.toymodel.data import embed_ids


# -- 1 --------------------------------------------------------------------------

MODEL_ROWS = ([row for name in sorted(PRESET_GRIDS) for row in PRESET_GRIDS[name]]
              + [{"combine": "sum"}, {"align_values": True}, {"mask_variant": "PSEUDO"}])
LAYOUTS = [(("V", 2), ("T", 2)), (("V", 3), ("T", 3)), (("V", 1), ("T", 2)),
           (("V", 2), ("T", 3))]


def test_criterion_01_gradient_suite():
    t0 = time.perf_counter()
    worst = {}

    def note(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    for seed in range(20):
        rng = np.random.default_rng(seed)
        mask = np.where(np.tril(np.ones((4, 4))) > 0, rng.standard_normal((4, 4)), -np.inf)
        note("masked_attention", attention_grad_error(seed, mask))
        note("learnable_mask", attention_grad_error(seed, build_learnable_mask(
            4, seed=seed, init_noise=0.5)))
        variant = ["INF", "PSEUDO", "FIX", "LEARN", "SPECIAL_TOKEN"][seed % 5]
        note("split_modal_attention", split_grad_error(seed, variant, focus="VT"[seed % 2]))
        for av in AlignerVariant:
            note(f"aligner_{av.value}", aligner_chain_error(av, FuserMode("CONCAT"), seed))
        for fm in FuserMode:
            note(f"fuser_{fm.value}", aligner_chain_error(AlignerVariant("COV"), fm, seed))
        layout = LAYOUTS[seed % len(LAYOUTS)]
        cfg = apply_overrides(ModelConfig(BlockConfig(d=4), n_blocks=2, layout=layout),
                              MODEL_ROWS[seed % len(MODEL_ROWS)])
        st = perturbed(init_model(cfg, seed), rng)
        x = rng.standard_normal((1, cfg.n_tokens, 4))
        note("toy_model", model_grad_error(st, x, rng.standard_normal((1, 2))))
    elapsed = time.perf_counter() - t0
    top = max(worst.values())
    ok = top < 1e-5 and elapsed < 60
    record(1, "gradient suite vs central differences", ok,
           f"max rel err {top:.2e} over {len(worst)} components x 20 seeds, {elapsed:.1f}s")
    assert top < 1e-5, worst
    assert elapsed < 60


# -- 2 --------------------------------------------------------------------------

def test_criterion_02_mask_structure():
    t0 = time.perf_counter()
    bad = []
    for n, beta in itertools.product(range(1, 33), (0.0, 0.05, 0.1, 0.5)):
        m = build_pseudo_mask(n, beta=beta, p_base=0.0)
        for i in range(1, n + 1):
            row = m.pseudo[i - 1]
            if row.sum() != n - i:
                bad.append(("count", n, beta, i))
            for j in range(1, n - i + 1):
                if not row[i - 1 + j] or m.logits[i - 1, i - 1 + j] != 0.0 - (j - 1) * beta:
                    bad.append(("value", n, beta, i, j))
    elapsed = time.perf_counter() - t0
    ok = not bad and elapsed < 1
    record(2, "pseudo-mask counts and decay values", ok,
           f"{len(bad)} violations, {elapsed:.2f}s")
    assert not bad, bad[:5]
    assert elapsed < 1


# -- 3 --------------------------------------------------------------------------

def test_criterion_03_gram_properties():
    t0 = time.perf_counter()
    asym = psd = norm_err = 0.0
    psd = math.inf
    for seed in range(100):
        rng = np.random.default_rng(seed)
        keys = rng.standard_normal((int(rng.integers(1, 9)), int(rng.integers(2, 7))))
        gm = gram_matrix(keys)
        asym = max(asym, float(np.max(np.abs(gm.g - gm.g.T))))
        probes = rng.standard_normal((32, keys.shape[1]))
        psd = min(psd, float(np.min(np.einsum("pi,ij,pj->p", probes, gm.g, probes))))
        norm_err = max(norm_err, abs(float(np.linalg.norm(normalize_gram(gm))) - 1))
    elapsed = time.perf_counter() - t0
    ok = asym < 1e-10 and psd >= -1e-8 and norm_err <= 1e-12 and elapsed < 5
    record(3, "Gram symmetry, PSD and unit normalization", ok,
           f"asym {asym:.1e}, min probe {psd:.2e}, norm err {norm_err:.1e}, {elapsed:.2f}s")
    assert ok


# -- 4 --------------------------------------------------------------------------

def reference_split_block(params, seg, x, d):
    """Split self/cross attention built from the attention primitives with
    causal -inf modal masks, concat projection, residual and GELU FFN."""
    proj = ProjectionSet(params["b0.wq"], params["b0.wk"], params["b0.wv"])
    cfg = AttentionConfig(d)
    seq = ModalSequence(x, seg)
    out = np.zeros_like(x)
    for s in seg:
        pair = ModalityPair.of(seg, s.modality)
        ms, mc = build_modal_masks(seg, pair, MaskSpec(MaskVariant.INF))
        o_self, o_cross = split_modal_attention(seq, proj, pair, ms, mc, cfg)
        out[s.start:s.stop] = np.hstack([o_self, o_cross]) @ params["b0.wc"]
    h = x + out
    u = gelu(h @ params["b0.ffn.w1"] + params["b0.ffn.b1"])
    return h + u @ params["b0.ffn.w2"] + params["b0.ffn.b2"]


def test_criterion_04_identity_start():
    t0 = time.perf_counter()
    worst = 0.0
    for fuser in ("ADD", "CONCAT"):
        cfg = ModelConfig(BlockConfig(d=6, mask_spec=MaskSpec(MaskVariant.INF, beta=0.0),
                                      fuser_mode=fuser, use_mdm=True, use_daa=True),
                          n_blocks=1, layout=(("V", 4), ("T", 3)))
        for seed in range(25):
            st = init_model(cfg, seed)
            x = np.random.default_rng(1000 + seed).standard_normal((cfg.n_tokens, cfg.d))
            got, _ = block_forward(st, 0, x[None])
            ref = reference_split_block(st.params, cfg.segmentation, x, cfg.d)
            worst = max(worst, float(np.max(np.abs(got[0] - ref))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 5
    record(4, "zero-init MODA block equals the baseline split block", ok,
           f"max abs diff {worst:.1e} on 50 inputs, {elapsed:.2f}s")
    assert ok


# -- 5 --------------------------------------------------------------------------

TWO_MODAL_LAYOUTS = [(("V", a), ("T", n - a)) for n in (2, 3, 4) for a in range(1, n)]


def test_criterion_05_oracle_equivalence():
    worst, cases = 0.0, 0
    d = 4
    for layout in TWO_MODAL_LAYOUTS:
        seg = make_segmentation(layout)
        n = sum(k for _, k in layout)
        rng = np.random.default_rng(0)
        x = rng.standard_normal((n, d))
        proj = ProjectionSet.random(d, rng)
        xs = x.tolist()
        q, k, v = (oracle.matmul(xs, w.tolist()) for w in (proj.wq, proj.wk, proj.wv))
        for variant in ("INF", "PSEUDO", "FIX", "SPECIAL_TOKEN"):
            for s in seg:
                pair = ModalityPair.of(seg, s.modality)
                ms, mc = build_modal_masks(seg, pair, MaskSpec(variant, beta=0.1))
                o_self, o_cross = split_modal_attention(ModalSequence(x, seg), proj, pair, ms, mc,
                                                        AttentionConfig(d))
                qi = list(range(s.start, s.stop))
                ri = [i for i in range(n) if i not in qi]
                for keys, got in ((qi, o_self), (ri, o_cross)):
                    rows, sinks = oracle.enumerate_mask(qi, keys, variant, beta=0.1)
                    ref, _ = oracle.attention([q[i] for i in qi], [k[i] for i in keys],
                                              [v[i] for i in keys], rows, math.sqrt(d), sinks)
                    worst = max(worst, float(np.max(np.abs(got - np.array(ref)))))
                    cases += 1
        for row in MODEL_ROWS:
            cfg = apply_overrides(ModelConfig(BlockConfig(d=d), n_blocks=2, layout=layout), row)
            st = perturbed(init_model(cfg, 0), np.random.default_rng(0))
            logits = forward_batch(st, x[None])[0][0]
            ref = oracle.model_logits(oracle_cfg(cfg), st.params, xs)
            worst = max(worst, float(np.max(np.abs(logits - np.array(ref)))))
            cases += 1
    ok = worst <= 1e-10
    record(5, "forward outputs match the scalar straight-line oracle", ok,
           f"max abs diff {worst:.1e} over {cases} cases on {len(TWO_MODAL_LAYOUTS)} layouts")
    assert ok


# -- 6 --------------------------------------------------------------------------

def test_criterion_06_decay_fit_exactness():
    gamma_err = resid_err = dda_err = 0.0
    rng = np.random.default_rng(0)
    for length in range(2, 13):
        for gamma in (0.25, 0.5, 0.9, 1.0, 1.3):
            c = float(rng.uniform(0.1, 2.0))
            g, res = fit_decay(c * gamma ** np.arange(1, length + 1))
            gamma_err = max(gamma_err, abs(g - gamma))
            resid_err = max(resid_err, float(np.max(np.abs(np.array(res) - 1))))
            eps = rng.uniform(0.5, 1.5, length)
            naive = 1.0
            for l, e in enumerate(eps, start=1):
                naive *= gamma ** l * e
            dda_err = max(dda_err, abs(cumulative_dda(gamma, eps) - naive) / abs(naive))
    ok = gamma_err <= 1e-9 and resid_err <= 1e-9 and dda_err <= 1e-12
    record(6, "decay fit and cumulative error exactness", ok,
           f"gamma err {gamma_err:.1e}, residual err {resid_err:.1e}, E_DDA rel err {dda_err:.1e}")
    assert ok


# -- 7 and 8 ----------------------------------------------------------------------

SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def directional_runs():
    """The four-way MDM/DAA grid on the synthetic task for every seed."""
    t0 = time.perf_counter()
    out = {}
    for seed in SEEDS:
        task = SyntheticTask(seed=seed)
        cfg = ModelConfig(BlockConfig(d=32), n_blocks=2, layout=task.layout)
        arrays = {}
        for split, count in (("train", 4096), ("test", 1024)):
            v, t, y = gen_ids(task, count, split)
            arrays[split] = (embed_ids(task, v, t), y)
        hyper = TrainConfig(steps=2000, batch=32, eval_every=500, seed=seed)
        rows = ablate(MDM_DAA_GRID, arrays["train"], cfg, hyper, arrays["test"], model_seed=seed)
        out[seed] = {r["name"]: r for r in rows}
    return out, time.perf_counter() - t0


def test_criterion_07_directional_disparity(directional_runs):
    runs, elapsed = directional_runs
    per_seed = {s: (runs[s]["mdm+daa"]["mean_disparity"], runs[s]["baseline"]["mean_disparity"])
                for s in SEEDS}
    ok = all(m < b for m, b in per_seed.values()) and elapsed < 600
    detail = ", ".join(f"seed {s}: {m:.1f} vs {b:.1f}" for s, (m, b) in per_seed.items())
    record(7, "MODA mean disparity below baseline on every seed", ok,
           f"{detail}; {elapsed:.0f}s for criteria 7-8")
    assert all(m < b for m, b in per_seed.values()), per_seed
    assert elapsed < 600


def test_criterion_08_directional_accuracy(directional_runs):
    runs, _ = directional_runs
    acc = {name: float(np.mean([runs[s][name]["accuracy"] for s in SEEDS]))
           for name in ("baseline", "mdm", "daa", "mdm+daa")}
    full = acc["mdm+daa"]
    ok = all(full >= acc[t] >= acc["baseline"] - 0.02 for t in ("mdm", "daa"))
    record(8, "accuracy ordering full >= single toggles >= baseline - 2%", ok,
           ", ".join(f"{k} {v:.4f}" for k, v in acc.items()))
    assert ok, acc


# -- 9 --------------------------------------------------------------------------

def aligner_pass(keys_target, keys_other, apar, fpar):
    g, _ = aligner.compute_grams(keys_target)
    y, _ = aligner.aligner_forward("COV", apar, keys_other, g)
    return aligner.fuse_forward("CONCAT", fpar, keys_other, y)[0]


def test_criterion_09_linear_complexity(monkeypatch):
    t0 = time.perf_counter()
    d = 32
    rng = np.random.default_rng(0)
    apar = aligner.init_aligner_params("COV", d, rng, init_scale=0.1)
    fpar = aligner.init_fuser_params("CONCAT", d, rng=rng)
    times = {}
    for n in (256, 512, 1024):
        kt, ko = rng.standard_normal((2, n, d))
        runs = timeit.repeat(lambda: aligner_pass(kt, ko, apar, fpar), number=200, repeat=7)
        best = min(runs)
        times[n] = best
    ratios = [times[512] / times[256], times[1024] / times[512]]

    calls = []
    real = aligner.compute_grams
    monkeypatch.setattr(aligner, "compute_grams", lambda k: calls.append(1) or real(k))
    cfg = ModelConfig(BlockConfig(d=8), n_blocks=3, layout=(("V", 5), ("T", 3)))
    forward_batch(init_model(cfg, 0), rng.standard_normal((4, 8, 8)))
    expected = cfg.n_blocks * len(cfg.layout)
    elapsed = time.perf_counter() - t0
    ok = max(ratios) <= 2.5 and len(calls) == expected and elapsed < 30
    record(9, "aligner time linear in N, one Gram build per modality per layer", ok,
           f"doubling ratios {ratios[0]:.2f}, {ratios[1]:.2f}; "
           f"{len(calls)} Gram builds (expected {expected}); {elapsed:.1f}s")
    assert ok


# -- 10 -------------------------------------------------------------------------

def test_criterion_10_determinism(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[run]\nseed = 7\n\n[model]\nd = 8\n\n[task]\ntrain_count = 256\n"
                   "test_count = 128\n\n[train]\nsteps = 40\nbatch = 16\neval_every = 10\n")
    bodies = []
    for out in ("first", "second"):
        assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / out)]) == 0
        bodies.append((tmp_path / out / "metrics.csv").read_bytes())
    ok = bodies[0] == bodies[1] and len(bodies[0].splitlines()) > 1
    record(10, "two identical train runs give byte-identical metrics CSV", ok,
           f"{len(bodies[0])} bytes, {len(bodies[0].splitlines()) - 1} rows")
    assert ok
