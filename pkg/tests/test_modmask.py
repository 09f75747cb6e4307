import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracle
from helpers import numeric_grad, rel_error
from moda.attention import AttentionConfig, masked_attention, masked_attention_backward
from moda.errors import InvalidDecay, UnknownModality
from moda.modality import ModalityPair, make_segmentation
from moda.modmask import (MaskSpec, MaskVariant, build_causal_inf_mask, build_fixed_mask,
                          build_learnable_mask, build_mask, build_modal_masks,
                          build_pseudo_mask, build_special_token_mask, compile_positions,
                          modal_pairs)

NEG = -np.inf


def test_causal_examples():
    assert np.array_equal(build_causal_inf_mask(1).logits, [[0.0]])
    assert np.array_equal(build_causal_inf_mask(2).logits, [[0, NEG], [0, 0]])
    m = build_causal_inf_mask(3)
    assert np.isneginf(m.logits).sum() == 3
    assert np.array_equal(np.isneginf(m.logits), np.triu(np.ones((3, 3), bool), 1))


def test_pseudo_zero_decay():
    m = build_pseudo_mask(5, beta=0.0)
    assert np.all(m.logits == 0.0)
    assert m.pseudo_count.tolist() == [4, 3, 2, 1, 0]


def test_pseudo_n3_rows():
    m = build_pseudo_mask(3, beta=0.1)
    assert m.logits[0][m.pseudo[0]].tolist() == [0.0, -0.1]
    assert m.logits[1][m.pseudo[1]].tolist() == [0.0]
    assert m.pseudo[2].sum() == 0


def test_pseudo_counts_n4():
    assert build_pseudo_mask(4, beta=0.5).pseudo_count.tolist() == [3, 2, 1, 0]


def test_negative_decay_rejected():
    with pytest.raises(InvalidDecay):
        build_pseudo_mask(3, beta=-0.1)
    with pytest.raises(InvalidDecay):
        MaskSpec(MaskVariant.LEARN, beta=-1.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 32), st.sampled_from([0.0, 0.05, 0.1, 0.5]), st.floats(-2, 2))
def test_pseudo_count_law_and_monotone_decay(n, beta, p_base):
    m = build_pseudo_mask(n, beta=beta, p_base=p_base)
    assert m.pseudo_count.sum() == n * (n - 1) // 2
    for i in range(n):
        row = m.logits[i][m.pseudo[i]]
        assert len(row) == n - 1 - i
        assert np.array_equal(row, p_base - np.arange(len(row)) * beta)
        assert np.all(m.value_participation[i][m.pseudo[i]] == False)  # noqa: E712


def test_fixed_mask():
    m = build_fixed_mask(3)
    assert m.logits[0, 1] == -10.0 and m.logits[0, 2] == -10.0 and m.pseudo[0, 1]
    assert build_fixed_mask(2, fixed_value=-3.0).logits[0, 1] == -3.0


def test_learnable_init_equals_pseudo():
    a = build_learnable_mask(6, seed=0, beta=0.1)
    b = build_pseudo_mask(6, beta=0.1)
    assert np.array_equal(a.logits, b.logits) and np.array_equal(a.pseudo, b.pseudo)
    assert np.array_equal(a.trainable, a.pseudo)
    assert np.array_equal(a.step(np.zeros(a.shape), 0.5).logits, a.logits)


def test_learnable_step_moves_only_trainable():
    m = build_learnable_mask(3)
    s = m.step(np.ones(m.shape), 0.5)
    assert np.array_equal(s.logits[~m.trainable], m.logits[~m.trainable])
    assert np.allclose(s.logits[m.trainable], m.logits[m.trainable] - 0.5)


def test_learnable_mask_gradient():
    rng = np.random.default_rng(0)
    q, k, v = rng.standard_normal((3, 4, 3))
    up = rng.standard_normal((4, 3))
    base = build_learnable_mask(4, seed=1, init_noise=0.4)
    logits = np.array(base.logits)
    cfg = AttentionConfig(3)

    def run():
        return float(np.sum(masked_attention(q, k, v, base.with_logits(logits), cfg)[0] * up))

    *_, dm = masked_attention_backward(q, k, v, base, cfg, up)
    assert rel_error(np.where(base.trainable, dm, 0.0), numeric_grad(run, logits)) < 1e-5


def test_special_token_mask():
    m = build_special_token_mask(1)
    assert np.array_equal(m.logits, [[0.0, 0.0]])
    assert m.n_sink == 1 and m.n_keys == 1
    assert not m.value_participation[0, 1]
    m = build_special_token_mask(4)
    assert m.shape == (4, 5)
    assert np.all(m.logits[:, -1] == 0.0)


def test_sink_absorbs_mass():
    rng = np.random.default_rng(0)
    q, k, v = rng.standard_normal((3, 4, 3))
    m = build_special_token_mask(4)
    out, w = masked_attention(q, k, v, m, AttentionConfig(3))
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(w[:, :4].sum(axis=1) < 1.0)
    assert np.allclose(out, w[:, :4] @ v, atol=1e-14)


def test_pseudo_sink_conservation():
    rng = np.random.default_rng(1)
    q, k, v = rng.standard_normal((3, 5, 3))
    m = build_pseudo_mask(5, beta=0.2)
    out, w = masked_attention(q, k, v, m, AttentionConfig(3))
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-12)
    real = np.where(m.value_participation, w, 0.0)
    assert np.allclose(out, real @ v, atol=1e-14)


def test_inf_mask_reproduces_reference_causal():
    rng = np.random.default_rng(2)
    q, k, v = rng.standard_normal((3, 5, 3))
    out, _ = masked_attention(q, k, v, build_causal_inf_mask(5), AttentionConfig(3))
    s = q @ k.T / np.sqrt(3)
    ref = np.zeros_like(out)
    for i in range(5):
        e = np.exp(s[i, :i + 1] - s[i, :i + 1].max())
        ref[i] = (e / e.sum()) @ v[:i + 1]
    assert np.max(np.abs(out - ref)) <= 1e-12


def test_modal_masks_single_modality():
    seg = make_segmentation([("T", 4)])
    ms, mc = build_modal_masks(seg, ModalityPair.of(seg, "T"), MaskSpec(MaskVariant.INF))
    assert mc.shape == (4, 0)
    assert np.array_equal(ms.logits, build_causal_inf_mask(4).logits)


def test_modal_masks_sequence_order():
    seg = make_segmentation([("V", 3), ("T", 2)])
    spec = MaskSpec(MaskVariant.INF)
    _, mc_t = build_modal_masks(seg, ModalityPair.of(seg, "T"), spec)
    assert np.all(mc_t.logits[0] == 0.0)
    _, mc_v = build_modal_masks(seg, ModalityPair.of(seg, "V"), spec)
    assert np.all(np.isneginf(mc_v.logits))


@pytest.mark.parametrize("layout", [[("V", 2), ("T", 2)], [("V", 3), ("T", 1), ("A", 2)]])
def test_modal_masks_match_enumeration(layout):
    seg = make_segmentation(layout)
    spec = MaskSpec(MaskVariant.PSEUDO, beta=0.1)
    for pair in modal_pairs(seg):
        qi = [i for s in seg if s.modality == pair.focus for i in range(s.start, s.stop)]
        ri = [i for s in seg if s.modality in pair.rest for i in range(s.start, s.stop)]
        ms, mc = build_modal_masks(seg, pair, spec)
        for mask, keys in ((ms, qi), (mc, ri)):
            rows, _ = oracle.enumerate_mask(qi, keys, "PSEUDO", beta=0.1)
            assert np.array_equal(mask.logits, [[lg for lg, _ in r] for r in rows])
            assert np.array_equal(mask.pseudo, [[p for _, p in r] for r in rows])


def test_modal_masks_unknown_modality():
    seg = make_segmentation([("V", 2), ("T", 2)])
    with pytest.raises(UnknownModality):
        build_modal_masks(seg, ModalityPair("X", {"V", "T"}), MaskSpec())


def test_build_mask_needs_length():
    with pytest.raises(ValueError):
        build_mask(MaskSpec(MaskVariant.INF))
    assert build_mask(MaskSpec(MaskVariant.INF, n=3)).shape == (3, 3)


def test_compile_positions_accepts_variant_name():
    m = compile_positions(np.arange(2), np.arange(2), "PSEUDO")
    assert m.variant is MaskVariant.PSEUDO and m.pseudo[0, 1]
