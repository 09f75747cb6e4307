"""Shared test utilities: central differences and error metrics."""
import numpy as np

H = 1e-6


def numeric_grad(f, arr, h=H):
    """Central-difference gradient of scalar ``f()`` with respect to ``arr``,
    perturbed in place. Non-finite entries get a zero gradient."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        if not np.isfinite(old):
            continue
        arr[i] = old + h
        up = f()
        arr[i] = old - h
        down = f()
        arr[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(analytic, numeric):
    """``max|a - n| / max(|a|, |n|)`` over every entry of every array given.

    Taken over the whole gradient of one check, so a parameter whose true
    gradient is exactly zero does not turn rounding noise into a large ratio.
    """
    if isinstance(analytic, dict):
        keys = sorted(analytic)
        a = np.concatenate([np.ravel(analytic[k]) for k in keys])
        n = np.concatenate([np.ravel(numeric[k]) for k in keys])
    else:
        a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - n)) / scale)


def perturbed(state, rng, scale=0.3):
    """Copy of a model state with every parameter jittered, so zero and
    identity initializations do not hide gradient paths."""
    s = state.copy()
    for k, v in s.params.items():
        s.params[k] = v + scale * rng.standard_normal(v.shape)
    return s


def model_grad_error(state, x, upstream):
    """Relative error of ``backward_batch`` against central differences of
    ``sum(logits * upstream)`` over every parameter."""
    from moda.toymodel import backward_batch, forward_batch

    def loss():
        return float(np.sum(forward_batch(state, x)[0] * upstream))

    _, _, cache = forward_batch(state, x)
    grads, _ = backward_batch(state, cache, upstream)
    num = {k: numeric_grad(loss, state.params[k]) for k in state.params}
    return rel_error(grads, num)


def attention_grad_error(seed, mask):
    """Masked attention on random 4x3 inputs: gradients of Q, K, V and of the
    mask logits (finite entries, or the trainable ones of a CompiledMask)."""
    from moda.attention import AttentionConfig, masked_attention, masked_attention_backward
    rng = np.random.default_rng(seed)
    q, k, v = rng.standard_normal((3, 4, 3))
    up = rng.standard_normal((4, 3))
    cfg = AttentionConfig(3)
    compiled = hasattr(mask, "logits")
    logits = np.array(mask.logits if compiled else mask)

    def current():
        return mask.with_logits(logits) if compiled else logits

    def run():
        return float(np.sum(masked_attention(q, k, v, current(), cfg)[0] * up))

    dq, dk, dv, dm = masked_attention_backward(q, k, v, current(), cfg, up)
    keep = mask.trainable if compiled else np.isfinite(logits)
    analytic = {"q": dq, "k": dk, "v": dv, "m": np.where(keep, dm, 0.0)}
    numeric = {"q": numeric_grad(run, q), "k": numeric_grad(run, k),
               "v": numeric_grad(run, v), "m": numeric_grad(run, logits)}
    return rel_error(analytic, numeric)


def split_grad_error(seed, variant="PSEUDO", layout=(("V", 2), ("T", 3)), focus="T"):
    """Self/cross split attention: gradients of tokens and projections."""
    from moda.attention import (AttentionConfig, ProjectionSet, split_modal_attention,
                                split_modal_attention_backward)
    from moda.modality import ModalityPair, ModalSequence, make_segmentation
    from moda.modmask import MaskSpec, build_modal_masks
    rng = np.random.default_rng(seed)
    seg = make_segmentation(layout)
    n = sum(length for _, length in layout)
    tokens = rng.standard_normal((n, 3))
    ws = {k: rng.standard_normal((3, 3)) / np.sqrt(3) for k in ("wq", "wk", "wv")}
    pair = ModalityPair.of(seg, focus)
    ms, mc = build_modal_masks(seg, pair, MaskSpec(variant))
    cfg = AttentionConfig(3)
    nm = ms.shape[0]
    ds, dc = rng.standard_normal((2, nm, 3))

    def run():
        o_s, o_c = split_modal_attention(ModalSequence(tokens, seg), ProjectionSet(**ws), pair,
                                         ms, mc, cfg)
        return float(np.sum(o_s * ds) + np.sum(o_c * dc))

    g = split_modal_attention_backward(ModalSequence(tokens, seg), ProjectionSet(**ws), pair,
                                       ms, mc, cfg, ds, dc)
    num = {"tokens": numeric_grad(run, tokens), **{k: numeric_grad(run, w) for k, w in ws.items()}}
    return rel_error({k: g[k] for k in num}, num)


def aligner_chain_error(variant, mode, seed, d=4):
    """Aligner then fuser, with the Gram matrix built from target keys; checks
    gradients of both key sets and of every aligner and fuser parameter."""
    from moda import aligner as al
    rng = np.random.default_rng(seed)
    target = rng.standard_normal((3, d))
    other = rng.standard_normal((2, d))
    apar = al.init_aligner_params(variant, d, rng, init_scale=0.5)
    fpar = al.init_fuser_params(mode, d, 2, rng)
    for k in fpar:
        fpar[k] = fpar[k] + 0.3 * rng.standard_normal(fpar[k].shape)
    up = rng.standard_normal((2, d))

    def run():
        g, _ = al.compute_grams(target)
        y, _ = al.aligner_forward(variant, apar, other, g)
        out, _ = al.fuse_forward(mode, fpar, other, y)
        return float(np.sum(out * up))

    g, gc = al.compute_grams(target)
    y, ac = al.aligner_forward(variant, apar, other, g)
    _, fc = al.fuse_forward(mode, fpar, other, y)
    d_orig, d_al, fgrads = al.fuse_backward(fpar, up, fc)
    dx, dg, agrads = al.aligner_backward(apar, d_al, ac)
    d_target = al.compute_grams_backward(dg, gc) if dg is not None else np.zeros_like(target)
    analytic = {"other": d_orig + dx, "target": d_target,
                **{"a." + k: v for k, v in agrads.items()},
                **{"f." + k: fgrads.get(k, np.zeros_like(v)) for k, v in fpar.items()}}
    numeric = {"other": numeric_grad(run, other), "target": numeric_grad(run, target),
               **{"a." + k: numeric_grad(run, v) for k, v in apar.items()},
               **{"f." + k: numeric_grad(run, v) for k, v in fpar.items()}}
    return rel_error(analytic, numeric)


def oracle_cfg(c):
    """Plain-dict description of a ModelConfig for the scalar oracle."""
    b = c.block
    return dict(layout=c.layout, blocks=c.n_blocks, kind=b.attention_kind.value,
                mask=b.mask_spec.variant.value, beta=b.mask_spec.beta, p_base=b.mask_spec.p_base,
                fixed=b.mask_spec.fixed_value, aligner=b.aligner_variant.value,
                fuser=b.fuser_mode.value, mdm=b.use_mdm, daa=b.use_daa,
                combine=b.combine.value, align_values=b.align_values)
