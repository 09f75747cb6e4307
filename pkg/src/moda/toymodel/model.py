"""Toy multimodal transformer with hand-written reverse-mode gradients.

Inputs are batches of token features ``(B, N, d)`` sharing one modality
layout. Each block is pre-activation free: attention with a residual, then a
GELU feed-forward with a residual. The class logits read the last token,
which is the final text position in the (image, text) layout.

Parameters live in a flat ``{name: ndarray}`` dict so the optimizer,
checkpointing and finite-difference checks can treat them uniformly.
"""
import math
from dataclasses import dataclass

import numpy as np

from .. import aligner
from ..aligner import aligner_backward, aligner_forward, fuse_backward, fuse_forward
from ..attention import attend, attend_backward
from ..diagnostics import AttentionTrace, TraceLayer
from ..errors import ShapeMismatch
from ..modality import ModalityPair, positions
from ..modmask import MaskSpec, MaskVariant, build_modal_masks, compile_positions
from ..numerics import gelu, gelu_grad, softmax_rows
from ..rng import derive
from .config import AttentionKind, Combine


def _wgrad(x, dy):
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def _bgrad(dy):
    return dy.reshape(-1, dy.shape[-1]).sum(axis=0)


@dataclass(eq=False)
class ModelState:
    config: object
    params: dict

    def __post_init__(self):
        self._masks = _mask_templates(self.config)

    def copy(self):
        return ModelState(self.config, {k: v.copy() for k, v in self.params.items()})

    def with_params(self, params):
        return ModelState(self.config, params)

    def block_masks(self, i, m):
        """``(self_mask, cross_mask)`` for block ``i`` and focus modality ``m``
        with learned logits filled in."""
        ms, mc = self._masks[m]
        pre = f"b{i}.mask.{m}."
        if pre + "self" in self.params:
            ms = ms.with_logits(self.params[pre + "self"])
            mc = mc.with_logits(self.params[pre + "cross"])
        return ms, mc

    @property
    def causal_mask(self):
        return self._masks[None]


def _mask_spec(block):
    if block.attention_kind is AttentionKind.MODA and block.use_mdm:
        return block.mask_spec
    return MaskSpec(MaskVariant.INF)


def _mask_templates(config):
    seg = config.segmentation
    n = config.n_tokens
    out = {None: compile_positions(np.arange(n), np.arange(n), MaskSpec(MaskVariant.INF))}
    spec = _mask_spec(config.block)
    for s in seg:
        out[s.modality] = build_modal_masks(seg, ModalityPair.of(seg, s.modality), spec)
    return out


def init_model(config, seed=0):
    """Random initial parameters. Adapters start as identity maps (zero
    up-projection, ``[I; 0]`` concat projection)."""
    rng = derive(seed, "model-init")
    b = config.block
    d, h = b.d, b.ffn_mult * b.d
    n, n_mod = config.n_tokens, len(config.layout)

    def normal(*shape, std):
        return std * rng.standard_normal(shape)

    p = {"pos": normal(n, d, std=0.3), "type": normal(n_mod, d, std=0.3)}
    for i in range(config.n_blocks):
        pre = f"b{i}."
        for w in ("wq", "wk", "wv"):
            p[pre + w] = normal(d, d, std=1 / math.sqrt(d))
        if b.attention_kind is AttentionKind.MODA and b.combine is Combine.CONCAT:
            p[pre + "wc"] = normal(2 * d, d, std=0.5 / math.sqrt(d))
        else:
            p[pre + "wo"] = normal(d, d, std=0.5 / math.sqrt(d))
        p[pre + "ffn.w1"] = normal(d, h, std=1 / math.sqrt(d))
        p[pre + "ffn.b1"] = np.zeros(h)
        p[pre + "ffn.w2"] = normal(h, d, std=0.5 / math.sqrt(h))
        p[pre + "ffn.b2"] = np.zeros(d)
        if b.attention_kind is AttentionKind.MODA:
            for m, _ in config.layout:
                if b.use_daa:
                    for k, v in aligner.init_aligner_params(b.aligner_variant, d).items():
                        p[f"{pre}align.{m}.{k}"] = v
                    for k, v in aligner.init_fuser_params(b.fuser_mode, d, b.rank, rng).items():
                        p[f"{pre}fuse.{m}.{k}"] = v
                if b.use_mdm and b.mask_spec.variant is MaskVariant.LEARN:
                    ms, mc = _mask_templates(config)[m]
                    p[f"{pre}mask.{m}.self"] = ms.logits.copy()
                    p[f"{pre}mask.{m}.cross"] = mc.logits.copy()
    p["head.w"] = normal(d, config.n_classes, std=1 / math.sqrt(d))
    p["head.b"] = np.zeros(config.n_classes)
    return ModelState(config, p)


def _sub(params, prefix):
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


# -- blocks -------------------------------------------------------------------

def _ffn_forward(p, pre, x):
    u = x @ p[pre + "ffn.w1"] + p[pre + "ffn.b1"]
    a = gelu(u)
    return x + a @ p[pre + "ffn.w2"] + p[pre + "ffn.b2"], (x, u, a)


def _ffn_backward(p, pre, dy, cache, grads):
    x, u, a = cache
    grads[pre + "ffn.w2"] = _wgrad(a, dy)
    grads[pre + "ffn.b2"] = _bgrad(dy)
    du = (dy @ p[pre + "ffn.w2"].T) * gelu_grad(u)
    grads[pre + "ffn.w1"] = _wgrad(x, du)
    grads[pre + "ffn.b1"] = _bgrad(du)
    return dy + du @ p[pre + "ffn.w1"].T


def _joint_block(state, i, x):
    p, pre = state.params, f"b{i}."
    tau = state.config.block.tau
    q, k, v = x @ p[pre + "wq"], x @ p[pre + "wk"], x @ p[pre + "wv"]
    o, w, att = attend(q, k, v, state.causal_mask, tau)
    hres = x + o @ p[pre + "wo"]
    y, fc = _ffn_forward(p, pre, hres)
    return y, ("joint", x, o, att, fc), w


def _joint_block_backward(state, i, dy, cache, grads):
    p, pre = state.params, f"b{i}."
    _, x, o, att, fc = cache
    dh = _ffn_backward(p, pre, dy, fc, grads)
    grads[pre + "wo"] = _wgrad(o, dh)
    dq, dk, dv, _ = attend_backward(dh @ p[pre + "wo"].T, att)
    return _qkv_backward(p, pre, x, dq, dk, dv, grads) + dh


def _qkv_backward(p, pre, x, dq, dk, dv, grads):
    grads[pre + "wq"] = _wgrad(x, dq)
    grads[pre + "wk"] = _wgrad(x, dk)
    grads[pre + "wv"] = _wgrad(x, dv)
    return dq @ p[pre + "wq"].T + dk @ p[pre + "wk"].T + dv @ p[pre + "wv"].T


def _moda_block(state, i, x):
    cfg = state.config
    b = cfg.block
    p, pre = state.params, f"b{i}."
    seg = cfg.segmentation
    n = cfg.n_tokens
    q, k, v = x @ p[pre + "wq"], x @ p[pre + "wk"], x @ p[pre + "wv"]
    out = np.zeros_like(x)
    sinks = _mask_spec(b).variant is MaskVariant.SPECIAL_TOKEN
    w_eff = np.zeros(x.shape[:-2] + (n, n + int(sinks)))
    per_mod = []
    for s in seg:
        m = s.modality
        qi = positions(seg, {m})
        ri = positions(seg, {t.modality for t in seg if t.modality != m})
        qm, km, vm = q[..., qi, :], k[..., qi, :], v[..., qi, :]
        kr, vr = k[..., ri, :], v[..., ri, :]
        daa = None
        if b.use_daa and len(ri):
            apar, fpar = _sub(p, f"{pre}align.{m}."), _sub(p, f"{pre}fuse.{m}.")
            g_hat, gc = aligner.compute_grams(km)
            ak, akc = aligner_forward(b.aligner_variant, apar, kr, g_hat)
            kr, fkc = fuse_forward(b.fuser_mode, fpar, kr, ak)
            vcache = None
            if b.align_values:
                av, avc = aligner_forward(b.aligner_variant, apar, vr, g_hat)
                vr, fvc = fuse_forward(b.fuser_mode, fpar, vr, av)
                vcache = (avc, fvc)
            daa = (gc, akc, fkc, vcache)
        ms, mc = state.block_masks(i, m)
        os_, ws, sc = attend(qm, km, vm, ms, b.tau)
        oc, wc, cc = attend(qm, kr, vr, mc, b.tau, allow_empty=True)
        if b.combine is Combine.CONCAT:
            both = np.concatenate([os_, oc], axis=-1)
            out[..., qi, :] = both @ p[pre + "wc"]
        else:
            both = os_ + oc
            out[..., qi, :] = both @ p[pre + "wo"]
        per_mod.append((m, qi, ri, both, sc, cc, daa))
        # effective weights: each live branch carries an equal share of the row
        live = (wc.sum(axis=-1, keepdims=True) > 0).astype(float)
        share = 1.0 / (1.0 + live)
        rows = w_eff[..., qi, :]
        rows[..., qi] += share * ws[..., :len(qi)]
        rows[..., ri] += share * live * wc[..., :len(ri)]
        if sinks:
            rows[..., n] += (share * (ws[..., len(qi):].sum(-1, keepdims=True)
                                      + live * wc[..., len(ri):].sum(-1, keepdims=True)))[..., 0]
        w_eff[..., qi, :] = rows
    hres = x + out
    y, fc = _ffn_forward(p, pre, hres)
    return y, ("moda", x, per_mod, fc), w_eff


def _moda_block_backward(state, i, dy, cache, grads):
    cfg = state.config
    b = cfg.block
    p, pre = state.params, f"b{i}."
    _, x, per_mod, fc = cache
    dh = _ffn_backward(p, pre, dy, fc, grads)
    dq, dk, dv = np.zeros_like(x), np.zeros_like(x), np.zeros_like(x)
    d = cfg.d
    wname = pre + ("wc" if b.combine is Combine.CONCAT else "wo")
    grads[wname] = np.zeros_like(p[wname])
    for m, qi, ri, both, sc, cc, daa in per_mod:
        dcm = dh[..., qi, :]
        grads[wname] += _wgrad(both, dcm)
        dboth = dcm @ p[wname].T
        if b.combine is Combine.CONCAT:
            dos, doc = dboth[..., :d], dboth[..., d:]
        else:
            dos = doc = dboth
        dq1, dkm, dvm, dms = attend_backward(dos, sc)
        dq2, dkr, dvr, dmc = attend_backward(doc, cc)
        mpre = f"{pre}mask.{m}."
        if mpre + "self" in p:
            ms, mc = state.block_masks(i, m)
            grads[mpre + "self"] = np.where(ms.trainable, _batch_sum(dms), 0.0)
            grads[mpre + "cross"] = np.where(mc.trainable, _batch_sum(dmc), 0.0)
        if daa is not None:
            gc, akc, fkc, vcache = daa
            apre, fpre = f"{pre}align.{m}.", f"{pre}fuse.{m}."
            apar, fpar = _sub(p, apre), _sub(p, fpre)
            dkr, dak, fg = fuse_backward(fpar, dkr, fkc)
            dx_a, dg, ag = aligner_backward(apar, dak, akc)
            dkr = dkr + dx_a
            if vcache is not None:
                avc, fvc = vcache
                dvr, dav, fg2 = fuse_backward(fpar, dvr, fvc)
                dx_v, dg2, ag2 = aligner_backward(apar, dav, avc)
                dvr = dvr + dx_v
                fg = {kk: fg[kk] + fg2[kk] for kk in fg}
                ag = {kk: ag[kk] + ag2[kk] for kk in ag}
                if dg2 is not None:
                    dg = dg + dg2
            for kk in fpar:
                grads[fpre + kk] = fg.get(kk, np.zeros_like(fpar[kk]))
            for kk in apar:
                grads[apre + kk] = ag[kk]
            if dg is not None:
                dkm = dkm + aligner.compute_grams_backward(dg, gc)
        dq[..., qi, :] += dq1 + dq2
        dk[..., qi, :] += dkm
        dv[..., qi, :] += dvm
        dk[..., ri, :] += dkr
        dv[..., ri, :] += dvr
    return _qkv_backward(p, pre, x, dq, dk, dv, grads) + dh


def _batch_sum(a):
    while a.ndim > 2:
        a = a.sum(axis=0)
    return a


# -- model --------------------------------------------------------------------

def type_rows(config):
    return np.concatenate([np.full(n, j) for j, (_, n) in enumerate(config.layout)])


def block_forward(state, i, x):
    """Output ``(B, N, d)`` and effective attention weights of block ``i``
    applied to hidden states ``x``."""
    moda = state.config.block.attention_kind is AttentionKind.MODA
    y, _, w = (_moda_block if moda else _joint_block)(state, i, np.asarray(x, dtype=np.float64))
    return y, w


def forward_batch(state, tokens):
    """Run the model on ``tokens`` of shape ``(B, N, d)``.

    Returns ``(logits (B, C), weights, cache)`` where ``weights`` holds one
    ``(B, N, N[+1])`` effective attention array per block.
    """
    cfg = state.config
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 3 or tokens.shape[1:] != (cfg.n_tokens, cfg.d):
        raise ShapeMismatch(f"expected (B, {cfg.n_tokens}, {cfg.d}) tokens, got {tokens.shape}")
    p = state.params
    x = tokens + p["pos"] + p["type"][type_rows(cfg)]
    caches, weights = [], []
    moda = cfg.block.attention_kind is AttentionKind.MODA
    for i in range(cfg.n_blocks):
        x, c, w = (_moda_block if moda else _joint_block)(state, i, x)
        caches.append(c)
        weights.append(w)
    h = x[:, -1, :]
    logits = h @ p["head.w"] + p["head.b"]
    return logits, weights, (caches, h)


def backward_batch(state, cache, d_logits):
    """Parameter gradients for upstream ``d_logits`` (B, C).

    Returns ``(grads, d_tokens)``; every parameter gets an entry.
    """
    cfg = state.config
    p = state.params
    caches, h = cache
    grads = {}
    grads["head.w"] = h.T @ d_logits
    grads["head.b"] = d_logits.sum(axis=0)
    dx = np.zeros((h.shape[0], cfg.n_tokens, cfg.d))
    dx[:, -1, :] = d_logits @ p["head.w"].T
    moda = cfg.block.attention_kind is AttentionKind.MODA
    for i in reversed(range(cfg.n_blocks)):
        back = _moda_block_backward if moda else _joint_block_backward
        dx = back(state, i, dx, caches[i], grads)
    grads["pos"] = dx.sum(axis=0)
    rows = type_rows(cfg)
    dtype = np.zeros_like(p["type"])
    np.add.at(dtype, rows, dx.sum(axis=0))
    grads["type"] = dtype
    for k, v in p.items():
        grads.setdefault(k, np.zeros_like(v))
    return grads, dx


def cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    probs = softmax_rows(logits)
    b = logits.shape[0]
    idx = np.arange(b)
    loss = float(-np.mean(np.log(probs[idx, labels])))
    d = probs.copy()
    d[idx, labels] -= 1.0
    return loss, d / b


def make_trace(config, weights, batch_index=None):
    """Trace from per-block weight arrays; averages over the batch unless a
    single ``batch_index`` is chosen."""
    seg = config.segmentation
    layers = []
    for i, w in enumerate(weights):
        a = w.mean(axis=0) if batch_index is None else w[batch_index]
        layers.append(TraceLayer(i + 1, a, seg))
    return AttentionTrace(tuple(layers))


def _check_seq(state, seq):
    cfg = state.config
    if seq.d != cfg.d:
        raise ShapeMismatch(f"sequence width {seq.d} != model width {cfg.d}")
    if tuple((s.modality, s.length) for s in seq.segmentation) != cfg.layout:
        raise ShapeMismatch("sequence layout does not match the model's modality layout")


def forward(state, seq):
    """Logits ``(1, C)`` and the attention trace for one sequence."""
    _check_seq(state, seq)
    logits, weights, _ = forward_batch(state, seq.tokens[None])
    return logits, make_trace(state.config, weights, 0)


def backward(state, seq, loss_grad):
    """Parameter gradients for one sequence and upstream ``dL/dlogits``."""
    _check_seq(state, seq)
    _, _, cache = forward_batch(state, seq.tokens[None])
    grads, _ = backward_batch(state, cache, np.asarray(loss_grad, dtype=np.float64).reshape(1, -1))
    return grads
