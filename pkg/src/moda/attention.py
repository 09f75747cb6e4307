"""Masked scaled-dot-product attention and its self/cross-modal split.

``attend``/``attend_backward`` are the batch-generic kernels (leading axes are
carried through). ``masked_attention`` and ``split_modal_attention`` are the
checked 2-D entry points built on them.
"""
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ShapeMismatch
from .modality import positions
from .modmask import CompiledMask
from .numerics import as_matrix, softmax_rows, softmax_rows_backward, swap


@dataclass(frozen=True)
class AttentionConfig:
    head_dim: int
    temperature: Optional[float] = None

    def __post_init__(self):
        if self.temperature is None:
            object.__setattr__(self, "temperature", math.sqrt(self.head_dim))
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True, eq=False)
class ProjectionSet:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray

    def __post_init__(self):
        shapes = set()
        for name in ("wq", "wk", "wv"):
            w = as_matrix(getattr(self, name), name=name)
            if w.shape[0] != w.shape[1]:
                raise ShapeMismatch(f"{name} must be square, got {w.shape}")
            shapes.add(w.shape)
            object.__setattr__(self, name, w)
        if len(shapes) != 1:
            raise ShapeMismatch("projections must share one shape")

    @property
    def d(self):
        return self.wq.shape[0]

    @classmethod
    def identity(cls, d):
        return cls(np.eye(d), np.eye(d), np.eye(d))

    @classmethod
    def random(cls, d, rng, scale=None):
        scale = 1.0 / math.sqrt(d) if scale is None else scale
        return cls(*(scale * rng.standard_normal((d, d)) for _ in range(3)))


def project(tokens, proj):
    x = as_matrix(tokens, name="tokens")
    if x.shape[1] != proj.d:
        raise ShapeMismatch(f"tokens have width {x.shape[1]}, projections expect {proj.d}")
    return x @ proj.wq, x @ proj.wk, x @ proj.wv


def _mask_parts(mask):
    if isinstance(mask, CompiledMask):
        return mask.logits, mask.pseudo, mask.n_sink
    logits = np.asarray(mask, dtype=np.float64)
    return logits, np.zeros(logits.shape[-2:], dtype=bool), 0


def attend(q, k, v, mask, tau, allow_empty=False):
    """Return ``(out, weights, cache)`` for ``softmax(q k^T / tau + mask) v``.

    ``mask`` is either an additive logit array or a :class:`CompiledMask`.
    ``weights`` covers every mask column, so with pseudo or sink positions it
    still sums to one per row while ``out`` reads only real positions.
    With ``allow_empty`` a row with no finite logit yields zero weights and a
    zero output instead of raising.
    """
    logits, pseudo, n_sink = _mask_parts(mask)
    n, nk = q.shape[-2], k.shape[-2]
    if logits.shape[-2:] != (n, nk + n_sink):
        raise ShapeMismatch(f"mask shape {logits.shape[-2:]} does not fit {n} queries x {nk} keys")
    s = (q @ swap(k)) / tau
    if n_sink:
        s = np.concatenate([s, np.zeros(s.shape[:-1] + (n_sink,))], axis=-1)
    z = np.where(pseudo, logits, s + logits)
    w = softmax_rows(z, allow_empty=allow_empty)
    read = np.where(pseudo, 0.0, w)[..., :nk]
    out = read @ v
    return out, w, (q, k, v, w, pseudo, tau, nk)


def attend_backward(d_out, cache):
    """Gradients ``(dq, dk, dv, dlogits)``; ``dlogits`` keeps batch axes."""
    q, k, v, w, pseudo, tau, nk = cache
    read = np.where(pseudo, 0.0, w)[..., :nk]
    dv = swap(read) @ d_out
    dw = np.zeros_like(w)
    dw[..., :nk] = d_out @ swap(v)
    dw = np.where(pseudo, 0.0, dw)
    dz = softmax_rows_backward(dw, w)
    ds = np.where(pseudo, 0.0, dz)[..., :nk] / tau
    return ds @ k, swap(ds) @ q, dv, dz


def masked_attention(Q, K, V, mask, cfg):
    """Single-head masked attention; returns ``(O, A_weights)``."""
    Q, K, V = (as_matrix(x, name=nm) for x, nm in ((Q, "Q"), (K, "K"), (V, "V")))
    if Q.shape[1] != K.shape[1] or K.shape[0] != V.shape[0]:
        raise ShapeMismatch(f"incompatible Q{Q.shape}, K{K.shape}, V{V.shape}")
    out, w, _ = attend(Q, K, V, mask, cfg.temperature)
    return out, w


def masked_attention_backward(Q, K, V, mask, cfg, d_out):
    """Gradients ``(dQ, dK, dV, dmask)`` of ``sum(d_out * O)``."""
    _, _, cache = attend(Q, K, V, mask, cfg.temperature)
    return attend_backward(np.asarray(d_out, dtype=np.float64), cache)


def _split_forward(seq, proj, pair, mask_self, mask_cross, cfg):
    pair.check(seq.segmentation)
    x = seq.tokens
    Q, K, V = project(x, proj)
    qi = positions(seq.segmentation, {pair.focus})
    ri = positions(seq.segmentation, pair.rest)
    tau = cfg.temperature
    o_self, w_self, c_self = attend(Q[qi], K[qi], V[qi], mask_self, tau)
    o_cross, w_cross, c_cross = attend(Q[qi], K[ri], V[ri], mask_cross, tau, allow_empty=True)
    return (o_self, o_cross, w_self, w_cross), (x, qi, ri, c_self, c_cross)


def split_modal_attention(seq, proj, pair, mask_self, mask_cross, cfg, return_weights=False):
    """Self- and cross-modal attention for the queries of ``pair.focus``.

    Each branch runs its own softmax over its own key set. A query that can
    see no key of the other modalities (e.g. an image token placed before
    all text) gets a zero cross-modal output row and zero weights. With a
    single modality the cross branch has no keys: zero output, 0-column
    weights.
    """
    (o_self, o_cross, w_self, w_cross), _ = _split_forward(
        seq, proj, pair, mask_self, mask_cross, cfg)
    if return_weights:
        return o_self, o_cross, w_self, w_cross
    return o_self, o_cross


def split_modal_attention_backward(seq, proj, pair, mask_self, mask_cross, cfg, d_self, d_cross):
    """Gradients of ``sum(d_self * O_self) + sum(d_cross * O_cross)``.

    Returns a dict with keys ``tokens``, ``wq``, ``wk``, ``wv``,
    ``mask_self`` and ``mask_cross``.
    """
    _, (x, qi, ri, c_self, c_cross) = _split_forward(seq, proj, pair, mask_self, mask_cross, cfg)
    dq_s, dk_s, dv_s, dm_s = attend_backward(np.asarray(d_self, dtype=np.float64), c_self)
    dq_c, dk_c, dv_c, dm_c = attend_backward(np.asarray(d_cross, dtype=np.float64), c_cross)
    n, d = x.shape
    dQ, dK, dV = np.zeros((n, d)), np.zeros((n, d)), np.zeros((n, d))
    dQ[qi] += dq_s + dq_c
    dK[qi] += dk_s
    dV[qi] += dv_s
    dK[ri] += dk_c
    dV[ri] += dv_c
    return {
        "tokens": dQ @ proj.wq.T + dK @ proj.wk.T + dV @ proj.wv.T,
        "wq": x.T @ dQ,
        "wk": x.T @ dK,
        "wv": x.T @ dV,
        "mask_self": dm_s,
        "mask_cross": dm_c,
    }
