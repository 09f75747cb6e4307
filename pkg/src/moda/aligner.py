"""Duplex alignment: per-modality Gram matrices, the normalized-Gram transfer
map, the learned aligner variants and the fuser that merges aligned tokens
with the originals.

The kernels come in forward/backward pairs over parameter dicts so the toy
model can drive them with batched arrays; ``Aligner`` and ``FuserState`` are
the convenient object forms for 2-D use.
"""
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .errors import DegenerateGram, RankExceedsDim, ShapeMismatch
from .numerics import as_matrix, frobenius_norm, gelu, gelu_grad, row_matmul, swap

DEGENERATE_NORM = 1e-12


class AlignerVariant(str, Enum):
    MLP = "MLP"
    MLP2 = "MLP2"
    MLP_GELU = "MLP_GELU"
    COV = "COV"


class FuserMode(str, Enum):
    SELF_ONLY = "SELF_ONLY"
    ALIGNED_ONLY = "ALIGNED_ONLY"
    CONCAT = "CONCAT"
    ADD = "ADD"


@dataclass(frozen=True, eq=False)
class GramMatrix:
    modality: object
    g: np.ndarray
    norm_value: float


def gram_matrix(keys, modality=None):
    """``keys^T keys`` for one modality's ``N_m x d`` key states."""
    k = as_matrix(keys, name="keys")
    if k.shape[0] < 1:
        raise ShapeMismatch("need at least one key")
    g = k.T @ k
    norm = frobenius_norm(g)
    if norm < DEGENERATE_NORM:
        raise DegenerateGram("Gram matrix of all-zero keys cannot be normalized")
    return GramMatrix(modality, g, norm)


def normalize_gram(gm):
    if not gm.norm_value >= DEGENERATE_NORM:
        raise DegenerateGram("Gram matrix has zero norm")
    return gm.g / gm.norm_value


def align_tokens(other_keys, normalized_gram):
    """Map each row of ``other_keys`` through the normalized Gram matrix."""
    x = as_matrix(other_keys, name="other_keys")
    g = as_matrix(normalized_gram, name="normalized_gram")
    if g.shape != (x.shape[1], x.shape[1]):
        raise ShapeMismatch(f"Gram {g.shape} does not match token width {x.shape[1]}")
    return row_matmul(x, g)


# -- batch kernels ------------------------------------------------------------

def _wgrad(x, dy):
    """Gradient of a weight shared across all leading axes of ``x``."""
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def _bgrad(dy):
    return dy.reshape(-1, dy.shape[-1]).sum(axis=0)


def compute_grams(keys):
    """Normalized Gram matrices of ``keys`` (``..., N_m, d``).

    Returns ``(g_hat, cache)``. The toy model calls this once per modality
    per block per forward pass.
    """
    g = swap(keys) @ keys
    norm = np.sqrt(np.sum(g * g, axis=(-2, -1), keepdims=True))
    if np.any(norm < DEGENERATE_NORM):
        raise DegenerateGram("Gram matrix of all-zero keys cannot be normalized")
    g_hat = g / norm
    return g_hat, (keys, g_hat, norm)


def compute_grams_backward(d_ghat, cache):
    keys, g_hat, norm = cache
    inner = np.sum(d_ghat * g_hat, axis=(-2, -1), keepdims=True)
    dg = (d_ghat - g_hat * inner) / norm
    return keys @ (dg + swap(dg))


def aligner_forward(variant, params, x, g_hat=None):
    variant = AlignerVariant(variant)
    if variant is AlignerVariant.MLP:
        return row_matmul(x, params["w"]) + params["b"], (variant, x)
    if variant is AlignerVariant.MLP2:
        h = row_matmul(x, params["w1"]) + params["b1"]
        return row_matmul(h, params["w2"]) + params["b2"], (variant, x, h)
    if variant is AlignerVariant.MLP_GELU:
        h = row_matmul(x, params["w1"]) + params["b1"]
        a = gelu(h)
        return row_matmul(a, params["w2"]) + params["b2"], (variant, x, h, a)
    if g_hat is None:
        raise ValueError("the COV aligner needs the target modality's normalized Gram")
    h = row_matmul(x, params["w"]) + params["b"]
    return row_matmul(h, g_hat), (variant, x, h, g_hat)


def aligner_backward(params, dy, cache):
    """Returns ``(dx, d_g_hat, grads)``; ``d_g_hat`` is None unless COV."""
    variant = cache[0]
    if variant is AlignerVariant.MLP:
        x = cache[1]
        return dy @ params["w"].T, None, {"w": _wgrad(x, dy), "b": _bgrad(dy)}
    if variant is AlignerVariant.MLP2:
        _, x, h = cache
        dh = dy @ params["w2"].T
        grads = {"w2": _wgrad(h, dy), "b2": _bgrad(dy), "w1": _wgrad(x, dh), "b1": _bgrad(dh)}
        return dh @ params["w1"].T, None, grads
    if variant is AlignerVariant.MLP_GELU:
        _, x, h, a = cache
        dh = (dy @ params["w2"].T) * gelu_grad(h)
        grads = {"w2": _wgrad(a, dy), "b2": _bgrad(dy), "w1": _wgrad(x, dh), "b1": _bgrad(dh)}
        return dh @ params["w1"].T, None, grads
    _, x, h, g_hat = cache
    dh = dy @ swap(g_hat)
    d_g = swap(h) @ dy
    return dh @ params["w"].T, d_g, {"w": _wgrad(x, dh), "b": _bgrad(dh)}


def init_aligner_params(variant, d, rng=None, init_scale=0.0):
    """Identity-initialized weights, optionally perturbed by ``init_scale``."""
    variant = AlignerVariant(variant)

    def w():
        m = np.eye(d)
        if init_scale:
            m = m + init_scale * rng.standard_normal((d, d)) / math.sqrt(d)
        return m

    def b():
        return init_scale * rng.standard_normal(d) if init_scale else np.zeros(d)

    if variant in (AlignerVariant.MLP, AlignerVariant.COV):
        return {"w": w(), "b": b()}
    return {"w1": w(), "b1": b(), "w2": w(), "b2": b()}


class Aligner:
    """Callable ``x -> aligned x`` for one aligner variant."""

    def __init__(self, variant, params):
        self.variant = AlignerVariant(variant)
        self.params = params

    def __call__(self, x, normalized_gram=None):
        return aligner_forward(self.variant, self.params, x, normalized_gram)[0]

    def forward(self, x, normalized_gram=None):
        return aligner_forward(self.variant, self.params, x, normalized_gram)

    def backward(self, dy, cache):
        return aligner_backward(self.params, dy, cache)

    @property
    def uses_gram(self):
        return self.variant is AlignerVariant.COV


def build_aligner(variant, d, seed=None, init_scale=0.0):
    """MLP: one affine map. MLP2: two stacked affine maps. MLP_GELU: affine,
    GELU, affine. COV: an affine map followed by the target modality's
    normalized Gram matrix."""
    if d < 1:
        raise ValueError("d must be >= 1")
    rng = np.random.default_rng(seed)
    return Aligner(variant, init_aligner_params(variant, d, rng, init_scale))


# -- fuser --------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FuserState:
    mode: FuserMode
    adapter_down: np.ndarray
    adapter_up: np.ndarray
    projection: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "mode", FuserMode(self.mode))
        d, r = self.adapter_down.shape
        if self.adapter_up.shape != (r, d):
            raise ShapeMismatch("adapter_up must be rank x d")
        if r > d:
            raise RankExceedsDim(f"adapter rank {r} exceeds width {d}")
        if self.mode is FuserMode.CONCAT:
            if self.projection is None or self.projection.shape != (2 * d, d):
                raise ShapeMismatch("CONCAT fuser needs a 2d x d projection")

    @property
    def rank(self):
        return self.adapter_down.shape[1]

    @property
    def d(self):
        return self.adapter_down.shape[0]

    def params(self):
        p = {"down": self.adapter_down, "up": self.adapter_up}
        if self.projection is not None:
            p["proj"] = self.projection
        return p


def init_fuser_params(mode, d, rank=None, rng=None):
    """Low-rank adapter with a zero up-projection and a CONCAT projection of
    ``[I; 0]``: every mode except ALIGNED_ONLY starts as the identity on the
    original tokens."""
    mode = FuserMode(mode)
    rank = max(1, d // 4) if rank is None else rank
    if rank > d or rank < 1:
        raise RankExceedsDim(f"adapter rank {rank} invalid for width {d}")
    rng = np.random.default_rng() if rng is None else rng
    p = {"down": rng.standard_normal((d, rank)) / math.sqrt(d), "up": np.zeros((rank, d))}
    if mode is FuserMode.CONCAT:
        p["proj"] = np.vstack([np.eye(d), np.zeros((d, d))])
    return p


def build_fuser(mode, d, rank=None, seed=None):
    p = init_fuser_params(mode, d, rank, np.random.default_rng(seed))
    return FuserState(mode, p["down"], p["up"], p.get("proj"))


def fuse_forward(mode, params, original, aligned):
    mode = FuserMode(mode)
    if mode is FuserMode.SELF_ONLY:
        return original, (mode,)
    if mode is FuserMode.ALIGNED_ONLY:
        return aligned, (mode,)
    if mode is FuserMode.ADD:
        low = row_matmul(aligned, params["down"])
        return original + row_matmul(low, params["up"]), (mode, aligned, low)
    both = np.concatenate([original, aligned], axis=-1)
    return row_matmul(both, params["proj"]), (mode, both)


def fuse_backward(params, dy, cache):
    """Returns ``(d_original, d_aligned, grads)``."""
    mode = cache[0]
    if mode is FuserMode.SELF_ONLY:
        return dy, np.zeros_like(dy), {}
    if mode is FuserMode.ALIGNED_ONLY:
        return np.zeros_like(dy), dy, {}
    if mode is FuserMode.ADD:
        _, aligned, low = cache
        d_low = dy @ params["up"].T
        grads = {"up": _wgrad(low, dy), "down": _wgrad(aligned, d_low)}
        return dy, d_low @ params["down"].T, grads
    _, both = cache
    d = dy.shape[-1]
    d_both = dy @ params["proj"].T
    return d_both[..., :d], d_both[..., d:], {"proj": _wgrad(both, dy)}


def fuse(original, aligned, fuser):
    """Merge aligned tokens into the originals; the output is always N x d."""
    o = as_matrix(original, name="original")
    a = as_matrix(aligned, name="aligned")
    if o.shape != a.shape or o.shape[1] != fuser.d:
        raise ShapeMismatch(f"original {o.shape}, aligned {a.shape}, fuser width {fuser.d}")
    return fuse_forward(fuser.mode, fuser.params(), o, a)[0]
