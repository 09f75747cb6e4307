"""Additive attention masks: causal -inf, fixed-value, pseudo-score, learnable
and special-token (sink) variants, plus the per-modality self/cross split.

Positions a query may not read are handled in one of two ways. ``INF`` and
``SPECIAL_TOKEN`` masks put -inf there. ``PSEUDO``, ``FIX`` and ``LEARN``
masks put a *pseudo score* there: the logit replaces the raw q.k score, it
takes part in the softmax denominator, but the position reads no value
vector. The row's probability mass is conserved while future content never
leaks into the output.
"""
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

import numpy as np

from .errors import InvalidDecay, ShapeMismatch
from .modality import ModalityPair, positions


class MaskVariant(str, Enum):
    INF = "INF"
    FIX = "FIX"
    LEARN = "LEARN"
    SPECIAL_TOKEN = "SPECIAL_TOKEN"
    PSEUDO = "PSEUDO"


@dataclass(frozen=True)
class MaskSpec:
    variant: MaskVariant = MaskVariant.LEARN
    beta: float = 0.1
    p_base: float = 0.0
    fixed_value: float = -10.0
    n: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "variant", MaskVariant(self.variant))
        if self.beta < 0:
            raise InvalidDecay(f"decay rate must be nonnegative, got {self.beta}")
        if self.n is not None and self.n < 1:
            raise ValueError("n must be >= 1")


@dataclass(frozen=True, eq=False)
class CompiledMask:
    """An additive logit matrix plus per-entry flags.

    ``pseudo[i, j]`` marks entries whose logit replaces the raw score and
    whose value row is not read. ``trainable`` marks entries that are model
    parameters (LEARN only). The last ``n_sink`` columns have no key at all.
    """
    logits: np.ndarray
    pseudo: np.ndarray
    variant: MaskVariant
    trainable: np.ndarray
    n_sink: int = 0

    def __post_init__(self):
        for name in ("logits", "pseudo", "trainable"):
            a = np.array(getattr(self, name))
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if not (self.logits.shape == self.pseudo.shape == self.trainable.shape):
            raise ShapeMismatch("mask component shapes differ")

    @property
    def shape(self):
        return self.logits.shape

    @property
    def n_keys(self):
        """Number of real key columns (excluding sinks)."""
        return self.logits.shape[1] - self.n_sink

    @property
    def pseudo_count(self):
        return self.pseudo.sum(axis=1)

    @property
    def value_participation(self):
        """Per-entry flag: does this position read its value vector."""
        return ~self.pseudo

    def with_logits(self, logits):
        """Copy with new values at the trainable entries; others are kept."""
        logits = np.asarray(logits, dtype=np.float64)
        if logits.shape != self.shape:
            raise ShapeMismatch(f"expected {self.shape}, got {logits.shape}")
        return replace(self, logits=np.where(self.trainable, logits, self.logits))

    def step(self, grad, lr):
        return self.with_logits(self.logits - lr * np.asarray(grad))


def compile_positions(query_pos, key_pos, spec):
    """Mask for queries at ``query_pos`` reading keys at ``key_pos``.

    A key is visible when its sequence position is not after the query's.
    Pseudo scores along a row decay with their rank among that row's hidden
    positions: the j-th hidden key (j = 1, 2, ...) gets ``p_base - (j-1)*beta``.
    """
    spec = spec if isinstance(spec, MaskSpec) else MaskSpec(spec)
    q = np.asarray(query_pos)[:, None]
    k = np.asarray(key_pos)[None, :]
    hidden = k > q
    v = spec.variant
    if v in (MaskVariant.INF, MaskVariant.SPECIAL_TOKEN):
        logits = np.where(hidden, -np.inf, 0.0)
        pseudo = np.zeros(hidden.shape, dtype=bool)
    else:
        if v is MaskVariant.FIX:
            fill = np.full(hidden.shape, float(spec.fixed_value))
        else:
            rank = np.cumsum(hidden, axis=1)
            fill = spec.p_base - (rank - 1) * spec.beta
        logits = np.where(hidden, fill, 0.0)
        pseudo = hidden.copy()
    n_sink = 0
    if v is MaskVariant.SPECIAL_TOKEN:
        rows = hidden.shape[0]
        logits = np.concatenate([logits, np.zeros((rows, 1))], axis=1)
        pseudo = np.concatenate([pseudo, np.ones((rows, 1), dtype=bool)], axis=1)
        n_sink = 1
    trainable = pseudo.copy() if v is MaskVariant.LEARN else np.zeros_like(pseudo)
    return CompiledMask(logits, pseudo, v, trainable, n_sink)


def build_mask(spec, n=None):
    n = spec.n if n is None else n
    if n is None or n < 1:
        raise ValueError("mask length must be >= 1")
    idx = np.arange(n)
    return compile_positions(idx, idx, spec)


def build_causal_inf_mask(n):
    return build_mask(MaskSpec(MaskVariant.INF), n)


def build_pseudo_mask(n, beta=0.1, p_base=0.0):
    if beta < 0:
        raise InvalidDecay(f"decay rate must be nonnegative, got {beta}")
    return build_mask(MaskSpec(MaskVariant.PSEUDO, beta=beta, p_base=p_base), n)


def build_fixed_mask(n, fixed_value=-10.0):
    return build_mask(MaskSpec(MaskVariant.FIX, fixed_value=fixed_value), n)


def build_learnable_mask(n, seed=None, beta=0.1, p_base=0.0, init_noise=0.0):
    """LEARN mask whose hidden-position logits are parameters.

    They start at the pseudo-score values; ``init_noise > 0`` adds Gaussian
    jitter drawn from ``seed`` (used by gradient tests to break symmetry).
    """
    m = build_mask(MaskSpec(MaskVariant.LEARN, beta=beta, p_base=p_base), n)
    if init_noise:
        rng = np.random.default_rng(seed)
        m = m.with_logits(m.logits + init_noise * rng.standard_normal(m.shape))
    return m


def build_special_token_mask(n):
    return build_mask(MaskSpec(MaskVariant.SPECIAL_TOKEN), n)


def build_modal_masks(segmentation, pair, base):
    """Self- and cross-modality masks for the queries of ``pair.focus``.

    The self mask is ``N_m x N_m`` in within-modality causal order; the cross
    mask is ``N_m x N_rest`` and lets a query see every other-modality token
    that precedes it in the full sequence. The base variant (and its pseudo
    score layout) is applied to each mask independently.
    """
    pair.check(segmentation)
    q = positions(segmentation, {pair.focus})
    r = positions(segmentation, pair.rest)
    return compile_positions(q, q, base), compile_positions(q, r, base)


def modal_pairs(segmentation):
    return [ModalityPair.of(segmentation, s.modality) for s in segmentation]
