"""Multimodal token sequences split into contiguous per-modality blocks."""
import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DimMismatch, DuplicateModality, ShapeMismatch, UnknownModality
from .numerics import as_matrix


class Segment(NamedTuple):
    modality: object
    start: int
    length: int

    @property
    def stop(self):
        return self.start + self.length


def _check_segmentation(segmentation, n):
    if not segmentation:
        raise ShapeMismatch("segmentation needs at least one segment")
    seen = set()
    pos = 0
    for seg in segmentation:
        if seg.modality in seen:
            raise DuplicateModality(f"modality {seg.modality!r} appears twice")
        seen.add(seg.modality)
        if seg.start != pos or seg.length < 1:
            raise ShapeMismatch(
                f"segment {seg} is empty or not contiguous (expected start {pos})")
        pos = seg.stop
    if pos != n:
        raise ShapeMismatch(f"segments cover [0, {pos}) but the sequence has {n} tokens")


def make_segmentation(layout):
    """Build segments from ``[(modality_id, length), ...]`` in order."""
    segs, pos = [], 0
    for mid, length in layout:
        segs.append(Segment(mid, pos, int(length)))
        pos += int(length)
    return tuple(segs)


@dataclass(frozen=True, eq=False)
class ModalSequence:
    tokens: np.ndarray
    segmentation: tuple

    def __post_init__(self):
        tokens = as_matrix(self.tokens, name="tokens").copy()
        tokens.setflags(write=False)
        segs = tuple(Segment(*s) for s in self.segmentation)
        _check_segmentation(segs, tokens.shape[0])
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "segmentation", segs)

    @property
    def n(self):
        return self.tokens.shape[0]

    @property
    def d(self):
        return self.tokens.shape[1]

    @property
    def modalities(self):
        return tuple(s.modality for s in self.segmentation)

    def find(self, m):
        for s in self.segmentation:
            if s.modality == m:
                return s
        raise UnknownModality(f"modality {m!r} not in sequence")

    def to_json(self):
        return json.dumps({
            "shape": list(self.tokens.shape),
            "segmentation": [list(s) for s in self.segmentation],
            "data": self.tokens.ravel().tolist(),
        })

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        rows, cols = doc["shape"]
        data = np.asarray(doc["data"], dtype=np.float64).reshape(rows, cols)
        return cls(data, tuple(Segment(*s) for s in doc["segmentation"]))


@dataclass(frozen=True)
class ModalityPair:
    """A focus modality and the set of all the others in the same sequence."""
    focus: object
    rest: frozenset

    def __post_init__(self):
        object.__setattr__(self, "rest", frozenset(self.rest))
        if self.focus in self.rest:
            raise ValueError("focus modality cannot also be in rest")

    @classmethod
    def of(cls, segmentation, focus):
        ids = [s.modality for s in segmentation]
        if focus not in ids:
            raise UnknownModality(f"modality {focus!r} not in segmentation")
        return cls(focus, frozenset(i for i in ids if i != focus))

    def check(self, segmentation):
        ids = {s.modality for s in segmentation}
        if self.focus not in ids:
            raise UnknownModality(f"modality {self.focus!r} not in segmentation")
        if ({self.focus} | self.rest) != ids:
            raise UnknownModality("pair does not cover the sequence's modalities")


def segment(seq, m):
    s = seq.find(m)
    return seq.tokens[s.start:s.stop].copy()


def concat(parts):
    """Stack ``[(modality_id, matrix), ...]`` into one :class:`ModalSequence`."""
    if not parts:
        raise ShapeMismatch("need at least one part")
    mats = [as_matrix(x, name=f"part {mid!r}") for mid, x in parts]
    d = mats[0].shape[1]
    for (mid, _), x in zip(parts, mats):
        if x.shape[1] != d:
            raise DimMismatch(f"part {mid!r} has width {x.shape[1]}, expected {d}")
    ids = [mid for mid, _ in parts]
    if len(set(ids)) != len(ids):
        raise DuplicateModality("modality ids must be unique")
    segs = make_segmentation([(mid, x.shape[0]) for mid, x in zip(ids, mats)])
    return ModalSequence(np.concatenate(mats, axis=0), segs)


def positions(segmentation, modalities):
    """Global row indices (ascending) of the tokens of ``modalities``."""
    idx = [np.arange(s.start, s.stop) for s in segmentation if s.modality in modalities]
    if not idx:
        return np.zeros(0, dtype=np.intp)
    return np.concatenate(idx)
