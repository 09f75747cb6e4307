"""Synthetic paired image/text task where the answer lives in the image.

Each sample is ``n_visual`` visual tokens followed by ``n_text`` text tokens,
all drawn as feature vectors from two fixed random codebooks. Visual
features are scaled down by ``visual_scale`` so that, as with a language
model extended to images, text tokens dominate the raw attention logits.

Position-sensitive pattern: the last text token is a query ``q`` naming a
visual slot; the label is the class (token id mod 2) of the visual token in
slot ``q``. The other text tokens are distractors. Position-insensitive
pattern: the label says whether most visual tokens are of class 1.

Either way the label is independent of the text tokens, so it can only be
read through cross-modal attention from the text side.
"""
from dataclasses import dataclass

import numpy as np

from ..modality import ModalSequence, make_segmentation
from ..rng import derive


@dataclass(frozen=True)
class SyntheticTask:
    seed: int = 0
    n_visual: int = 8
    n_text: int = 4
    d: int = 32
    visual_vocab: int = 16
    text_vocab: int = 16
    visual_scale: float = 0.05
    position_sensitive: bool = True

    def __post_init__(self):
        if self.n_visual < 1 or self.n_text < 1:
            raise ValueError("need at least one visual and one text token")
        if self.visual_vocab < 2 or self.visual_vocab % 2:
            raise ValueError("visual_vocab must be an even number >= 2")

    @property
    def layout(self):
        return (("V", self.n_visual), ("T", self.n_text))

    def codebooks(self):
        rng = derive(self.seed, "codebooks")
        vis = self.visual_scale * rng.standard_normal((self.visual_vocab, self.d))
        txt = rng.standard_normal((self.text_vocab + self.n_visual, self.d))
        return vis, txt


def _sample_ids(task, rng, label):
    nv, nt = task.n_visual, task.n_text
    half = task.visual_vocab // 2
    if task.position_sensitive:
        vis = rng.integers(0, task.visual_vocab, nv)
        q = int(rng.integers(0, nv))
        vis[q] = 2 * rng.integers(0, half) + label
        txt = np.append(rng.integers(0, task.text_vocab, nt - 1), task.text_vocab + q)
    else:
        ones = (int(rng.integers(nv // 2 + 1, nv + 1)) if label
                else int(rng.integers(0, (nv - 1) // 2 + 1)))
        cls = rng.permutation(np.array([1] * ones + [0] * (nv - ones)))
        vis = 2 * rng.integers(0, half, nv) + cls
        txt = rng.integers(0, task.text_vocab, nt)
    return vis, txt


def label_of(task, vis_ids, txt_ids):
    """Recompute a sample's label from its ids."""
    cls = np.asarray(vis_ids) % 2
    if task.position_sensitive:
        return int(cls[int(txt_ids[-1]) - task.text_vocab])
    return int(cls.sum() > task.n_visual / 2)


def gen_ids(task, count, split="train"):
    """Token ids and labels: ``(vis (count, n_visual), txt (count, n_text), y)``.

    Labels are an exact half/half split (odd counts differ by one),
    shuffled.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = derive(task.seed, "dataset", split)
    labels = rng.permutation(np.arange(count) % 2)
    vis = np.empty((count, task.n_visual), dtype=np.int64)
    txt = np.empty((count, task.n_text), dtype=np.int64)
    for i, y in enumerate(labels):
        vis[i], txt[i] = _sample_ids(task, rng, int(y))
    return vis, txt, labels


def embed_ids(task, vis, txt):
    cb_v, cb_t = task.codebooks()
    return np.concatenate([cb_v[vis], cb_t[txt]], axis=-2)


def gen_synthetic_dataset(task, count, split="train"):
    """``count`` samples as ``[(ModalSequence, label), ...]``; deterministic in
    ``(task.seed, split)``."""
    vis, txt, labels = gen_ids(task, count, split)
    feats = embed_ids(task, vis, txt)
    seg = make_segmentation(task.layout)
    return [(ModalSequence(f, seg), int(y)) for f, y in zip(feats, labels)]


def stack(dataset):
    """``(tokens (B, N, d), labels (B,))`` from a list of samples."""
    x = np.stack([s.tokens for s, _ in dataset])
    y = np.array([lab for _, lab in dataset], dtype=np.int64)
    return x, y
