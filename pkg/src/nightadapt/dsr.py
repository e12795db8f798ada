"""Mask-guided class mixup of labeled day scenes into night scenes.

A composite mask selects a random half of the classes present in the day
label plus every dynamic-and-small class present; masked pixels of the
day image and label are pasted over the night image and its pseudo-label.
FIFO memory banks buffer rare-class crops across images and occasionally
paste one on top, so classes like the bus show up often enough to learn.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .losses import cross_entropy
from .taxonomy import IGNORE
from .tensor import Tensor


@dataclass
class CompositeMask:
    mask: np.ndarray  # [H,W] uint8 in {0,1}
    selected_classes: set


@dataclass
class BankEntry:
    image: np.ndarray  # [3,H,W] float32
    mask: np.ndarray  # [H,W] uint8, class mask
    label: np.ndarray  # [H,W] uint8
    class_id: int


@dataclass
class LongTailedBank:
    capacity: int = 16  # per class
    min_pixels: int = 32
    queues: dict = field(default_factory=dict)  # class id -> deque[BankEntry]

    def __len__(self):
        return sum(len(q) for q in self.queues.values())

    def entries(self):
        # class-sorted so sampling indices survive checkpoint round trips
        return [e for cid in sorted(self.queues) for e in self.queues[cid]]


@dataclass
class MixedSample:
    image: Tensor  # [3,H,W] float32
    label: Tensor  # [H,W] uint8


def _lab(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _img(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def class_mask(label, classes):
    """Binary indicator of label membership in ``classes``; 255 maps to 0."""
    lab = _lab(label)
    mask = np.isin(lab, sorted(classes)) & (lab != IGNORE)
    return CompositeMask(mask.astype(np.uint8), set(classes))


def select_random_classes(label, rng, fraction=0.5):
    """Uniformly pick ceil(k * fraction) of the k classes present, no repeats."""
    lab = _lab(label)
    present = sorted(int(v) for v in np.unique(lab) if v != IGNORE)
    if not present:
        raise ValueError("label contains no valid class")
    take = max(1, math.ceil(len(present) * fraction))
    chosen = rng.choice(len(present), size=take, replace=False)
    return {present[i] for i in chosen}

def composite_mask(label, rng, taxonomy, fraction=0.5, forced_classes="all"):
    """Union of a random-class mask and the dynamic-and-small class mask.

    ``forced_classes`` narrows which part of the dynamic-and-small group is
    always included: "all", "small", "dynamic", or "none" (random only).
    """
    lab = _lab(label)
    selected = select_random_classes(label, rng, fraction)
    if forced_classes == "all":
        forced = taxonomy.dynamic_small_ids
    elif forced_classes in ("small", "dynamic"):
        forced = taxonomy.subgroup_ids(forced_classes)
    elif forced_classes == "none":
        forced = set()
    else:
        raise ValueError(f"unknown forced_classes {forced_classes!r}")
    present = {int(v) for v in np.unique(lab) if v != IGNORE}
    selected |= forced & present
    return class_mask(label, selected)


def image_mixup(x_source, x_night, m_c):
    """Pixelwise select source image under the mask, night image elsewhere."""
    xs, xn = _img(x_source), _img(x_night)
    if xs.shape != xn.shape:
        raise ValueError(f"image shapes differ: {xs.shape} vs {xn.shape}")
    m = m_c.mask.astype(bool)
    out = np.where(m[None], xs, xn)
    return Tensor(out.astype(np.float32))


def label_mixup(y_source, y_night_pseudo, m_c):
    """Same selector as image_mixup; ignore pixels come only from the night side."""
    ys, yn = _lab(y_source), _lab(y_night_pseudo)
    if ys.shape != yn.shape:
        raise ValueError(f"label shapes differ: {ys.shape} vs {yn.shape}")
    m = m_c.mask.astype(bool)
    return Tensor(np.where(m, ys, yn).astype(np.uint8))


def bank_push(bank, source_sample, taxonomy):
    """Store (image, class mask, label) for each rare class big enough to keep."""
    label = _lab(source_sample.label)
    image = _img(source_sample.image)
    for cid in sorted(taxonomy.long_tailed_ids):
        mask = (label == cid).astype(np.uint8)
        count = int(mask.sum())
        if count < bank.min_pixels:
            continue
        queue = bank.queues.setdefault(cid, deque())
        queue.append(BankEntry(image.copy(), mask, label.copy(), cid))
        while len(queue) > bank.capacity:
            queue.popleft()
    return bank


def bank_apply(bank, mixed, rng, prob=0.5):
    """With probability ``prob`` paste one uniformly sampled bank entry on top."""
    entries = bank.entries()
    if not entries or rng.random() >= prob:
        return mixed
    entry = entries[int(rng.integers(0, len(entries)))]
    m = entry.mask.astype(bool)
    image = np.where(m[None], entry.image, _img(mixed.image))
    label = np.where(m, entry.label, _lab(mixed.label))
    return MixedSample(Tensor(image.astype(np.float32)), Tensor(label.astype(np.uint8)))


def mix_loss(student_logits_on_mixed, y_mixed):
    """Cross entropy of the student on the mixed image against the mixed label."""
    return cross_entropy(student_logits_on_mixed, y_mixed)
