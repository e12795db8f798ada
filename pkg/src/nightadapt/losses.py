"""Pixel-averaged cross entropy over label maps with an ignore index.

The one place the 255-ignore convention turns into arithmetic: ignored
pixels contribute nothing and the average runs over the survivors. A
module-level counter records every loss call that found no valid pixels
(those calls return a constant zero).
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .taxonomy import IGNORE
from .tensor import Tensor

_EMPTY_EVENTS = 0


def empty_loss_events():
    return _EMPTY_EVENTS


def reset_empty_loss_events():
    global _EMPTY_EVENTS
    _EMPTY_EVENTS = 0


def _count_empty():
    global _EMPTY_EVENTS
    _EMPTY_EVENTS += 1


def one_hot_valid(label, num_classes, extra_valid=None):
    """One-hot [C,H,W] float mask of non-ignored pixels plus the valid count."""
    lab = label.data if isinstance(label, Tensor) else np.asarray(label)
    valid = lab != IGNORE
    if extra_valid is not None:
        valid = valid & extra_valid
    oh = np.zeros((num_classes,) + lab.shape, dtype=np.float32)
    idx = np.nonzero(valid)
    oh[lab[idx].astype(np.int64), idx[0], idx[1]] = 1.0
    return oh, int(valid.sum())


def cross_entropy(logits, label, extra_valid=None):
    """Mean over valid pixels of -log softmax(logits)[label].

    logits: Tensor [C,H,W]; label: [H,W] with possible 255. Returns a
    scalar Tensor; a constant zero (and a counted event) if nothing is
    valid.
    """
    c = logits.shape[0]
    oh, n_valid = one_hot_valid(label, c, extra_valid)
    if n_valid == 0:
        _count_empty()
        return Tensor(np.zeros((), dtype=logits.dtype))
    mask = Tensor(oh.astype(logits.dtype))
    logp = T.log_softmax(logits, axis=0)
    return T.scale(T.sum(T.mul(logp, mask)), -1.0 / n_valid)
