"""Refined night pseudo-labels from a coarsely aligned day/night pair.

Static classes that the teacher predicts confidently on the day image
replace the night prediction at the same pixel (the static layout is
shared across the pair); everything else falls back to the confident
night prediction or the ignore index. Dynamic-and-small classes are never
taken from the day side because they move between the two exposures.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .taxonomy import IGNORE
from .tensor import Tensor

PROV_DAY = 0
PROV_NIGHT = 1
PROV_IGNORED = 2


@dataclass
class PseudoLabel:
    label: Tensor  # [H,W] uint8, 255 = ignore
    confidence: Tensor  # [H,W] float32 in [0,1]
    provenance: np.ndarray  # [H,W] uint8 codes PROV_*


def _arr(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def refine_night_pseudo(day_probs, night_probs, taxonomy, theta_day=0.9, theta_night=0.5):
    """Fuse per-pixel day/night class probabilities into one pseudo-label map."""
    day = _arr(day_probs)
    night = _arr(night_probs)
    if day.shape != night.shape:
        raise ValueError(f"probability maps disagree: {day.shape} vs {night.shape}")

    day_cls = day.argmax(axis=0)
    day_conf = day.max(axis=0)
    night_cls = night.argmax(axis=0)
    night_conf = night.max(axis=0)

    static_ids = sorted(taxonomy.static_ids)
    take_day = np.isin(day_cls, static_ids) & (day_conf >= theta_day)
    take_night = ~take_day & (night_conf >= theta_night)

    label = np.full(day_cls.shape, IGNORE, dtype=np.uint8)
    label[take_day] = day_cls[take_day]
    label[take_night] = night_cls[take_night]

    provenance = np.full(day_cls.shape, PROV_IGNORED, dtype=np.uint8)
    provenance[take_day] = PROV_DAY
    provenance[take_night] = PROV_NIGHT

    # ignored pixels keep the (failing) night confidence for reporting
    confidence = np.where(take_day, day_conf, night_conf).astype(np.float32)

    return PseudoLabel(Tensor(label), Tensor(confidence), provenance)
