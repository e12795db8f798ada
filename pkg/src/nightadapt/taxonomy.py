"""Class taxonomy: ids, groups, rarity flags and render palette.

Ten classes split into large static surfaces and the dynamic-and-small
object group; the bus is the designated rare (long-tailed) class. Label
value 255 is the ignore index everywhere.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

IGNORE = 255

STATIC = "static"
DYNAMIC_SMALL = "dynamic_small"

GROUP_TITLES = {STATIC: "Large static objects", DYNAMIC_SMALL: "Dynamic and small objects"}


@dataclass(frozen=True)
class ClassDef:
    id: int
    name: str
    group: str  # static | dynamic_small
    subgroup: str  # none | small | dynamic (finer split within dynamic_small)
    long_tailed: bool
    palette: tuple  # RGB bytes for rendered predictions
    day_color: tuple  # base RGB floats in [0,1] for the day renderer


class ClassTaxonomy:
    def __init__(self, classes):
        ids = [c.id for c in classes]
        if ids != list(range(len(classes))):
            raise ValueError(f"class ids must be contiguous 0..C-1, got {ids}")
        if len({c.name for c in classes}) != len(classes):
            raise ValueError("duplicate class names")
        for c in classes:
            if c.long_tailed and c.group != DYNAMIC_SMALL:
                raise ValueError(f"long-tailed class {c.name} must be in the dynamic_small group")
        self.classes = tuple(classes)

    def __len__(self):
        return len(self.classes)

    def __getitem__(self, cid):
        return self.classes[cid]

    def names(self):
        return [c.name for c in self.classes]

    def ids_in_group(self, group):
        return {c.id for c in self.classes if c.group == group}

    @property
    def static_ids(self):
        return self.ids_in_group(STATIC)

    @property
    def dynamic_small_ids(self):
        return self.ids_in_group(DYNAMIC_SMALL)

    @property
    def long_tailed_ids(self):
        return {c.id for c in self.classes if c.long_tailed}

    def subgroup_ids(self, subgroup):
        return {c.id for c in self.classes if c.subgroup == subgroup}

    def palette_array(self):
        pal = np.zeros((256, 3), dtype=np.uint8)
        for c in self.classes:
            pal[c.id] = c.palette
        return pal

    def validate_labels(self, label):
        ok = (label == IGNORE) | (label < len(self.classes))
        if not np.all(ok):
            bad = np.unique(np.asarray(label)[~ok])
            raise ValueError(f"labels contain out-of-taxonomy ids {bad.tolist()}")


def default_taxonomy():
    c = ClassDef
    return ClassTaxonomy(
        [
            c(0, "road", STATIC, "none", False, (128, 64, 128), (0.42, 0.42, 0.46)),
            c(1, "sky", STATIC, "none", False, (70, 130, 180), (0.70, 0.70, 0.64)),
            c(2, "building", STATIC, "none", False, (70, 70, 70), (0.55, 0.42, 0.36)),
            c(3, "vegetation", STATIC, "none", False, (107, 142, 35), (0.25, 0.62, 0.22)),
            c(4, "pole", DYNAMIC_SMALL, "small", False, (153, 153, 153), (0.78, 0.76, 0.70)),
            c(5, "traffic_light", DYNAMIC_SMALL, "small", False, (250, 170, 30), (1.00, 0.62, 0.05)),
            c(6, "sign", DYNAMIC_SMALL, "small", False, (220, 220, 0), (0.92, 0.88, 0.25)),
            c(7, "person", DYNAMIC_SMALL, "dynamic", False, (220, 20, 60), (0.85, 0.23, 0.25)),
            c(8, "car", DYNAMIC_SMALL, "dynamic", False, (0, 0, 142), (0.20, 0.32, 0.80)),
            c(9, "bus", DYNAMIC_SMALL, "dynamic", True, (0, 60, 100), (0.75, 0.30, 0.72)),
        ]
    )
