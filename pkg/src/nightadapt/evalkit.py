"""Confusion matrices, per-class and group IoU, reports and rendered maps.

Rows of the confusion matrix are ground truth, columns are predictions;
255-labeled pixels never enter. The mean IoU runs over classes that occur
in either ground truth or prediction, and group means follow the
taxonomy's static versus dynamic-and-small partition.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .taxonomy import DYNAMIC_SMALL, GROUP_TITLES, IGNORE, STATIC
from .tensor import Tensor


def _arr(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


@dataclass
class ConfusionMatrix:
    num_classes: int
    counts: np.ndarray = None

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def merge(self, other):
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)


@dataclass
class EvalReport:
    name: str
    class_names: list
    class_groups: list
    iou: np.ndarray  # per class, NaN where absent from gt and pred
    miou: float
    group_miou: dict  # group -> mean IoU over present classes of the group
    pixels: int


def accumulate(cm, pred, gt):
    """Tally non-ignored (gt, pred) pixel pairs into the matrix."""
    p = _arr(pred).reshape(-1).astype(np.int64)
    g = _arr(gt).reshape(-1).astype(np.int64)
    if p.shape != g.shape:
        raise ValueError(f"pred and gt sizes differ: {p.shape} vs {g.shape}")
    keep = g != IGNORE
    p, g = p[keep], g[keep]
    c = cm.num_classes
    if p.size and (p.min() < 0 or p.max() >= c):
        raise ValueError(f"prediction ids outside 0..{c - 1}")
    if g.size and (g.min() < 0 or g.max() >= c):
        raise ValueError(f"ground-truth ids outside 0..{c - 1}")
    cm.counts += np.bincount(g * c + p, minlength=c * c).reshape(c, c)
    return cm


def iou(cm, taxonomy, name=""):
    """Per-class IoU, overall mean and the static/dynamic group means."""
    counts = cm.counts
    if counts.sum() == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(counts).astype(np.float64)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denom = tp + fp + fn
    present = denom > 0
    per_class = np.full(cm.num_classes, np.nan)
    per_class[present] = tp[present] / denom[present]
    miou = float(per_class[present].mean())

    group_miou = {}
    groups = [taxonomy[cid].group for cid in range(len(taxonomy))]
    for group in (STATIC, DYNAMIC_SMALL):
        sel = np.array([g == group for g in groups]) & present
        group_miou[group] = float(per_class[sel].mean()) if sel.any() else float("nan")

    return EvalReport(
        name=name,
        class_names=taxonomy.names(),
        class_groups=groups,
        iou=per_class,
        miou=miou,
        group_miou=group_miou,
        pixels=int(counts.sum()),
    )


def render_prediction(pred, taxonomy, path):
    """Write a binary PPM (P6) of a label map using the taxonomy palette."""
    lab = _arr(pred)
    h, w = lab.shape
    palette = taxonomy.palette_array()  # 255 rows stay black
    rgb = palette[lab]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.astype(np.uint8).tobytes())


def read_prediction_ppm(path, taxonomy):
    """Inverse of render_prediction: recover label ids from palette colors."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(b"P6\n"):
        raise ValueError(f"{path} is not a binary PPM")
    head, _, rest = raw.partition(b"255\n")
    dims = head.split(b"\n")[1].split()
    w, h = int(dims[0]), int(dims[1])
    rgb = np.frombuffer(rest, dtype=np.uint8).reshape(h, w, 3)
    lut = {tuple(c.palette): c.id for c in taxonomy.classes}
    lut[(0, 0, 0)] = IGNORE
    label = np.empty((h, w), dtype=np.uint8)
    for i in range(h):
        for j in range(w):
            label[i, j] = lut[tuple(rgb[i, j])]
    return label


def compare_runs(named_reports):
    """Tabulate several evaluation reports against the first (baseline) row.

    Returns (markdown, csv) strings with mIoU, group mIoUs and deltas.
    """
    if len(named_reports) < 2:
        raise ValueError("need at least 2 reports to compare")
    first = named_reports[0][1]
    for _, rep in named_reports[1:]:
        if rep.class_names != first.class_names or rep.class_groups != first.class_groups:
            raise ValueError("reports use different taxonomies")

    static_t = GROUP_TITLES[STATIC]
    dyn_t = GROUP_TITLES[DYNAMIC_SMALL]
    md = [
        f"| variant | mIoU | {static_t} | {dyn_t} | delta mIoU |",
        "|---|---|---|---|---|",
    ]
    csv = ["variant,miou,static_miou,dynamic_miou,delta_miou"]
    base = first.miou
    for name, rep in named_reports:
        delta = rep.miou - base
        md.append(
            f"| {name} | {rep.miou:.4f} | {rep.group_miou[STATIC]:.4f} "
            f"| {rep.group_miou[DYNAMIC_SMALL]:.4f} | {delta:+.4f} |"
        )
        csv.append(
            f"{name},{rep.miou:.6f},{rep.group_miou[STATIC]:.6f},"
            f"{rep.group_miou[DYNAMIC_SMALL]:.6f},{delta:+.6f}"
        )
    return "\n".join(md) + "\n", "\n".join(csv) + "\n"


def write_report(report, csv_path, md_path=None):
    """Per-class CSV rows plus the mean and group rows; optional markdown."""
    lines = ["class,iou"]
    for cname, val in zip(report.class_names, report.iou):
        lines.append(f"{cname},{'' if np.isnan(val) else f'{val:.6f}'}")
    lines.append(f"miou,{report.miou:.6f}")
    lines.append(f"group_static,{report.group_miou[STATIC]:.6f}")
    lines.append(f"group_dynamic_small,{report.group_miou[DYNAMIC_SMALL]:.6f}")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    if md_path:
        md = [
            f"# Evaluation: {report.name or 'run'}",
            "",
            f"- mIoU: **{report.miou:.4f}** over {report.pixels} pixels",
            f"- {GROUP_TITLES[STATIC]}: {report.group_miou[STATIC]:.4f}",
            f"- {GROUP_TITLES[DYNAMIC_SMALL]}: {report.group_miou[DYNAMIC_SMALL]:.4f}",
            "",
            "| class | group | IoU |",
            "|---|---|---|",
        ]
        for cname, group, val in zip(report.class_names, report.class_groups, report.iou):
            shown = "-" if np.isnan(val) else f"{val:.4f}"
            md.append(f"| {cname} | {group} | {shown} |")
        with open(md_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(md) + "\n")
