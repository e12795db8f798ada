"""Cross-domain prototype alignment of pixel features.

Per-class prototypes are masked means of feature maps at label pixels;
pixel features are pulled toward the same-class prototype of another
domain and pushed from the rest through a softmax over temperature-scaled
cosine similarities. Classes outside the domain overlap get weight zero
(a constant logit), rare overlapping classes get a bounded boost, and
classes absent from the prototype side are dropped from the softmax and
from the pixel set entirely.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .losses import cross_entropy
from .taxonomy import IGNORE
from .tensor import Tensor

NEG_INF_LOGIT = -1e9


@dataclass
class PrototypeSet:
    vectors: list  # per class: Tensor [D] or None when absent
    present: np.ndarray  # bool [C]
    domain: str = ""

    @property
    def num_classes(self):
        return len(self.vectors)

    def stacked(self):
        """[C,D] view with zero rows for absent classes (testing helper)."""
        d = next(v.shape[0] for v in self.vectors if v is not None)
        rows = [v if v is not None else Tensor(np.zeros(d, dtype=np.float32)) for v in self.vectors]
        return T.stack(rows)


@dataclass
class ClassWeights:
    w: np.ndarray  # float [C]
    overlap: set
    long_tailed_overlap: set

    @property
    def overlap_count(self):
        return len(self.overlap)


def _lab(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def downsample_label(label, factor=4):
    """Nearest-neighbor decimation of a label map to feature resolution."""
    lab = _lab(label)
    return lab[::factor, ::factor]


def classes_present(label_small):
    return {int(v) for v in np.unique(_lab(label_small)) if v != IGNORE}


def compute_prototypes(features, label_small, num_classes, domain=""):
    """Per-class masked means of a [D,h,w] feature map; absent classes flagged."""
    lab = _lab(label_small)
    if lab.shape != features.shape[1:]:
        raise ValueError(f"label {lab.shape} does not match feature grid {features.shape[1:]}")
    vectors = []
    present = np.zeros(num_classes, dtype=bool)
    for cid in range(num_classes):
        mask = (lab == cid).astype(np.uint8)
        proto = T.masked_mean(features, Tensor(mask)) if mask.any() else None
        vectors.append(proto)
        present[cid] = proto is not None
    return PrototypeSet(vectors, present, domain)


def class_weights(domain_a_classes, domain_b_classes, taxonomy, reweight=True):
    """Similarity weights from the class overlap of two domains.

    Overlapping classes weigh 1; overlapping long-tailed classes weigh
    (s+1)/s where s is the overlap size; everything else weighs 0.
    """
    overlap = set(domain_a_classes) & set(domain_b_classes)
    s = len(overlap)
    lt = overlap & taxonomy.long_tailed_ids
    w = np.zeros(len(taxonomy), dtype=np.float64)
    for cid in overlap:
        if reweight and cid in lt:
            w[cid] = (s + 1) / s
        else:
            w[cid] = 1.0
    return ClassWeights(w, overlap, lt)


def similarity_logits(features, protos, weights, tau):
    """Weighted cosine similarities against each class prototype.

    Returns [C,h,w]: (cos(f, rho_c) / tau) * W_c for present classes, a
    constant zero for weight-zero classes (their prototypes cannot leak
    gradient), and a -inf surrogate for absent classes so the softmax
    drops them.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    _, h, w = features.shape
    f_unit = T.l2_normalize(features, axis=0)
    zero_row = Tensor(np.zeros((h, w), dtype=features.dtype))
    ninf_row = Tensor(np.full((h, w), NEG_INF_LOGIT, dtype=features.dtype))
    rows = []
    for cid in range(protos.num_classes):
        if not protos.present[cid]:
            rows.append(ninf_row)
        elif weights.w[cid] == 0.0:
            rows.append(zero_row)
        else:
            cos = T.channel_dot(f_unit, T.l2_normalize(protos.vectors[cid], axis=0))
            rows.append(T.scale(cos, weights.w[cid] / tau))
    return T.stack(rows)


def contrastive_loss(logits, label_small, present=None):
    """Mean over valid pixels of -log softmax(logits)[label].

    Pixels labeled 255 or labeled with a class absent from the prototype
    side are excluded; with nothing left the loss is a counted zero.
    """
    lab = _lab(label_small)
    extra = None
    if present is not None:
        extra = np.zeros(lab.shape, dtype=bool)
        ok = lab != IGNORE
        extra[ok] = present[lab[ok].astype(np.int64)]
    return cross_entropy(logits, lab, extra_valid=extra)


def proto_loss_terms(source, mixed, night, taxonomy, tau, reweight=True, stop_grad_protos=False):
    """The four cross-domain contrastive terms keyed by "a>b" direction.

    Each argument is a (features [D,h,w], label [h,w]) pair; ``mixed`` and
    ``night`` may be None when their domain does not exist this step.
    Terms whose domains share no class contribute a constant zero.
    """
    domains = {"s": source, "m": mixed, "n": night}
    dtype = source[0].dtype
    protos = {}
    classes = {}
    for key, pair in domains.items():
        if pair is None:
            continue
        feats, label = pair
        classes[key] = classes_present(label)
        pset = compute_prototypes(feats, label, len(taxonomy), domain=key)
        if stop_grad_protos:
            pset = PrototypeSet(
                [T.detach(v) if v is not None else None for v in pset.vectors],
                pset.present,
                pset.domain,
            )
        protos[key] = pset

    terms = {}
    for a, b in (("m", "s"), ("s", "m"), ("n", "s"), ("s", "n")):
        name = f"{a}>{b}"
        if a not in protos or b not in protos:
            terms[name] = Tensor(np.zeros((), dtype=dtype))
            continue
        weights = class_weights(classes[a], classes[b], taxonomy, reweight=reweight)
        if weights.overlap_count == 0:
            terms[name] = Tensor(np.zeros((), dtype=dtype))
            continue
        feats, label = domains[a]
        logits = similarity_logits(feats, protos[b], weights, tau)
        terms[name] = contrastive_loss(logits, label, present=protos[b].present)
    return terms


def proto_loss(source, mixed, night, taxonomy, tau, reweight=True, stop_grad_protos=False):
    """Sum of the four cross-domain contrastive terms as a scalar tensor."""
    terms = proto_loss_terms(source, mixed, night, taxonomy, tau, reweight, stop_grad_protos)
    total = None
    for term in terms.values():
        total = term if total is None else T.add(total, term)
    return total
