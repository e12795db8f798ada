"""Prototype contrastive alignment on a toy two-domain feature problem.

Builds two feature maps whose class clusters start rotated apart, then
takes gradient steps on the cross-domain loss and watches the same-class
cosine similarity rise while the rare-class weight boosts its pull.

Run with: python demos/04_prototype_alignment.py
"""
import numpy as np

import nightadapt.fpa as F
from nightadapt.taxonomy import default_taxonomy
from nightadapt.tensor import Tape, Tensor

tax = default_taxonomy()
rng = np.random.default_rng(0)
ROAD, CAR, BUS = 0, 8, 9

label = np.full((8, 8), ROAD, dtype=np.uint8)
label[2:6, 1:4] = CAR
label[5:8, 5:8] = BUS
print("pixels per class: road", (label == ROAD).sum(), "car", (label == CAR).sum(), "bus", (label == BUS).sum())

directions_a = {ROAD: [1, 0], CAR: [0, 1], BUS: [-1, 0]}
angle = 1.1  # domain B starts rotated away from A
rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])


def feature_map(directions, rotate):
    f = np.zeros((2, 8, 8))
    for cid, vec in directions.items():
        v = rot @ np.asarray(vec, dtype=float) if rotate else np.asarray(vec, dtype=float)
        f[:, label == cid] = v[:, None]
    return f + rng.normal(0, 0.05, size=f.shape)


fa = feature_map(directions_a, rotate=False)
fb = feature_map(directions_a, rotate=True)

weights = F.class_weights({ROAD, CAR, BUS}, {ROAD, CAR, BUS}, tax)
print("similarity weights: road", weights.w[ROAD], "car", weights.w[CAR], "bus", weights.w[BUS],
      " (bus is long-tailed: (s+1)/s with s=3)")


def same_class_cosine(f_arr):
    protos_a = F.compute_prototypes(Tensor(fa), label, len(tax))
    sims = {}
    for cid in (ROAD, CAR, BUS):
        fv = f_arr[:, label == cid].mean(axis=1)
        pv = protos_a.vectors[cid].numpy()
        sims[cid] = fv @ pv / (np.linalg.norm(fv) * np.linalg.norm(pv))
    return sims


for step in range(61):
    fb_t = Tensor(fb, requires_grad=True)
    with Tape() as tape:
        loss = F.proto_loss((Tensor(fa), label), (fb_t, label), None, tax, tau=0.25)
    tape.backward(loss)
    if step % 20 == 0:
        sims = same_class_cosine(fb)
        print(f"step {step:3d} loss {loss.item():.4f} cosine road {sims[ROAD]:+.3f} "
              f"car {sims[CAR]:+.3f} bus {sims[BUS]:+.3f}")
    fb = fb - 0.5 * fb_t.grad  # plain gradient descent on the features

print("\nsame-class similarity rises as domain B rotates onto domain A's prototypes")
