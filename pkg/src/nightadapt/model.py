"""Tiny encoder-decoder segmentation net with student/EMA-teacher roles.

Four 3x3 conv blocks (two of them stride 2) feed a linear feature head at
quarter resolution; a pointwise classifier on those features is upsampled
back to full resolution with nearest neighbor. The teacher is a
gradient-free copy of the student updated by exponential moving average.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .io import FormatError, load_records, save_records
from .tensor import Tensor

_SEED_KEY = "meta.seed"


@dataclass
class ModelParams:
    tensors: dict  # name -> Tensor, fixed name set per architecture
    channels: int
    feature_dim: int
    num_classes: int
    seed: int
    trainable: bool = True

    def names(self):
        return list(self.tensors.keys())

    def copy(self, trainable):
        out = {}
        for name, t in self.tensors.items():
            out[name] = Tensor(t.data.copy(), requires_grad=trainable)
        return ModelParams(out, self.channels, self.feature_dim, self.num_classes, self.seed, trainable)


@dataclass
class ForwardOutput:
    features: Tensor  # [D, H/4, W/4]
    logits: Tensor  # [C, H, W]

    def probs(self):
        return T.softmax_np(self.logits, axis=0)

    def pred(self):
        return T.argmax_np(self.logits, axis=0).astype(np.uint8)


def _shapes(channels, feature_dim, num_classes):
    ch, d, c = channels, feature_dim, num_classes
    return {
        "enc1.weight": (ch, 3, 3, 3),
        "enc1.bias": (ch,),
        "enc2.weight": (ch, ch, 3, 3),
        "enc2.bias": (ch,),
        "enc3.weight": (2 * ch, ch, 3, 3),
        "enc3.bias": (2 * ch,),
        "enc4.weight": (2 * ch, 2 * ch, 3, 3),
        "enc4.bias": (2 * ch,),
        "feat.weight": (d, 2 * ch, 3, 3),
        "feat.bias": (d,),
        "cls.weight": (c, d),
        "cls.bias": (c,),
    }


def init(seed, taxonomy, channels=16, feature_dim=16):
    """He fan-in init of the student parameters, deterministic per seed."""
    num_classes = len(taxonomy)
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((int(seed), 777))))
    tensors = {}
    for name, shape in _shapes(channels, feature_dim, num_classes).items():
        if name.endswith(".bias"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(tensors, channels, feature_dim, num_classes, int(seed), trainable=True)


def init_teacher(student):
    """Teacher starts as an exact, gradient-free copy of the student."""
    return student.copy(trainable=False)


def forward(params, image):
    """Run the net on one [3,H,W] image; H and W must be divisible by 4."""
    if isinstance(image, Tensor):
        img = image
    else:
        img = Tensor(np.asarray(image, dtype=np.float32))
    c, h, w = img.shape
    if c != 3:
        raise ValueError(f"expected a [3,H,W] image, got {img.shape}")
    if h % 4 or w % 4:
        raise ValueError(f"spatial size {h}x{w} not divisible by 4")
    p = params.tensors
    x = T.reshape(img, (1, 3, h, w))
    x = T.relu(T.conv2d(x, p["enc1.weight"], p["enc1.bias"], stride=1))
    x = T.relu(T.conv2d(x, p["enc2.weight"], p["enc2.bias"], stride=2))
    x = T.relu(T.conv2d(x, p["enc3.weight"], p["enc3.bias"], stride=2))
    x = T.relu(T.conv2d(x, p["enc4.weight"], p["enc4.bias"], stride=1))
    feat = T.conv2d(x, p["feat.weight"], p["feat.bias"], stride=1)
    logits4 = T.conv1x1(feat, p["cls.weight"], p["cls.bias"])
    logits = T.upsample_nearest2x(T.upsample_nearest2x(logits4))
    d = params.feature_dim
    cnum = params.num_classes
    return ForwardOutput(
        features=T.reshape(feat, (d, h // 4, w // 4)),
        logits=T.reshape(logits, (cnum, h, w)),
    )


def ema_update(teacher, student, ema_lambda):
    """phi_t' = lambda * phi_{t-1}' + (1 - lambda) * phi_t, elementwise."""
    if not 0.0 <= ema_lambda <= 1.0:
        raise ValueError(f"ema_lambda must be in [0,1], got {ema_lambda}")
    if teacher.names() != student.names():
        raise ValueError(
            f"teacher/student name sets differ: {sorted(set(teacher.names()) ^ set(student.names()))}"
        )
    lam = np.float32(ema_lambda)
    out = {}
    for name, t in teacher.tensors.items():
        s = student.tensors[name]
        out[name] = Tensor(lam * t.data + (np.float32(1.0) - lam) * s.data, requires_grad=False)
    return ModelParams(
        out, teacher.channels, teacher.feature_dim, teacher.num_classes, teacher.seed, trainable=False
    )


def save_checkpoint(params, path):
    named = dict(params.tensors)
    named[_SEED_KEY] = np.frombuffer(struct.pack("<q", params.seed), dtype=np.uint8).copy()
    save_records(path, named)


def load_checkpoint(path, trainable=True):
    records = load_records(path)
    if _SEED_KEY not in records:
        raise FormatError(f"checkpoint {path} lacks the {_SEED_KEY} record")
    (seed,) = struct.unpack("<q", records.pop(_SEED_KEY).tobytes())
    try:
        channels = records["enc1.weight"].shape[0]
        num_classes, feature_dim = records["cls.weight"].shape
    except KeyError as exc:
        raise FormatError(f"checkpoint {path} is missing parameter {exc}") from exc
    expected = _shapes(channels, feature_dim, num_classes)
    if set(records) != set(expected):
        raise FormatError(
            f"checkpoint {path} name set mismatch: {sorted(set(records) ^ set(expected))}"
        )
    tensors = {}
    for name in expected:
        if records[name].shape != expected[name]:
            raise FormatError(f"checkpoint {path}: {name} has shape {records[name].shape}")
        tensors[name] = Tensor(records[name], requires_grad=trainable)
    return ModelParams(tensors, channels, feature_dim, num_classes, seed, trainable)
