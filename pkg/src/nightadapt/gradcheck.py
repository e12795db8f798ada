"""Central finite-difference verification of every differentiable op.

Each check builds a tiny float64 problem, computes analytic gradients on
a tape, then compares against (f(x+h) - f(x-h)) / 2h elementwise for
every input entry. Primitive ops must agree to 1e-6 relative, composed
graphs and the training losses to 1e-4. Inputs are sampled away from the
kinks of relu / l2_normalize so the derivative exists where we probe.

``run_all(corrupt=...)`` injects a fault into the named check's analytic
gradient, which is how the harness itself gets exercised.
"""
from __future__ import annotations

import time
import zlib
from dataclasses import dataclass

import numpy as np

from . import dsr, fpa, model
from . import tensor as T
from . import trainer
from .taxonomy import IGNORE, default_taxonomy
from .tensor import Tape, Tensor

PRIMITIVE_TOL = 1e-6
COMPOSED_TOL = 1e-4
FD_STEP = 1e-6
SEEDS_PER_CHECK = 10


@dataclass
class CheckResult:
    name: str
    max_err: float
    tol: float
    passed: bool
    seconds: float


def _leaf(rng, shape, offset=0.0, spread=1.0):
    return Tensor(offset + spread * rng.normal(size=shape), requires_grad=True)


def _fd_grad(build_loss, leaf, h=FD_STEP):
    numeric = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    nf = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = build_loss().item()
        flat[i] = orig - h
        fm = build_loss().item()
        flat[i] = orig
        nf[i] = (fp - fm) / (2 * h)
    return numeric


def check_gradients(build_loss, leaves, corrupt=False):
    """Max relative error between tape gradients and finite differences."""
    for leaf in leaves:
        leaf.grad = None  # backward accumulates; start from a clean slate
    with Tape() as tape:
        loss = build_loss()
    tape.backward(loss)
    worst = 0.0
    for idx, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        if corrupt and idx == 0:
            analytic = analytic + 1e-2
        numeric = _fd_grad(build_loss, leaf)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst


# ---------------------------------------------------------------------------
# check builders: each returns (build_loss, leaves)


def _weighted_sum(out, rng):
    w = Tensor(rng.normal(size=out.shape))
    return T.sum(T.mul(out, w))


def _binary(op, rng, offset_b=0.0):
    a = _leaf(rng, (3, 4))
    b = _leaf(rng, (3, 4), offset=offset_b)
    w = Tensor(rng.normal(size=(3, 4)))
    return lambda: T.sum(T.mul(op(a, b), w)), [a, b]


def _unary(op, rng, offset=0.0, spread=1.0):
    a = _leaf(rng, (3, 4), offset=offset, spread=spread)
    w = Tensor(rng.normal(size=(3, 4)))
    return lambda: T.sum(T.mul(op(a), w)), [a]


def _check_add(rng):
    return _binary(T.add, rng)


def _check_sub(rng):
    return _binary(T.sub, rng)


def _check_mul(rng):
    return _binary(T.mul, rng)


def _check_div(rng):
    a = _leaf(rng, (3, 4))
    b = _leaf(rng, (3, 4), offset=3.0, spread=0.5)  # denominators well away from 0
    w = Tensor(rng.normal(size=(3, 4)))
    return lambda: T.sum(T.mul(T.div(a, b), w)), [a, b]


def _check_relu(rng):
    a = _leaf(rng, (3, 4))
    a.data[np.abs(a.data) < 0.05] += 0.1  # stay off the kink
    w = Tensor(rng.normal(size=(3, 4)))
    return lambda: T.sum(T.mul(T.relu(a), w)), [a]


def _check_log(rng):
    return _unary(T.log, rng, offset=2.0, spread=0.4)


def _check_exp(rng):
    return _unary(T.exp, rng, spread=0.5)


def _check_neg(rng):
    return _unary(T.neg, rng)


def _check_scale(rng):
    a = _leaf(rng, (3, 4))
    w = Tensor(rng.normal(size=(3, 4)))
    return lambda: T.sum(T.mul(T.scale(a, 0.73), w)), [a]


def _check_sum(rng):
    a = _leaf(rng, (2, 5))
    return lambda: T.sum(a), [a]


def _check_mean(rng):
    a = _leaf(rng, (2, 5))
    return lambda: T.mean(a), [a]


def _check_reshape(rng):
    a = _leaf(rng, (2, 6))
    w = Tensor(rng.normal(size=(3, 4)))
    return lambda: T.sum(T.mul(T.reshape(a, (3, 4)), w)), [a]


def _check_stack(rng):
    a = _leaf(rng, (2, 2))
    b = _leaf(rng, (2, 2))
    w = Tensor(rng.normal(size=(2, 2, 2)))
    return lambda: T.sum(T.mul(T.stack([a, b]), w)), [a, b]


def _check_conv2d_s1(rng):
    x = _leaf(rng, (1, 2, 5, 5))
    k = _leaf(rng, (2, 2, 3, 3), spread=0.5)
    b = _leaf(rng, (2,), spread=0.2)
    w = Tensor(rng.normal(size=(1, 2, 5, 5)))
    return lambda: T.sum(T.mul(T.conv2d(x, k, b, stride=1), w)), [x, k, b]


def _check_conv2d_s2(rng):
    x = _leaf(rng, (1, 2, 5, 5))
    k = _leaf(rng, (2, 2, 3, 3), spread=0.5)
    b = _leaf(rng, (2,), spread=0.2)
    w = Tensor(rng.normal(size=(1, 2, 3, 3)))
    return lambda: T.sum(T.mul(T.conv2d(x, k, b, stride=2), w)), [x, k, b]


def _check_conv1x1(rng):
    x = _leaf(rng, (1, 3, 4, 4))
    k = _leaf(rng, (2, 3), spread=0.5)
    b = _leaf(rng, (2,), spread=0.2)
    w = Tensor(rng.normal(size=(1, 2, 4, 4)))
    return lambda: T.sum(T.mul(T.conv1x1(x, k, b), w)), [x, k, b]


def _check_upsample(rng):
    x = _leaf(rng, (1, 2, 3, 3))
    w = Tensor(rng.normal(size=(1, 2, 6, 6)))
    return lambda: T.sum(T.mul(T.upsample_nearest2x(x), w)), [x]


def _check_log_softmax(rng):
    x = _leaf(rng, (4, 3), spread=2.0)
    w = Tensor(rng.normal(size=(4, 3)))
    return lambda: T.sum(T.mul(T.log_softmax(x, axis=0), w)), [x]


def _check_masked_mean(rng):
    x = _leaf(rng, (3, 4, 4))
    mask = rng.integers(0, 2, size=(4, 4)).astype(np.uint8)
    mask[0, 0] = 1  # never empty
    m = Tensor(mask)
    w = Tensor(rng.normal(size=3))
    return lambda: T.sum(T.mul(T.masked_mean(x, m), w)), [x]


def _check_l2_normalize_vec(rng):
    x = _leaf(rng, (5,), offset=1.5, spread=0.5)
    w = Tensor(rng.normal(size=5))
    return lambda: T.sum(T.mul(T.l2_normalize(x), w)), [x]


def _check_l2_normalize_map(rng):
    x = _leaf(rng, (3, 2, 2), offset=1.0, spread=0.4)
    w = Tensor(rng.normal(size=(3, 2, 2)))
    return lambda: T.sum(T.mul(T.l2_normalize(x, axis=0), w)), [x]


def _check_channel_dot(rng):
    f = _leaf(rng, (3, 4, 4))
    v = _leaf(rng, (3,))
    w = Tensor(rng.normal(size=(4, 4)))
    return lambda: T.sum(T.mul(T.channel_dot(f, v), w)), [f, v]


def _check_composed_conv_net(rng):
    # conv -> relu -> log_softmax -> cross entropy, depth ~5 composition
    x = Tensor(rng.normal(size=(1, 2, 4, 4)))
    k = _leaf(rng, (3, 2, 3, 3), spread=0.5)
    b = _leaf(rng, (3,), spread=0.2)
    label = rng.integers(0, 3, size=(4, 4)).astype(np.uint8)
    onehot = np.zeros((1, 3, 4, 4))
    onehot[0, label, np.arange(4)[:, None], np.arange(4)[None, :]] = 1.0
    target = Tensor(onehot)

    def build():
        logits = T.relu(T.conv2d(x, k, b, stride=1))
        logp = T.log_softmax(logits, axis=1)
        return T.scale(T.sum(T.mul(logp, target)), -1.0 / 16)

    return build, [k, b]


def _check_sup_loss(rng):
    logits = _leaf(rng, (4, 3, 3), spread=1.5)
    label = rng.integers(0, 4, size=(3, 3)).astype(np.uint8)
    return lambda: trainer.sup_loss(logits, label), [logits]


def _check_mix_loss(rng):
    logits = _leaf(rng, (4, 3, 3), spread=1.5)
    label = rng.integers(0, 4, size=(3, 3)).astype(np.uint8)
    label[0, 0] = IGNORE
    return lambda: dsr.mix_loss(logits, Tensor(label)), [logits]


def _proto_term_check(term):
    def make(rng):
        tax = default_taxonomy()
        fs = _leaf(rng, (3, 3, 3))
        fm = _leaf(rng, (3, 3, 3))
        fn = _leaf(rng, (3, 3, 3))
        ys = rng.integers(0, 10, size=(3, 3)).astype(np.uint8)
        ym = rng.integers(0, 10, size=(3, 3)).astype(np.uint8)
        yn = rng.integers(0, 10, size=(3, 3)).astype(np.uint8)

        def build():
            return fpa.proto_loss_terms((fs, ys), (fm, ym), (fn, yn), tax, tau=0.5)[term]

        return build, [fs, fm, fn]

    return make


def _check_model_forward(rng):
    # end-to-end net: all parameters of a tiny model against a CE loss
    tax = default_taxonomy()
    params = model.init(int(rng.integers(0, 2**31)), tax, channels=2, feature_dim=2)
    leaves = []
    for name, t in params.tensors.items():
        f64 = Tensor(t.data.astype(np.float64), requires_grad=True)
        params.tensors[name] = f64
        leaves.append(f64)
    image = Tensor(rng.random(size=(3, 8, 8)))
    label = rng.integers(0, 10, size=(8, 8)).astype(np.uint8)

    def build():
        out = model.forward(params, image)
        return trainer.sup_loss(out.logits, label)

    return build, leaves


CHECKS = [
    ("add", _check_add, PRIMITIVE_TOL),
    ("sub", _check_sub, PRIMITIVE_TOL),
    ("mul", _check_mul, PRIMITIVE_TOL),
    ("div", _check_div, PRIMITIVE_TOL),
    ("relu", _check_relu, PRIMITIVE_TOL),
    ("log", _check_log, PRIMITIVE_TOL),
    ("exp", _check_exp, PRIMITIVE_TOL),
    ("neg", _check_neg, PRIMITIVE_TOL),
    ("scale", _check_scale, PRIMITIVE_TOL),
    ("sum", _check_sum, PRIMITIVE_TOL),
    ("mean", _check_mean, PRIMITIVE_TOL),
    ("reshape", _check_reshape, PRIMITIVE_TOL),
    ("stack", _check_stack, PRIMITIVE_TOL),
    ("conv2d_stride1", _check_conv2d_s1, PRIMITIVE_TOL),
    ("conv2d_stride2", _check_conv2d_s2, PRIMITIVE_TOL),
    ("conv1x1", _check_conv1x1, PRIMITIVE_TOL),
    ("upsample_nearest2x", _check_upsample, PRIMITIVE_TOL),
    ("log_softmax", _check_log_softmax, PRIMITIVE_TOL),
    ("masked_mean", _check_masked_mean, PRIMITIVE_TOL),
    ("l2_normalize_vector", _check_l2_normalize_vec, PRIMITIVE_TOL),
    ("l2_normalize_map", _check_l2_normalize_map, PRIMITIVE_TOL),
    ("channel_dot", _check_channel_dot, PRIMITIVE_TOL),
    ("composed_conv_relu_logsoftmax_ce", _check_composed_conv_net, COMPOSED_TOL),
    ("loss_sup", _check_sup_loss, COMPOSED_TOL),
    ("loss_mix", _check_mix_loss, COMPOSED_TOL),
    ("loss_proto_m_to_s", _proto_term_check("m>s"), COMPOSED_TOL),
    ("loss_proto_s_to_m", _proto_term_check("s>m"), COMPOSED_TOL),
    ("loss_proto_n_to_s", _proto_term_check("n>s"), COMPOSED_TOL),
    ("loss_proto_s_to_n", _proto_term_check("s>n"), COMPOSED_TOL),
    ("model_forward_all_params", _check_model_forward, COMPOSED_TOL),
]


def run_all(seeds=SEEDS_PER_CHECK, corrupt=None, log=None):
    """Run every registered check over fresh seeds; returns CheckResults."""
    names = {name for name, _, _ in CHECKS}
    if corrupt is not None and corrupt not in names:
        raise KeyError(f"unknown check {corrupt!r}; choose from {sorted(names)}")
    results = []
    for name, builder, tol in CHECKS:
        t0 = time.perf_counter()
        worst = 0.0
        for seed in range(seeds):
            # crc32 keeps the problem instances identical across processes
            rng = np.random.default_rng((zlib.crc32(name.encode()) & 0xFFFF) * 1000 + seed)
            build, leaves = builder(rng)
            worst = max(worst, check_gradients(build, leaves, corrupt=(name == corrupt)))
        result = CheckResult(name, worst, tol, worst <= tol, time.perf_counter() - t0)
        results.append(result)
        if log:
            status = "ok" if result.passed else "FAIL"
            log(f"  {status:4s} {name:36s} max rel err {worst:.3e} (tol {tol:.0e})")
    return results
