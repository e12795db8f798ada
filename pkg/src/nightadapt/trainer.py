"""The full training loop: supervised CE plus weighted mixup and prototype
terms, AdamW with warmup + poly decay, and the EMA teacher.

Each step consumes one labeled day sample and one unlabeled day/night
pair (batch size 2). Per-iteration randomness is drawn from streams keyed
by (seed, iteration, purpose), so toggling a module on or off never
shifts another module's draws and resuming from a checkpoint replays the
identical trajectory.
"""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import dsr, evalkit, fpa, model, pseudo
from . import tensor as T
from .io import load_records, load_tensor, read_kv, save_records
from .losses import cross_entropy
from .synthdata import DomainSample
from .taxonomy import default_taxonomy
from .tensor import Tape, Tensor

_STREAM_CLASSES = 11
_STREAM_BANK = 12

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

LOSS_CSV_HEADER = "iter,loss_total,loss_sup,loss_mix,loss_proto,lr"


class TrainingDiverged(RuntimeError):
    pass


def _iter_rng(seed, iteration, purpose):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((int(seed), int(iteration), purpose))))


def _zero_scalar():
    return Tensor(np.zeros((), dtype=np.float32))


# ---------------------------------------------------------------------------
# losses and schedules


def sup_loss(student_logits_on_source, y_source):
    """Pixel-averaged cross entropy on the labeled day sample."""
    return cross_entropy(student_logits_on_source, y_source)


def total_loss(l_sup, l_mix, l_proto, alpha, beta):
    """L = L_sup + alpha * L_mix + beta * L_proto."""
    return T.add(l_sup, T.add(T.scale(l_mix, alpha), T.scale(l_proto, beta)))


def lr_schedule(iteration, total_iters, base_lr, warmup_ratio=1e-6, warmup_frac=0.05, poly_power=0.9):
    """Linear warmup from base_lr*warmup_ratio, then polynomial decay to 0."""
    if not 0 <= iteration <= total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {total_iters}]")
    warmup_iters = max(1, int(total_iters * warmup_frac))
    if iteration < warmup_iters:
        return base_lr * (warmup_ratio + (1.0 - warmup_ratio) * iteration / warmup_iters)
    frac = (iteration - warmup_iters) / (total_iters - warmup_iters)
    return base_lr * (1.0 - frac) ** poly_power


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)  # name -> first moment array
    v: dict = field(default_factory=dict)  # name -> second moment array
    step: int = 0


def adamw_step(params, grads, state, lr, weight_decay):
    """Bias-corrected Adam with decoupled weight decay; returns new params."""
    state.step += 1
    t = state.step
    new_tensors = {}
    for name, p in params.tensors.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1**t)
        v_hat = v / (1.0 - ADAM_BETA2**t)
        update = m_hat / (np.sqrt(v_hat) + ADAM_EPS) + weight_decay * p.data
        new_tensors[name] = Tensor((p.data - lr * update).astype(p.data.dtype), requires_grad=True)
    new_params = model.ModelParams(
        new_tensors, params.channels, params.feature_dim, params.num_classes, params.seed, True
    )
    return new_params, state


# ---------------------------------------------------------------------------
# one optimization step


@dataclass
class StepReport:
    iteration: int
    loss_sup: float
    loss_mix: float
    loss_proto: float
    loss_total: float
    lr: float
    seconds: float


@dataclass
class TrainState:
    config: object  # Config
    taxonomy: object
    student: model.ModelParams
    teacher: model.ModelParams
    opt: OptimizerState
    bank: dsr.LongTailedBank
    iteration: int = 0


def train_step(state, batch):
    """Run one full optimization step and advance the state in place."""
    cfg = state.config
    tax = state.taxonomy
    it = state.iteration
    t0 = time.perf_counter()
    source, (day_img, night_img) = batch

    total_iters = cfg["trainer.total_iters"]
    lr = lr_schedule(
        it,
        total_iters,
        cfg["trainer.base_lr"],
        cfg["trainer.warmup_ratio"],
        cfg["trainer.warmup_frac"],
        cfg["trainer.poly_power"],
    )
    alpha = cfg["trainer.alpha"]
    beta = cfg["trainer.beta"]
    dsr_on = cfg["dsr.enable"]
    fpa_on = cfg["fpa.enable"]
    seed = cfg["trainer.seed"]

    night_label = None
    if dsr_on or fpa_on:
        day_out = model.forward(state.teacher, day_img)
        night_out = model.forward(state.teacher, night_img)
        refined = pseudo.refine_night_pseudo(
            day_out.probs(),
            night_out.probs(),
            tax,
            theta_day=cfg["pseudo.theta_day"],
            theta_night=cfg["pseudo.theta_night"],
        )
        night_label = refined.label

    tape = Tape()
    with tape:
        out_s = model.forward(state.student, source.image)
        l_sup = sup_loss(out_s.logits, source.label)

        mixed = None
        out_m = None
        if dsr_on:
            m_c = dsr.composite_mask(
                source.label,
                _iter_rng(seed, it, _STREAM_CLASSES),
                tax,
                fraction=cfg["dsr.random_class_fraction"],
                forced_classes=cfg["dsr.forced_classes"],
            )
            mixed = dsr.MixedSample(
                dsr.image_mixup(source.image, night_img, m_c),
                dsr.label_mixup(source.label, night_label, m_c),
            )
            if cfg["dsr.bank_enable"]:
                dsr.bank_push(state.bank, source, tax)
                mixed = dsr.bank_apply(
                    state.bank, mixed, _iter_rng(seed, it, _STREAM_BANK), prob=cfg["dsr.bank_prob"]
                )
            out_m = model.forward(state.student, mixed.image)
            l_mix = dsr.mix_loss(out_m.logits, mixed.label)
        else:
            l_mix = _zero_scalar()

        if fpa_on:
            out_n = model.forward(state.student, night_img)
            source_pair = (out_s.features, fpa.downsample_label(source.label))
            mixed_pair = (
                (out_m.features, fpa.downsample_label(mixed.label)) if dsr_on else None
            )
            night_pair = (out_n.features, fpa.downsample_label(night_label))
            l_proto = fpa.proto_loss(
                source_pair,
                mixed_pair,
                night_pair,
                tax,
                tau=cfg["fpa.tau"],
                reweight=cfg["fpa.enable_reweight"],
                stop_grad_protos=cfg["fpa.stop_grad_protos"],
            )
        else:
            l_proto = _zero_scalar()

        total = total_loss(l_sup, l_mix, l_proto, alpha, beta)

    components = {
        "loss_sup": float(l_sup.item()),
        "loss_mix": float(l_mix.item()),
        "loss_proto": float(l_proto.item()),
        "loss_total": float(total.item()),
    }
    if not np.isfinite(components["loss_total"]):
        raise TrainingDiverged(f"non-finite loss at iteration {it}: {components}")

    tape.backward(total)
    grads = {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in state.student.tensors.items()
    }
    state.student, state.opt = adamw_step(
        state.student, grads, state.opt, lr, cfg["trainer.weight_decay"]
    )
    state.teacher = model.ema_update(state.teacher, state.student, cfg["trainer.ema_lambda"])
    state.iteration += 1

    return StepReport(
        iteration=it,
        loss_sup=components["loss_sup"],
        loss_mix=components["loss_mix"],
        loss_proto=components["loss_proto"],
        loss_total=components["loss_total"],
        lr=lr,
        seconds=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# dataset access and the outer loop


@dataclass
class LoadedDataset:
    source: list  # DomainSample with labels
    target: list  # (day Tensor, night Tensor) pairs
    test: list  # (night Tensor, label array) pairs


def load_dataset(data_dir):
    manifest_path = os.path.join(data_dir, "manifest.cfg")
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    manifest = read_kv(manifest_path)
    ns, nt, ne = int(manifest["num_source"]), int(manifest["num_target"]), int(manifest["num_test"])
    source = []
    for i in range(ns):
        img = Tensor(load_tensor(os.path.join(data_dir, "source", f"img_{i:05d}.dsrt")))
        lbl = Tensor(load_tensor(os.path.join(data_dir, "source", f"lbl_{i:05d}.dsrt")))
        source.append(DomainSample(img, lbl, "source_day"))
    target = []
    for i in range(nt):
        day = Tensor(load_tensor(os.path.join(data_dir, "target", f"day_{i:05d}.dsrt")))
        night = Tensor(load_tensor(os.path.join(data_dir, "target", f"night_{i:05d}.dsrt")))
        target.append((day, night))
    test = []
    for i in range(ne):
        night = Tensor(load_tensor(os.path.join(data_dir, "test", f"night_{i:05d}.dsrt")))
        lbl = load_tensor(os.path.join(data_dir, "test", f"lbl_{i:05d}.dsrt"))
        test.append((night, lbl))
    return LoadedDataset(source, target, test)


def evaluate_student(params, test_items, taxonomy, name=""):
    """Student-only inference over the held-out night split."""
    cm = evalkit.ConfusionMatrix(len(taxonomy))
    for night_img, label in test_items:
        pred = model.forward(params, night_img).pred()
        evalkit.accumulate(cm, pred, label)
    return evalkit.iou(cm, taxonomy, name=name)


def _fmt(v):
    return repr(float(v))


def _save_train_state(path, state):
    records = {
        "iteration": np.float64(state.iteration).reshape(()),
        "opt/step": np.float64(state.opt.step).reshape(()),
        "student_seed": np.float64(state.student.seed).reshape(()),
    }
    for name, t in state.student.tensors.items():
        records[f"student/{name}"] = t.data
    for name, t in state.teacher.tensors.items():
        records[f"teacher/{name}"] = t.data
    for name in state.student.tensors:
        if name in state.opt.m:
            records[f"opt/m/{name}"] = state.opt.m[name]
            records[f"opt/v/{name}"] = state.opt.v[name]
    for cid, queue in sorted(state.bank.queues.items()):
        for idx, entry in enumerate(queue):
            records[f"bank/{cid}/{idx}/image"] = entry.image
            records[f"bank/{cid}/{idx}/mask"] = entry.mask
            records[f"bank/{cid}/{idx}/label"] = entry.label
    save_records(path, records)


def _load_train_state(path, config, taxonomy):
    from collections import deque

    records = load_records(path)
    iteration = int(records.pop("iteration").item())
    opt_step = int(records.pop("opt/step").item())
    seed = int(records.pop("student_seed").item())

    def collect(prefix, trainable):
        tensors = {
            name[len(prefix) :]: Tensor(arr, requires_grad=trainable)
            for name, arr in records.items()
            if name.startswith(prefix)
        }
        return tensors

    ch, d = config["model.channels"], config["model.feature_dim"]
    student = model.ModelParams(collect("student/", True), ch, d, len(taxonomy), seed, True)
    teacher = model.ModelParams(collect("teacher/", False), ch, d, len(taxonomy), seed, False)
    opt = OptimizerState(step=opt_step)
    for name in student.tensors:
        mkey, vkey = f"opt/m/{name}", f"opt/v/{name}"
        if mkey in records:
            opt.m[name] = records[mkey].copy()
            opt.v[name] = records[vkey].copy()
    bank = dsr.LongTailedBank(
        capacity=config["dsr.bank_capacity"], min_pixels=config["dsr.bank_min_pixels"]
    )
    entries = {}
    for name, arr in records.items():
        if not name.startswith("bank/"):
            continue
        _, cid, idx, kind = name.split("/")
        entries.setdefault((int(cid), int(idx)), {})[kind] = arr
    for (cid, idx) in sorted(entries):
        parts = entries[(cid, idx)]
        bank.queues.setdefault(cid, deque()).append(
            dsr.BankEntry(parts["image"], parts["mask"], parts["label"], cid)
        )
    return TrainState(config, taxonomy, student, teacher, opt, bank, iteration)


def init_train_state(config, taxonomy=None):
    tax = taxonomy or default_taxonomy()
    student = model.init(
        config["trainer.seed"],
        tax,
        channels=config["model.channels"],
        feature_dim=config["model.feature_dim"],
    )
    return TrainState(
        config=config,
        taxonomy=tax,
        student=student,
        teacher=model.init_teacher(student),
        opt=OptimizerState(),
        bank=dsr.LongTailedBank(
            capacity=config["dsr.bank_capacity"], min_pixels=config["dsr.bank_min_pixels"]
        ),
        iteration=0,
    )


def run(config, data_dir, out_dir, resume_from=None, log=print):
    """Train to total_iters, evaluating periodically; returns a summary dict."""
    if config["trainer.batch_size"] != 2:
        raise ValueError("only batch size 2 (one labeled sample + one pair) is supported")
    os.makedirs(out_dir, exist_ok=True)
    data = load_dataset(data_dir)
    tax = default_taxonomy()

    if resume_from:
        state = _load_train_state(resume_from, config, tax)
        mode = "a"
    else:
        state = init_train_state(config, tax)
        mode = "w"

    with open(os.path.join(out_dir, "run.cfg"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(config.dump_lines()) + "\n")

    total_iters = config["trainer.total_iters"]
    eval_every = config["trainer.eval_every"]
    ckpt_every = config["trainer.checkpoint_every"]
    losses_path = os.path.join(out_dir, "losses.csv")
    eval_path = os.path.join(out_dir, "eval.csv")

    losses_fh = open(losses_path, mode, encoding="utf-8")
    eval_fh = open(eval_path, mode, encoding="utf-8")
    if mode == "w":
        losses_fh.write(LOSS_CSV_HEADER + "\n")
        eval_fh.write("iter,miou,static_miou,dynamic_miou\n")

    t_start = time.perf_counter()
    reports = []
    try:
        while state.iteration < total_iters:
            it = state.iteration
            batch = (data.source[it % len(data.source)], data.target[it % len(data.target)])
            report = train_step(state, batch)
            reports.append(report)
            losses_fh.write(
                f"{report.iteration},{_fmt(report.loss_total)},{_fmt(report.loss_sup)},"
                f"{_fmt(report.loss_mix)},{_fmt(report.loss_proto)},{_fmt(report.lr)}\n"
            )
            done = state.iteration
            if eval_every and (done % eval_every == 0 or done == total_iters):
                ev = evaluate_student(state.student, data.test, tax)
                eval_fh.write(
                    f"{done},{ev.miou:.6f},{ev.group_miou['static']:.6f},"
                    f"{ev.group_miou['dynamic_small']:.6f}\n"
                )
                log(f"[iter {done}] loss {report.loss_total:.4f} night mIoU {ev.miou:.4f}")
            if ckpt_every and done % ckpt_every == 0 and done < total_iters:
                _save_train_state(os.path.join(out_dir, f"trainstate_{done:06d}.nckpt"), state)
    finally:
        losses_fh.close()
        eval_fh.close()

    model.save_checkpoint(state.student, os.path.join(out_dir, "checkpoint_final.nckpt"))
    _save_train_state(os.path.join(out_dir, "trainstate_final.nckpt"), state)

    final_report = evaluate_student(state.student, data.test, tax, name="final")
    evalkit.write_report(
        final_report,
        os.path.join(out_dir, "report.csv"),
        os.path.join(out_dir, "report.md"),
    )
    return {
        "final_report": final_report,
        "reports": reports,
        "seconds": time.perf_counter() - t_start,
        "state": state,
        "out_dir": out_dir,
    }
