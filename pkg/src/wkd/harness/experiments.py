"""Teacher training, IR construction, distillation, self-KD and aggregation."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import feature_dist, interrelation, logit_loss
from .._io import atomic_write_text, dump_json
from ..errors import MissingRun, NumericalBlowup, ValidationError
from ..nets import ConvNet, ConvNetSpec, load_checkpoint, save_checkpoint, sgd_step
from ..numerics import prng
from .config import TrainConfig, config_hash, group_hash
from .dataset import Dataset, gen_dataset

EPOCH_COLUMNS = ("epoch", "train_acc", "test_acc", "loss_ce", "loss_wd", "loss_t", "loss_feat", "loss_kd",
                 "loss_total")
COMPONENTS = ("loss_ce", "loss_wd", "loss_t", "loss_feat", "loss_kd")


@dataclass
class RunRecord:
    name: str
    config_hash: str
    group_hash: str
    seed: int
    method: str
    epochs: list = field(default_factory=list)
    final_train_acc: float = 0.0
    final_test_acc: float = 0.0
    wall_clock_s: float | None = None

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "config_hash": self.config_hash,
            "group_hash": self.group_hash,
            "seed": self.seed,
            "method": self.method,
            "epochs": self.epochs,
            "final_train_acc": self.final_train_acc,
            "final_test_acc": self.final_test_acc,
        }
        if self.wall_clock_s is not None:
            d["wall_clock_s"] = self.wall_clock_s
        return d

    def epochs_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(EPOCH_COLUMNS)
        for row in self.epochs:
            writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in EPOCH_COLUMNS[1:]])
        return buf.getvalue()


def net_spec(cfg: TrainConfig, role: str, projector: int | None = None) -> ConvNetSpec:
    d = cfg.dataset
    stages = cfg.teacher.stages if role == "teacher" else cfg.student.stages
    return ConvNetSpec(1, d.height, d.width, tuple(tuple(s) for s in stages), d.n_classes, projector)


def lr_at(optim, epoch: int) -> float:
    if optim.schedule == "cosine":
        return 0.5 * optim.lr * (1.0 + np.cos(np.pi * epoch / max(optim.epochs, 1)))
    return optim.lr * 0.1 ** sum(epoch >= m for m in optim.milestones)


def predict(net: ConvNet, x, batch_size: int = 256):
    logits, feats, pooled = [], [], []
    for i in range(0, len(x), batch_size):
        z, taps = net.forward(x[i:i + batch_size])
        logits.append(z)
        feats.append(taps["last"])
        pooled.append(taps["penultimate"])
    return np.concatenate(logits), np.concatenate(feats), np.concatenate(pooled)


def accuracy(net: ConvNet, x, y) -> float:
    return float(np.mean(predict(net, x)[0].argmax(1) == y))


@dataclass
class TeacherSignals:
    """Frozen teacher outputs on the training set, plus the cost matrix."""
    logits: np.ndarray
    features: np.ndarray
    cost: np.ndarray | None = None


def _train(net: ConvNet, data: Dataset, optim, cfg: TrainConfig, seed: int, name: str,
           teacher: TeacherSignals | None = None) -> RunRecord:
    loss_cfg = cfg.loss
    logit_kind, feat_kind = loss_cfg.parts() if teacher is not None else (None, None)
    wkdl_cfg = logit_loss.LogitLossConfig(
        lam=loss_cfg.lam, tau=loss_cfg.tau, eta=loss_cfg.eta, iters=loss_cfg.iters,
        separate_target=loss_cfg.separate_target, target_weight=loss_cfg.target_weight,
        wd_value=loss_cfg.wd_value)
    if logit_kind == "wkd-l" and teacher.cost is None:
        raise ValidationError("wkd-l needs a cost matrix")

    rng = prng(seed)
    velocity: dict = {}
    n = len(data.y_train)
    steps_per_epoch = -(-n // optim.batch_size)
    warmup_steps = optim.warmup_epochs * steps_per_epoch
    step = 0
    record = RunRecord(name, config_hash(cfg), group_hash(cfg), cfg.seed, cfg.loss.method if teacher else "ce")
    start = time.perf_counter()
    for epoch in range(optim.epochs):
        lr = lr_at(optim, epoch)
        order = rng.permutation(n)
        sums = dict.fromkeys(COMPONENTS, 0.0)
        correct = 0
        for i in range(0, n, optim.batch_size):
            idx = order[i:i + optim.batch_size]
            xb, yb = data.x_train[idx], data.y_train[idx]
            z, taps = net.forward(xb)
            ce, grad_z = logit_loss.cross_entropy(z, yb)
            parts = dict.fromkeys(COMPONENTS, 0.0)
            parts["loss_ce"] = ce
            grad_taps = {}
            if logit_kind == "kd":
                kl, g = logit_loss.kd_kl(teacher.logits[idx], z, loss_cfg.tau)
                w = loss_cfg.kd_weight * loss_cfg.tau**2
                parts["loss_kd"] = w * kl
                grad_z = grad_z + w * g
            elif logit_kind == "wkd-l":
                res = logit_loss.wkd_l(teacher.logits[idx], z, teacher.cost, wkdl_cfg, target=yb)
                parts["loss_wd"] = loss_cfg.lam * res.wd
                parts["loss_t"] = loss_cfg.target_weight * res.target if loss_cfg.separate_target else 0.0
                grad_z = grad_z + res.grad
            if feat_kind is not None and loss_cfg.feature_weight:
                # overflow surfaces as a non-finite total below, which raises NumericalBlowup
                with np.errstate(over="ignore", invalid="ignore"):
                    fl, g = feature_dist.feature_loss(feat_kind, teacher.features[idx], taps["projected"],
                                                      loss_cfg.grid, loss_cfg.gamma, loss_cfg.eta,
                                                      loss_cfg.iters)
                parts["loss_feat"] = loss_cfg.feature_weight * fl
                grad_taps["projected"] = loss_cfg.feature_weight * g
            total = sum(parts.values())
            if not np.isfinite(total):
                raise NumericalBlowup(f"non-finite loss at epoch {epoch}")
            grads = net.backward(grad_z, grad_taps)
            step += 1
            ramp = min(1.0, step / warmup_steps) if warmup_steps > 0 else 1.0
            sgd_step(net.params, grads, velocity, lr * ramp, optim.momentum, optim.weight_decay)
            for k in COMPONENTS:
                sums[k] += parts[k] * len(idx)
            correct += int(np.sum(z.argmax(1) == yb))
        row = {"epoch": epoch + 1, "train_acc": correct / n, "test_acc": accuracy(net, data.x_test, data.y_test)}
        row.update({k: sums[k] / n for k in COMPONENTS})
        row["loss_total"] = sum(row[k] for k in COMPONENTS)
        record.epochs.append(row)
    record.final_train_acc = accuracy(net, data.x_train, data.y_train)
    record.final_test_acc = accuracy(net, data.x_test, data.y_test)
    if cfg.record_timing:
        record.wall_clock_s = time.perf_counter() - start
    return record


def train_teacher(cfg: TrainConfig, data: Dataset | None = None, out_dir=None):
    """Cross-entropy training of the teacher; returns ``(net, record)``."""
    cfg.validate()
    data = data or gen_dataset(cfg.dataset)
    net = ConvNet(net_spec(cfg, "teacher"), seed=cfg.teacher_optim.seed)
    record = _train(net, data, cfg.teacher_optim, cfg, cfg.teacher_optim.seed, "teacher")
    if out_dir is not None:
        out = Path(out_dir)
        save_checkpoint(out / "teacher.ckpt", net.params)
        write_record(out, record, "teacher")
    return net, record


def load_teacher(cfg: TrainConfig, path) -> ConvNet:
    net = ConvNet(net_spec(cfg, "teacher"))
    params = load_checkpoint(path)
    if set(params) != set(net.params) or any(params[k].shape != net.params[k].shape for k in params):
        raise ValidationError("teacher checkpoint does not match the configured architecture")
    net.params = params
    return net


def build_ir(cfg: TrainConfig, teacher: ConvNet, data: Dataset | None = None, out_dir=None):
    """IR and cost matrices from ``ir_per_class`` teacher penultimate features per class."""
    data = data or gen_dataset(cfg.dataset)
    lc = cfg.loss
    rng = prng(cfg.seed)
    n_cls = cfg.dataset.n_classes
    picks = []
    for c in range(n_cls):
        members = np.flatnonzero(data.y_train == c)
        if len(members) < lc.ir_per_class:
            raise ValidationError(f"class {c} has fewer than {lc.ir_per_class} training examples")
        picks.append(np.sort(rng.choice(members, lc.ir_per_class, replace=False)))
    _, _, pooled = predict(teacher, data.x_train[np.concatenate(picks)])
    bank = pooled.reshape(n_cls, lc.ir_per_class, -1).transpose(0, 2, 1)
    ir = interrelation.ir_matrix(bank, lc.ir_method, degree=lc.ir_degree, alpha=lc.ir_alpha,
                                 classifier_weights=teacher.params["fc.w"].T)
    cost = interrelation.cost_matrix(ir, lc.kappa)
    if out_dir is not None:
        out = Path(out_dir)
        interrelation.write_matrix_csv(out / "ir.csv", ir)
        interrelation.write_matrix_csv(out / "cost.csv", cost)
    return ir, cost


def teacher_signals(cfg: TrainConfig, teacher: ConvNet, data: Dataset, cost=None) -> TeacherSignals:
    logits, feats, _ = predict(teacher, data.x_train)
    if cost is None and cfg.loss.parts()[0] == "wkd-l":
        cost = build_ir(cfg, teacher, data)[1]
    return TeacherSignals(logits, feats, None if cost is None else np.asarray(getattr(cost, "values", cost)))


def distill(cfg: TrainConfig, teacher: ConvNet, data: Dataset | None = None, cost=None, out_dir=None,
            signals: TeacherSignals | None = None):
    """Train a student with CE plus the configured distillation losses."""
    cfg.validate()
    data = data or gen_dataset(cfg.dataset)
    _, feat_kind = cfg.loss.parts()
    t_channels = teacher.spec.feature_shape()[0]
    student = ConvNet(net_spec(cfg, "student", projector=t_channels if feat_kind else None), seed=cfg.seed)
    if cfg.loss.method == "ce":
        record = _train(student, data, cfg.student_optim, cfg, cfg.seed, "student")
    else:
        signals = signals or teacher_signals(cfg, teacher, data, cost)
        record = _train(student, data, cfg.student_optim, cfg, cfg.seed, "student", signals)
    if out_dir is not None:
        out = Path(out_dir)
        save_checkpoint(out / "student.ckpt", student.params)
        write_record(out, record, "record")
    return student, record


def self_kd(cfg: TrainConfig, data: Dataset | None = None, out_dir=None):
    """Born-again self distillation: S0 by cross-entropy, then S1 from S0 with WKD-L."""
    cfg.validate()
    data = data or gen_dataset(cfg.dataset)
    s0 = ConvNet(net_spec(cfg, "student"), seed=cfg.seed)
    rec0 = _train(s0, data, cfg.student_optim, cfg, cfg.seed, "s0")
    kd_cfg = cfg.replace(loss=dataclasses.replace(cfg.loss, method="wkd-l"))
    _, cost = build_ir(kd_cfg, s0, data)
    signals = teacher_signals(kd_cfg, s0, data, cost)
    s1 = ConvNet(net_spec(cfg, "student"), seed=cfg.seed + 1)
    rec1 = _train(s1, data, cfg.student_optim, kd_cfg, cfg.seed + 1, "s1", signals)
    result = {
        "config_hash": config_hash(cfg),
        "group_hash": group_hash(cfg),
        "seed": cfg.seed,
        "s0": rec0.to_dict(),
        "s1": rec1.to_dict(),
    }
    if out_dir is not None:
        out = Path(out_dir)
        dump_json(out / "record.json", result)
        atomic_write_text(out / "s0_epochs.csv", rec0.epochs_csv())
        atomic_write_text(out / "s1_epochs.csv", rec1.epochs_csv())
        interrelation.write_matrix_csv(out / "cost.csv", cost)
    return (s0, rec0), (s1, rec1)


def write_record(out_dir, record: RunRecord, stem: str):
    out = Path(out_dir)
    dump_json(out / f"{stem}.json", record.to_dict())
    atomic_write_text(out / f"{stem}_epochs.csv", record.epochs_csv())


def aggregate(run_dirs, out_path=None) -> list[dict]:
    """Mean and (population) std of final test accuracy per configuration group.

    Self-KD runs contribute two groups, ``<hash>/s0`` and ``<hash>/s1``.
    Output rows are sorted by group so input order does not matter.
    """
    groups: dict[tuple, list] = {}
    for d in run_dirs:
        path = Path(d) / "record.json"
        if not path.exists():
            raise MissingRun(f"no record.json in {d}")
        rec = json.loads(path.read_text())
        if "s0" in rec:
            for gen in ("s0", "s1"):
                key = (f"{rec['group_hash']}/{gen}", f"self-kd/{gen}")
                groups.setdefault(key, []).append((rec["seed"], rec[gen]["final_test_acc"]))
        else:
            key = (rec["group_hash"], rec["method"])
            groups.setdefault(key, []).append((rec["seed"], rec["final_test_acc"]))
    rows = []
    for (group, method), runs in sorted(groups.items()):
        runs.sort()
        acc = np.array([a for _, a in runs])
        rows.append({
            "group": group,
            "method": method,
            "n_runs": len(runs),
            "seeds": [s for s, _ in runs],
            "mean_test_acc": float(acc.mean()),
            "std_test_acc": float(acc.std()),
        })
    if out_path is not None:
        out = Path(out_path)
        if out.suffix == ".json":
            dump_json(out, rows)
        else:
            buf = io.StringIO()
            writer = csv.writer(buf, lineterminator="\n")
            writer.writerow(["group", "method", "n_runs", "seeds", "mean_test_acc", "std_test_acc"])
            for r in rows:
                writer.writerow([r["group"], r["method"], r["n_runs"], " ".join(map(str, r["seeds"])),
                                 repr(r["mean_test_acc"]), repr(r["std_test_acc"])])
            atomic_write_text(out, buf.getvalue())
    return rows
