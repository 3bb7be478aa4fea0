import dataclasses
import json

import numpy as np
import pytest

from wkd.errors import InvalidSpec, MissingRun, ValidationError
from wkd.harness import experiments as ex
from wkd.harness.config import (
    TrainConfig, apply_overrides, config_hash, from_dict, group_hash, leaf_fields, load_config,
)
from wkd.harness.dataset import DatasetSpec, gen_dataset, load_dataset, save_dataset, summary
from wkd.harness.protocol import EVAL_SEEDS, TUNED, TUNING_SEEDS, method_config
from wkd.nets import ConvNet, load_checkpoint

from conftest import TINY


# -- dataset -------------------------------------------------------------------

def test_noise_free_classes_are_constant():
    data = gen_dataset(DatasetSpec(noise=0.0, train_per_class=5, test_per_class=2))
    for c in range(12):
        xs = data.x_train[data.y_train == c]
        assert np.all(xs == xs[0])


def test_dataset_deterministic_and_balanced():
    a, b = gen_dataset(DatasetSpec()), gen_dataset(DatasetSpec())
    assert a.x_train.tobytes() == b.x_train.tobytes() and a.y_test.tobytes() == b.y_test.tobytes()
    assert np.bincount(a.y_train).tolist() == [200] * 12
    assert np.bincount(a.y_test).tolist() == [100] * 12
    assert a.x_train.shape == (2400, 1, 16, 16)
    assert not np.array_equal(gen_dataset(DatasetSpec(seed=1)).x_train, a.x_train)


def test_superclass_structure_in_images():
    s = summary(gen_dataset(DatasetSpec()))
    assert s["within_super_class_mean_distance"] < s["cross_super_class_mean_distance"]


def test_dataset_spec_validation():
    with pytest.raises(InvalidSpec):
        gen_dataset(DatasetSpec(n_classes=10, n_super=3))
    with pytest.raises(InvalidSpec):
        gen_dataset(DatasetSpec(noise=-1.0))


def test_dataset_roundtrip(tmp_path):
    spec = DatasetSpec(train_per_class=3, test_per_class=2)
    data = gen_dataset(spec)
    save_dataset(tmp_path / "d.bin", data)
    back = load_dataset(tmp_path / "d.bin", spec)
    assert back.x_train.tobytes() == data.x_train.tobytes()
    np.testing.assert_array_equal(back.y_test, data.y_test)


# -- config ----------------------------------------------------------------------

def test_defaults_are_the_reference_loss_settings():
    lc = TrainConfig().loss
    assert (lc.tau, lc.kappa, lc.lam, lc.gamma, lc.feature_weight, lc.eta, lc.iters) == (2, 1, 30, 2, 2e-2, 0.05, 9)
    assert TrainConfig().dataset == DatasetSpec()
    assert lc.ir_per_class == 50


def test_hash_independent_of_field_order():
    d = TrainConfig().to_dict()
    shuffled = {k: d[k] for k in reversed(list(d))}
    shuffled["loss"] = {k: d["loss"][k] for k in reversed(list(d["loss"]))}
    assert config_hash(from_dict(shuffled)) == config_hash(TrainConfig())
    assert json.dumps(shuffled) != json.dumps(d)


def test_group_hash_ignores_seed_only():
    a = TrainConfig()
    assert group_hash(a) == group_hash(a.replace(seed=5))
    assert config_hash(a) != config_hash(a.replace(seed=5))
    assert group_hash(a) != group_hash(apply_overrides(a, {"loss.lam": 1.0}))


def test_overrides_and_validation(tmp_path):
    cfg = apply_overrides(TrainConfig(), {"loss.method": "wkd-l", "student.stages": [[4, 2]], "seed": 3})
    assert cfg.loss.method == "wkd-l" and cfg.student.stages == ((4, 2),) and cfg.seed == 3
    for bad in ({"loss.nope": 1}, {"nope.lam": 1}, {"loss.method": "magic"}, {"loss.tau": 0.0},
                {"loss.method": "g2denet"}, {"loss.ir_method": "cka-magic"}, {"student_optim.schedule": "exp"}):
        with pytest.raises(InvalidSpec):
            apply_overrides(TrainConfig(), bad)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(TINY))
    assert load_config(path) == from_dict(TINY)
    with pytest.raises(InvalidSpec):
        from_dict({"extra": 1})


def test_leaf_fields_cover_every_setting():
    names = {n for n, _, _ in leaf_fields()}
    assert {"seed", "loss.lam", "loss.kappa", "loss.grid", "dataset.noise", "student_optim.lr"} <= names
    d = TrainConfig().to_dict()
    count = sum(len(v) if isinstance(v, dict) else 1 for v in d.values())
    assert count == len(names)


def test_lr_schedules():
    o = TrainConfig().student_optim
    assert ex.lr_at(o, 0) == o.lr
    assert ex.lr_at(o, o.epochs // 2) == pytest.approx(0.5 * o.lr)
    step = dataclasses.replace(o, schedule="step", milestones=(2, 4))
    assert [ex.lr_at(step, e) for e in (0, 2, 4)] == pytest.approx([o.lr, 0.1 * o.lr, 0.01 * o.lr])


# -- experiments on the tiny config ------------------------------------------------

def test_zero_epoch_teacher_keeps_initial_weights(tiny_cfg):
    cfg = apply_overrides(tiny_cfg, {"teacher_optim.epochs": 0})
    net, record = ex.train_teacher(cfg)
    init = ConvNet(ex.net_spec(cfg, "teacher"), seed=cfg.teacher_optim.seed)
    for k in net.params:
        assert net.params[k].tobytes() == init.params[k].tobytes()
    assert record.epochs == []


def test_teacher_reproducible(tiny_cfg, tmp_path):
    _, a = ex.train_teacher(tiny_cfg, out_dir=tmp_path / "a")
    _, b = ex.train_teacher(tiny_cfg, out_dir=tmp_path / "b")
    assert a.to_dict() == b.to_dict()
    assert (tmp_path / "a/teacher.ckpt").read_bytes() == (tmp_path / "b/teacher.ckpt").read_bytes()
    assert [r["epoch"] for r in a.epochs] == [1, 2, 3]
    header = (tmp_path / "a/teacher_epochs.csv").read_text().splitlines()[0]
    assert header.startswith("epoch,train_acc,test_acc,loss_ce,loss_wd,loss_t,loss_feat")


def test_load_teacher_checks_architecture(tiny_cfg, tmp_path):
    ex.train_teacher(apply_overrides(tiny_cfg, {"teacher_optim.epochs": 0}), out_dir=tmp_path)
    ex.load_teacher(tiny_cfg, tmp_path / "teacher.ckpt")
    with pytest.raises(ValidationError):
        ex.load_teacher(apply_overrides(tiny_cfg, {"teacher.stages": [[5, 1]]}), tmp_path / "teacher.ckpt")


def test_build_ir_persisted_and_reproducible(tiny_cfg, tmp_path):
    teacher, _ = ex.train_teacher(tiny_cfg)
    ir, cost = ex.build_ir(tiny_cfg, teacher, out_dir=tmp_path / "a")
    ex.build_ir(tiny_cfg, teacher, out_dir=tmp_path / "b")
    from wkd.interrelation import read_matrix_csv

    saved = read_matrix_csv(tmp_path / "a/ir.csv")
    np.testing.assert_array_equal(np.diag(saved), np.ones(4))
    np.testing.assert_array_equal(saved, ir.values)
    np.testing.assert_array_equal(read_matrix_csv(tmp_path / "a/cost.csv"), cost.values)
    for name in ("ir.csv", "cost.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("method,extra", [
    ("wkd-l", {"loss.lam": 0.0, "loss.target_weight": 0.0}),
    ("wkd-f", {"loss.feature_weight": 0.0}),
    ("wkd-l+wkd-f", {"loss.lam": 0.0, "loss.target_weight": 0.0, "loss.feature_weight": 0.0}),
])
def test_zero_weights_reproduce_cross_entropy(tiny_cfg, method, extra):
    teacher, _ = ex.train_teacher(tiny_cfg)
    _, ce = ex.distill(tiny_cfg, teacher)
    cfg = apply_overrides(tiny_cfg, {"loss.method": method, **extra})
    student, rec = ex.distill(cfg, teacher)
    assert [(r["train_acc"], r["test_acc"], r["loss_ce"]) for r in rec.epochs] == \
           [(r["train_acc"], r["test_acc"], r["loss_ce"]) for r in ce.epochs]
    assert rec.final_test_acc == ce.final_test_acc


@pytest.mark.parametrize("method", ["kd", "wkd-l", "wkd-f", "wkd-l+wkd-f", "kl-diag", "spatial-2nd",
                                    "channel-2nd", "laplace-kl", "exp-kl", "pmf-wd", "symkl-diag"])
def test_distill_every_method_accounts_losses(tiny_cfg, method, tmp_path):
    teacher, _ = ex.train_teacher(tiny_cfg)
    cfg = apply_overrides(tiny_cfg, {"loss.method": method, "loss.feature_weight": 1e-6})
    _, rec = ex.distill(cfg, teacher, out_dir=tmp_path)
    for row in rec.epochs:
        assert row["loss_total"] == pytest.approx(sum(row[k] for k in ex.COMPONENTS), abs=1e-10)
    saved = json.loads((tmp_path / "record.json").read_text())
    assert saved["config_hash"] == config_hash(cfg) and saved["method"] == method
    assert saved["final_test_acc"] == rec.final_test_acc
    assert load_checkpoint(tmp_path / "student.ckpt")
    used = {k for row in rec.epochs for k in ex.COMPONENTS if row[k] != 0}
    expected = {"kd": {"loss_kd"}, "wkd-l": {"loss_wd", "loss_t"}}.get(method, {"loss_feat"})
    if method == "wkd-l+wkd-f":
        expected = {"loss_wd", "loss_t", "loss_feat"}
    assert used == expected | {"loss_ce"}


def test_distill_is_deterministic(tiny_cfg):
    teacher, _ = ex.train_teacher(tiny_cfg)
    cfg = apply_overrides(tiny_cfg, {"loss.method": "wkd-l"})
    assert ex.distill(cfg, teacher)[1].to_dict() == ex.distill(cfg, teacher)[1].to_dict()


def test_timing_is_opt_in(tiny_cfg):
    teacher, _ = ex.train_teacher(apply_overrides(tiny_cfg, {"teacher_optim.epochs": 0}))
    assert "wall_clock_s" not in ex.distill(tiny_cfg, teacher)[1].to_dict()
    rec = ex.distill(apply_overrides(tiny_cfg, {"record_timing": True}), teacher)[1]
    assert rec.wall_clock_s > 0


def test_self_kd_records_both_generations(tiny_cfg, tmp_path):
    (s0, r0), (s1, r1) = ex.self_kd(tiny_cfg, out_dir=tmp_path)
    assert s0.spec == s1.spec
    assert {k: v.shape for k, v in s0.params.items()} == {k: v.shape for k, v in s1.params.items()}
    assert r0.method == "ce" and r1.method == "wkd-l"
    saved = json.loads((tmp_path / "record.json").read_text())
    assert saved["s0"]["final_test_acc"] == r0.final_test_acc
    assert saved["s1"]["final_test_acc"] == r1.final_test_acc
    assert (tmp_path / "s1_epochs.csv").exists() and (tmp_path / "cost.csv").exists()


def _fake_run(path, group, seed, acc, method="kd"):
    path.mkdir(parents=True)
    (path / "record.json").write_text(json.dumps(
        {"group_hash": group, "seed": seed, "method": method, "final_test_acc": acc}))
    return path


def test_aggregate(tmp_path):
    runs = [_fake_run(tmp_path / f"r{i}", "g1", i, acc) for i, acc in enumerate([0.5, 0.75, 0.25])]
    runs.append(_fake_run(tmp_path / "single", "g2", 0, 0.9, "wkd-l"))
    rows = ex.aggregate(runs, tmp_path / "out.json")
    by_group = {r["group"]: r for r in rows}
    assert by_group["g1"]["mean_test_acc"] == pytest.approx(0.5, abs=1e-15)
    assert by_group["g1"]["std_test_acc"] == pytest.approx(np.std([0.5, 0.75, 0.25]), abs=1e-15)
    assert by_group["g2"]["std_test_acc"] == 0.0 and by_group["g2"]["n_runs"] == 1
    first = (tmp_path / "out.json").read_bytes()
    ex.aggregate(runs[::-1], tmp_path / "out.json")
    assert (tmp_path / "out.json").read_bytes() == first
    ex.aggregate(runs, tmp_path / "out.csv")
    assert (tmp_path / "out.csv").read_text().splitlines()[0] == "group,method,n_runs,seeds,mean_test_acc,std_test_acc"
    with pytest.raises(MissingRun):
        ex.aggregate([tmp_path / "nowhere"])


def test_aggregate_self_kd(tiny_cfg, tmp_path):
    ex.self_kd(tiny_cfg, out_dir=tmp_path / "a")
    rows = ex.aggregate([tmp_path / "a"])
    assert [r["method"] for r in rows] == ["self-kd/s0", "self-kd/s1"]


# -- protocol ---------------------------------------------------------------------

def test_protocol_seed_sets_disjoint():
    assert not set(EVAL_SEEDS) & set(TUNING_SEEDS)
    assert len(EVAL_SEEDS) >= 5


def test_method_config_maps_feature_kinds():
    cfg = method_config(TrainConfig(), "wd-diag", TUNED["wd-diag"], seed=2)
    assert cfg.loss.method == "wkd-f" and cfg.loss.feature_kind == "wd-diag" and cfg.seed == 2
    assert method_config(TrainConfig(), "kl-diag").loss.parts() == (None, "kl-diag")


# -- default-configuration runs (shared teacher) -------------------------------------

def test_teacher_beats_student_from_scratch(study):
    assert study.teacher_record.final_test_acc > study.run("ce", seed=0).final_test_acc


def test_wd_component_mostly_decreasing(study):
    """Default loss settings (lam 30): the epoch-mean WD term falls in >= 80% of transitions."""
    rec = study.run("wkd-l", seed=0)
    wd = [r["loss_wd"] for r in rec.epochs]
    down = sum(b <= a for a, b in zip(wd, wd[1:]))
    assert down >= 0.8 * (len(wd) - 1)


def test_teacher_ir_superclass_blocks(study):
    """Mean teacher IR within a superclass exceeds the mean across superclasses."""
    ir, _ = ex.build_ir(study.base, study.teacher, study.data)
    sup = study.base.dataset.superclass_of()
    same = sup[:, None] == sup[None, :]
    off = ~np.eye(len(sup), dtype=bool)
    assert ir.values[same & off].mean() > ir.values[~same].mean()
