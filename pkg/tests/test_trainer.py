import csv
import struct

import numpy as np
import pytest

from mtlmammo.model import BackboneConfig, MtlModel, mtl_forward
from mtlmammo.phantom import Dataset
from mtlmammo.tensor import Tensor
from mtlmammo.trainer import CheckpointError, DivergenceError, EvalReport, LOG_HEADER, REPORT_HEADER, \
    TrainConfig, checkpoint_size, evaluate, format_table, load_checkpoint, phases_for, read_reports, \
    read_state, run_strategy, save_checkpoint, sgd_step

TINY = BackboneConfig(stem_channels=4, stages=((1, 4, 1), (1, 8, 2)))


def _cfg(strategy, **kw):
    base = dict(strategy=strategy, epochs=1, batch_size=8, backbone=TINY, seed=1)
    base.update(kw)
    return TrainConfig(**base)


# ---- optimizer ---------------------------------------------------------------

def test_sgd_first_step():
    p, v = np.array([1.0]), np.array([0.0])
    sgd_step([p], [np.array([0.5])], [v], lr=0.1, momentum=0.9, weight_decay=0.0)
    assert p[0] == pytest.approx(0.95) and v[0] == 0.5


def test_sgd_second_step_uses_momentum():
    p, v = np.array([0.95]), np.array([0.5])
    sgd_step([p], [np.array([0.5])], [v], lr=0.1, momentum=0.9, weight_decay=0.0)
    assert v[0] == pytest.approx(0.95) and p[0] == pytest.approx(0.855)


def test_sgd_weight_decay_term():
    p, v = np.array([2.0]), np.array([0.0])
    sgd_step([p], [np.array([0.0])], [v], lr=0.5, momentum=0.0, weight_decay=0.1)
    assert p[0] == pytest.approx(1.9)


def test_sgd_zero_grad_no_decay_is_noop():
    p = np.array([3.0, -1.0])
    sgd_step([p], [np.zeros(2)], [np.zeros(2)], lr=1.0, momentum=0.9, weight_decay=0.0)
    np.testing.assert_array_equal(p, [3.0, -1.0])


def test_sgd_nan_guard_names_parameter():
    p = np.array([1.0])
    with pytest.raises(DivergenceError, match="stem.conv"):
        sgd_step([p], [np.array([np.nan])], [np.zeros(1)], 0.1, 0.9, 0.0, names=["stem.conv"])
    assert p[0] == 1.0


def test_sgd_misaligned_inputs():
    with pytest.raises(ValueError, match="misaligned"):
        sgd_step([np.zeros(1)], [], [np.zeros(1)], 0.1, 0.9, 0.0)


# ---- configuration -------------------------------------------------------------

@pytest.mark.parametrize("kw,msg", [
    (dict(strategy="both"), "unknown strategy"),
    (dict(lam=1.5), "lambda"),
    (dict(lr=0), "lr"),
    (dict(epochs=0), "epochs"),
    (dict(momentum=-0.1), "momentum"),
])
def test_config_validation(kw, msg):
    with pytest.raises(ValueError, match=msg):
        TrainConfig(**kw).validate()


def test_phase_plan():
    assert [p.name for p in phases_for(TrainConfig(strategy="sequential"))] == ["phase1", "phase2"]
    seq = phases_for(TrainConfig(strategy="sequential", epochs=7, sequential_phase1_epochs=3))
    assert [(p.w_cls, p.w_seg, p.epochs) for p in seq] == [(0.0, 1.0, 3), (1.0, 0.0, 7)]
    assert phases_for(TrainConfig(strategy="joint", lam=0.3))[0].heads == ("seg", "cls")
    assert phases_for(TrainConfig(strategy="cls_baseline"))[0].heads == ("cls",)


# ---- reports ---------------------------------------------------------------------

def test_report_presence_pattern():
    def rep(strategy, dice, auc):
        return EvalReport(strategy, mean_dice=dice, per_class_dice=[dice] * 5 if dice else None, auc=auc)
    table = format_table([rep("cls_baseline", None, 0.81), rep("seg_baseline", 0.35, None),
                          rep("sequential", 0.35, 0.82), rep("joint", 0.38, 0.84)])
    lines = table.splitlines()
    dice_cells = lines[2].split()[-4:]
    auc_cells = lines[3].split()[-4:]
    assert dice_cells == ["-", "35.00", "35.00", "38.00"]
    assert auc_cells == ["81.00", "-", "82.00", "84.00"]


def test_report_csv_round_trip(tmp_path):
    r = EvalReport("joint", 0.5, [0.9, 0.1, float("nan"), 0.3, 0.7], 0.875, wall_seconds=12.5)
    text = r.to_csv()
    assert text.splitlines()[0] == ",".join(REPORT_HEADER)
    (tmp_path / "r.csv").write_text(text)
    back = read_reports(tmp_path / "r.csv")[0]
    assert back.mean_dice == 0.5 and back.auc == 0.875
    assert back.per_class_dice[2] is None
    assert back.to_csv() == text


# ---- evaluation -------------------------------------------------------------------

def test_evaluate_single_class_split_warns(small_dataset):
    healthy = [s for s in small_dataset.test if s.label == 0]
    rep = evaluate(MtlModel(TINY), healthy, "joint")
    assert rep.auc is None and rep.warnings
    assert rep.mean_dice is not None


def test_evaluate_presence_by_strategy(small_dataset):
    m = MtlModel(TINY)
    assert evaluate(m, small_dataset.test, "cls_baseline").mean_dice is None
    assert evaluate(m, small_dataset.test, "seg_baseline").auc is None
    both = evaluate(m, small_dataset.test, "joint")
    assert both.auc is not None and both.mean_dice is not None


def test_evaluate_empty_split_rejected():
    with pytest.raises(ValueError, match="empty"):
        evaluate(MtlModel(TINY), [], "joint")


def test_evaluate_does_not_touch_training_flag(small_dataset):
    m = MtlModel(TINY).train()
    evaluate(m, small_dataset.test[:4], "joint")
    assert m.training


# ---- training ------------------------------------------------------------------------

def _trajectory(config, dataset):
    snaps = []

    def hook(phase, step, model):
        snaps.append(b"".join(p.data.tobytes() for p in model.params.values()))
    run_strategy(config, dataset, step_hook=hook)
    return snaps


def test_joint_lambda_one_matches_cls_baseline(small_dataset):
    a = _trajectory(_cfg("joint", lam=1.0, max_steps=6), small_dataset)
    b = _trajectory(_cfg("cls_baseline", max_steps=6), small_dataset)
    assert len(a) == 6 and a == b


def test_joint_lambda_zero_matches_seg_baseline(small_dataset):
    a = _trajectory(_cfg("joint", lam=0.0, max_steps=6), small_dataset)
    b = _trajectory(_cfg("seg_baseline", max_steps=6), small_dataset)
    assert len(a) == 6 and a == b


def test_training_is_deterministic(small_dataset):
    cfg = _cfg("joint", max_steps=4)
    assert _trajectory(cfg, small_dataset) == _trajectory(cfg, small_dataset)


def test_baselines_freeze_the_unused_head(small_dataset):
    init = MtlModel(TINY, seed=1)
    res = run_strategy(_cfg("cls_baseline", max_steps=3), small_dataset)
    for n in init.head_params("snet"):
        np.testing.assert_array_equal(res.model[n].data, init[n].data)
    res = run_strategy(_cfg("seg_baseline", max_steps=3), small_dataset)
    for n in init.head_params("cnet"):
        np.testing.assert_array_equal(res.model[n].data, init[n].data)


def test_sequential_writes_two_logs(small_dataset, tmp_path):
    cfg = _cfg("sequential", epochs=2, sequential_phase1_epochs=1)
    res = run_strategy(cfg, small_dataset, out_dir=tmp_path)
    assert [p.name for p in res.phases] == ["phase1", "phase2"]
    for name, n_rows in (("log_phase1.csv", 1), ("log_phase2.csv", 2)):
        with open(tmp_path / name) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == LOG_HEADER and len(rows) == n_rows + 1
    assert (tmp_path / "phase1.mtlc").is_file() and (tmp_path / "model.mtlc").is_file()
    assert res.report.mean_dice is not None and res.report.auc is not None
    # dice comes from the phase-1 snapshot
    snap = load_checkpoint(tmp_path / "phase1.mtlc", TINY)
    assert evaluate(snap, small_dataset.test, "seg_baseline").mean_dice == res.report.mean_dice


def test_log_columns_follow_active_heads(small_dataset, tmp_path):
    run_strategy(_cfg("cls_baseline"), small_dataset, out_dir=tmp_path)
    with open(tmp_path / "log.csv") as fh:
        row = list(csv.DictReader(fh))[0]
    assert row["l_seg"] == "" and float(row["l_cls"]) == float(row["l_total"])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(small_dataset):
    with pytest.raises(DivergenceError):
        run_strategy(_cfg("joint", lr=1e12, max_steps=20), small_dataset)


def test_run_rejects_bad_inputs(small_dataset):
    with pytest.raises(ValueError, match="test split"):
        run_strategy(_cfg("joint"), Dataset(small_dataset.train, []))
    with pytest.raises(ValueError, match="lambda"):
        run_strategy(_cfg("joint", lam=-1), small_dataset)


# ---- checkpoints --------------------------------------------------------------------

def _trained_model():
    m = MtlModel(seed=3)
    rng = np.random.default_rng(0)
    for p in m.params.values():
        p.data += rng.normal(0, 0.01, p.shape).astype(np.float32)
    for b in m.buffers.values():
        b += rng.uniform(0, 0.5, b.shape).astype(np.float32)
    return m


def test_checkpoint_round_trip_forward_bit_identical(tmp_path):
    m = _trained_model().eval()
    save_checkpoint(m, tmp_path / "m.mtlc")
    back = load_checkpoint(tmp_path / "m.mtlc")
    x = Tensor(np.random.default_rng(1).uniform(0, 1, (2, 1, 64, 64)).astype(np.float32))
    a, b = mtl_forward(m, x), mtl_forward(back, x)
    assert a[0].data.tobytes() == b[0].data.tobytes()
    assert a[1].data.tobytes() == b[1].data.tobytes()


def test_checkpoint_size_formula(tmp_path):
    m = MtlModel()
    save_checkpoint(m, tmp_path / "m.mtlc")
    size = (tmp_path / "m.mtlc").stat().st_size
    assert size == checkpoint_size(m)
    n_floats = m.num_parameters() + sum(b.size for b in m.buffers.values())
    assert size - 4 * n_floats == checkpoint_size(m) - 4 * n_floats > 0


def test_checkpoint_layout(tmp_path):
    m = MtlModel(TINY)
    save_checkpoint(m, tmp_path / "m.mtlc")
    raw = (tmp_path / "m.mtlc").read_bytes()
    assert raw[:4] == b"MTLC"
    version, count = struct.unpack("<II", raw[4:12])
    assert version == 1 and count == len(m.params) + len(m.buffers)
    (nlen,) = struct.unpack("<I", raw[12:16])
    assert raw[16:16 + nlen] == b"stem.conv"
    assert list(read_state(tmp_path / "m.mtlc")) == list(m.state())


def test_truncated_checkpoint_rejected(tmp_path):
    m = MtlModel(TINY)
    save_checkpoint(m, tmp_path / "m.mtlc")
    raw = (tmp_path / "m.mtlc").read_bytes()
    (tmp_path / "t.mtlc").write_bytes(raw[:-7])
    with pytest.raises(CheckpointError, match="truncated at offset"):
        load_checkpoint(tmp_path / "t.mtlc", TINY)
    (tmp_path / "x.mtlc").write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(tmp_path / "x.mtlc", TINY)
    (tmp_path / "b.mtlc").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "b.mtlc", TINY)


def test_checkpoint_config_mismatch(tmp_path):
    save_checkpoint(MtlModel(TINY), tmp_path / "m.mtlc")
    with pytest.raises(CheckpointError, match="do not match"):
        load_checkpoint(tmp_path / "m.mtlc")
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(tmp_path / "m.mtlc", TINY, k=3)
