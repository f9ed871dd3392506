"""SGD training for the four strategies, evaluation reports and checkpoints."""

from __future__ import annotations

import csv
import io
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import functional as F
from .model import BackboneConfig, MtlModel, mtl_forward
from .objectives import bce_with_logit, compute_class_weights, dice_counts, dice_from_counts, \
    joint_loss, roc_auc, weighted_ce
from .phantom import Dataset, Sample
from .tensor import Graph, Tensor, rng_for

log = logging.getLogger(__name__)

STRATEGIES = ("cls_baseline", "seg_baseline", "sequential", "joint")
LOG_HEADER = ["epoch", "step", "l_cls", "l_seg", "l_total"]
REPORT_HEADER = ["strategy", "mean_dice"] + [f"dice_c{k}" for k in range(5)] + ["auc", "wall_seconds"]


class DivergenceError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    strategy: str = "joint"
    lam: float = 0.5
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    sequential_phase1_epochs: int = 20
    max_steps: Optional[int] = None  # per-phase cap, mainly for tests
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    num_classes: int = 5

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {', '.join(STRATEGIES)}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        for name in ("lr", "epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be non-negative")
        if self.strategy == "sequential" and self.sequential_phase1_epochs <= 0:
            raise ValueError("sequential_phase1_epochs must be positive")


@dataclass
class Phase:
    name: str
    w_cls: float
    w_seg: float
    epochs: int
    joint: bool = False

    @property
    def heads(self) -> tuple:
        return tuple(h for h, w in (("seg", self.w_seg), ("cls", self.w_cls))
                     if w > 0 or self.joint)


def phases_for(config: TrainConfig) -> list[Phase]:
    s = config.strategy
    if s == "cls_baseline":
        return [Phase("main", 1.0, 0.0, config.epochs)]
    if s == "seg_baseline":
        return [Phase("main", 0.0, 1.0, config.epochs)]
    if s == "joint":
        return [Phase("main", config.lam, 1.0 - config.lam, config.epochs, joint=True)]
    return [Phase("phase1", 0.0, 1.0, config.sequential_phase1_epochs),
            Phase("phase2", 1.0, 0.0, config.epochs)]


def reports_dice(strategy: str) -> bool:
    return strategy != "cls_baseline"


def reports_auc(strategy: str) -> bool:
    return strategy != "seg_baseline"


# ---- optimizer ---------------------------------------------------------------

def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: Sequence[np.ndarray],
             lr: float, momentum: float, weight_decay: float, names: Optional[Sequence[str]] = None) -> None:
    """In place: ``v = momentum * v + grad + weight_decay * p``; ``p -= lr * v``."""
    if not (len(params) == len(grads) == len(state)):
        raise ValueError(f"misaligned optimizer inputs: {len(params)} params, "
                         f"{len(grads)} grads, {len(state)} velocity buffers")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            who = names[i] if names else f"#{i}"
            raise DivergenceError(f"non-finite gradient in parameter {who}")
    for p, g, v in zip(params, grads, state):
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v


# ---- reports -----------------------------------------------------------------

@dataclass
class EvalReport:
    strategy: str
    mean_dice: Optional[float] = None
    per_class_dice: Optional[list] = None
    auc: Optional[float] = None
    l_cls: Optional[float] = None
    l_seg: Optional[float] = None
    l_total: Optional[float] = None
    wall_seconds: float = 0.0
    warnings: list = field(default_factory=list)

    def csv_row(self) -> list[str]:
        per = self.per_class_dice if self.per_class_dice is not None else [None] * 5
        return ([self.strategy, _fmt(self.mean_dice)] + [_fmt(d) for d in per]
                + [_fmt(self.auc), _fmt(self.wall_seconds)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        w.writerow(self.csv_row())
        return buf.getvalue()

    @classmethod
    def from_csv_row(cls, row: dict) -> "EvalReport":
        per = [_parse(row[f"dice_c{k}"]) for k in range(5)]
        mean = _parse(row["mean_dice"])
        return cls(strategy=row["strategy"], mean_dice=mean,
                   per_class_dice=per if mean is not None else None,
                   auc=_parse(row["auc"]), wall_seconds=_parse(row["wall_seconds"]) or 0.0)


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x))


def _parse(s: str) -> Optional[float]:
    return float(s) if s not in ("", None) else None


def read_reports(path) -> list[EvalReport]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [EvalReport.from_csv_row(r) for r in csv.DictReader(fh)]


def format_table(reports: Sequence[EvalReport]) -> str:
    """Strategy-by-metric table in percent, ``-`` for metrics a strategy does not train."""
    rows = [("Training strategy", [r.strategy for r in reports]),
            ("Seg perf (mean Dice)", [_pct(r.mean_dice) for r in reports]),
            ("Cls perf (AUC)", [_pct(r.auc) for r in reports])]
    width0 = max(len(r[0]) for r in rows)
    widths = [max(len(r[1][i]) for r in rows) for i in range(len(reports))]
    lines = []
    for label, cells in rows:
        lines.append("  ".join([label.ljust(width0)] + [c.rjust(w) for c, w in zip(cells, widths)]))
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)


def _pct(x) -> str:
    return "-" if x is None else f"{100 * x:.2f}"


# ---- batching / evaluation ----------------------------------------------------

def _stack(samples: Sequence[Sample]):
    images = np.stack([s.image for s in samples]).astype(np.float32)
    masks = np.stack([s.mask for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.float32)
    return images, masks, labels


def predict(model: MtlModel, samples: Sequence[Sample], heads=("seg", "cls"), batch_size: int = 32):
    """Eval-mode predictions: (argmax masks or None, cancer probabilities or None)."""
    was_training = model.training
    model.eval()
    preds, scores = [], []
    try:
        for i in range(0, len(samples), batch_size):
            images, _, _ = _stack(samples[i:i + batch_size])
            seg, cls = mtl_forward(model, Tensor(images), heads)
            if seg is not None:
                preds.append(seg.data.argmax(axis=1).astype(np.uint8))
            if cls is not None:
                scores.append(F.sigmoid(cls).data.reshape(-1))
    finally:
        model.training = was_training
    return (np.concatenate(preds) if preds else None,
            np.concatenate(scores).astype(np.float64) if scores else None)


def evaluate(model: MtlModel, samples: Sequence[Sample], strategy: str = "joint",
             dice_absent: str = "exclude") -> EvalReport:
    """Dice pooled over every test pixel, AUC over per-image scores."""
    if not samples:
        raise ValueError("evaluation split is empty")
    report = EvalReport(strategy)
    heads = tuple(h for h, on in (("seg", reports_dice(strategy)), ("cls", reports_auc(strategy))) if on)
    preds, scores = predict(model, samples, heads)
    if preds is not None:
        gt = np.stack([s.mask for s in samples])
        mean, per = dice_from_counts(dice_counts(preds, gt, model.k), dice_absent)
        report.mean_dice, report.per_class_dice = mean, per.tolist()
    if scores is not None:
        labels = np.array([s.label for s in samples])
        if labels.min() == labels.max():
            report.warnings.append("single-class evaluation split; AUC omitted")
            log.warning("single-class evaluation split; AUC omitted")
        else:
            report.auc = roc_auc(scores, labels)
    return report


# ---- training -------------------------------------------------------------------

@dataclass
class PhaseResult:
    name: str
    log_rows: list
    history: list  # per-step dicts


@dataclass
class RunResult:
    model: MtlModel
    report: EvalReport
    phases: list
    phase1_state: Optional[dict] = None


StepHook = Callable[[str, int, MtlModel], None]


def train_phase(model: MtlModel, phase: Phase, config: TrainConfig, train: Sequence[Sample],
                class_weights: np.ndarray, step_hook: Optional[StepHook] = None) -> PhaseResult:
    trainable = model.backbone_params()
    if phase.w_seg > 0:
        trainable += model.head_params("snet")
    if phase.w_cls > 0:
        trainable += model.head_params("cnet")
    trainable = [n for n in model.params if n in set(trainable)]
    velocity = [np.zeros_like(model.params[n].data) for n in trainable]
    heads = phase.heads
    stream = ("shuffle",) if phase.name in ("main", "phase1") else ("shuffle", phase.name)

    model.train()
    log_rows, history = [], []
    step = 0
    n = len(train)
    for epoch in range(phase.epochs):
        order = rng_for(config.seed, *stream, epoch).permutation(n)
        sums = {"l_cls": 0.0, "l_seg": 0.0, "l_total": 0.0}
        seen = 0
        for start in range(0, n, config.batch_size):
            if config.max_steps is not None and step >= config.max_steps:
                break
            images, masks, labels = _stack([train[i] for i in order[start:start + config.batch_size]])
            with Graph() as graph:
                seg, cls = mtl_forward(model, Tensor(images), heads)
                l_seg = weighted_ce(seg, masks, class_weights) if seg is not None else None
                l_cls = bce_with_logit(cls, labels) if cls is not None else None
                if phase.joint:
                    total = joint_loss(l_cls, l_seg, phase.w_cls).l_total
                else:
                    total = l_cls if phase.w_cls > 0 else l_seg
            if not np.isfinite(total.data).all():
                raise DivergenceError(f"non-finite loss at {phase.name} epoch {epoch} step {step}")
            graph.backward(total)
            params = [model.params[k] for k in trainable]
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            sgd_step([p.data for p in params], grads, velocity, config.lr, config.momentum,
                     config.weight_decay, trainable)
            for p in model.params.values():
                p.grad = None
            graph.reset()
            rec = {"l_cls": l_cls.item() if l_cls is not None else None,
                   "l_seg": l_seg.item() if l_seg is not None else None,
                   "l_total": total.item()}
            history.append(rec)
            for k, v in rec.items():
                if v is not None:
                    sums[k] += v
            seen += 1
            step += 1
            if step_hook is not None:
                step_hook(phase.name, step, model)
        if seen == 0:
            break
        log_rows.append({"epoch": epoch + 1, "step": step,
                         "l_cls": sums["l_cls"] / seen if "cls" in heads else None,
                         "l_seg": sums["l_seg"] / seen if "seg" in heads else None,
                         "l_total": sums["l_total"] / seen})
    return PhaseResult(phase.name, log_rows, history)


def run_strategy(config: TrainConfig, dataset: Dataset, out_dir=None,
                 step_hook: Optional[StepHook] = None) -> RunResult:
    """Train one strategy from scratch and evaluate it on the test split."""
    config.validate()
    if not dataset.train:
        raise ValueError("dataset has an empty train split")
    if not dataset.test:
        raise ValueError("dataset has an empty test split")
    t0 = time.perf_counter()
    model = MtlModel(config.backbone, config.num_classes, seed=config.seed)
    h, w = dataset.train[0].image.shape[1:]
    s = config.backbone.total_stride
    if h % s or w % s:
        raise ValueError(f"image size {h}x{w} is not divisible by the backbone stride {s}")
    weights = compute_class_weights((smp.mask for smp in dataset.train), config.num_classes)

    results, phase1_state, seg_report = [], None, None
    for phase in phases_for(config):
        results.append(train_phase(model, phase, config, dataset.train, weights, step_hook))
        if phase.name == "phase1":
            phase1_state = {k: v.copy() for k, v in model.state().items()}
            seg_report = evaluate(model, dataset.test, "seg_baseline")

    report = evaluate(model, dataset.test, config.strategy)
    if seg_report is not None:
        report.mean_dice, report.per_class_dice = seg_report.mean_dice, seg_report.per_class_dice
    last = results[-1].log_rows[-1] if results[-1].log_rows else {}
    report.l_cls, report.l_seg, report.l_total = last.get("l_cls"), last.get("l_seg"), last.get("l_total")
    if config.strategy == "sequential" and results[0].log_rows:
        report.l_seg = results[0].log_rows[-1]["l_seg"]
    report.wall_seconds = time.perf_counter() - t0

    result = RunResult(model, report, results, phase1_state)
    if out_dir is not None:
        write_run(result, out_dir)
    return result


def write_log(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([r["epoch"], r["step"], _fmt(r["l_cls"]), _fmt(r["l_seg"]), _fmt(r["l_total"])])


def write_run(result: RunResult, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"checkpoint": "model.mtlc", "report": "report.csv"}
    save_checkpoint(result.model, out / paths["checkpoint"])
    if result.phase1_state is not None:
        paths["phase1_checkpoint"] = "phase1.mtlc"
        save_state(result.phase1_state, out / paths["phase1_checkpoint"])
    if len(result.phases) == 1:
        paths["log"] = "log.csv"
        write_log(result.phases[0].log_rows, out / "log.csv")
    else:
        for ph in result.phases:
            paths[f"log_{ph.name}"] = f"log_{ph.name}.csv"
            write_log(ph.log_rows, out / f"log_{ph.name}.csv")
    (out / paths["report"]).write_text(result.report.to_csv(), encoding="utf-8")
    return paths


# ---- checkpoints ------------------------------------------------------------------

MAGIC = b"MTLC"
VERSION = 1


def save_state(state: dict, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(state)))
        for name, arr in state.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(model: MtlModel, path) -> None:
    save_state(model.state(), path)


def checkpoint_size(model: MtlModel) -> int:
    total = 12
    for name, arr in model.state().items():
        total += 4 + len(name.encode("utf-8")) + 4 + 4 * arr.ndim + 4 * arr.size
    return total


def read_state(path) -> dict:
    data = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated at offset {pos} while reading {what} "
                                  f"({n} bytes needed, {len(data) - pos} left)")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic at offset 0")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} at offset 4")
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * size, f"payload of {name}"), dtype="<f4").reshape(dims)
        state[name] = arr.astype(np.float32)
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes at offset {pos}")
    return state


def load_checkpoint(path, config: BackboneConfig = BackboneConfig(), k: int = 5) -> MtlModel:
    state = read_state(path)
    model = MtlModel(config, k)
    expected = model.state()
    if list(state) != list(expected):
        missing = sorted(set(expected) - set(state))
        extra = sorted(set(state) - set(expected))
        raise CheckpointError(f"{path}: tensor names do not match the model config "
                              f"(missing {missing[:3]}, unexpected {extra[:3]})")
    for name, arr in state.items():
        if arr.shape != expected[name].shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, config expects "
                                  f"{expected[name].shape}")
        if name in model.params:
            model.params[name].data = arr.copy()
        else:
            model.buffers[name] = arr.copy()
    return model.eval()
