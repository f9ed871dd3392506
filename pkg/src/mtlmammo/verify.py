"""Self-check suites behind ``mtlmammo verify``.

``gradcheck`` compares float64 analytic gradients against central finite
differences; ``oracles`` compares the fast implementations against brute-force
references. Neither suite builds a model.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import functional as F
from .objectives import bce_with_logit, joint_loss, mean_dice, roc_auc, weighted_ce
from .tensor import Graph, Tensor, precision

FD_STEP = 1e-5
GRAD_TOL = 1e-6


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}" + (f"  ({self.detail})" if self.detail else "")


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitudes."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numeric_grad(fn: Callable[[], Tensor], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. the array ``x`` (mutated and restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn().item()
        flat[i] = old - h
        down = fn().item()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def check_gradients(fn: Callable[..., Tensor], arrays: list, h: float = FD_STEP) -> float:
    """Max relative error over every input of ``fn(*tensors)``; arrays must be float64."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Graph() as graph:
        out = fn(*tensors)
    graph.backward(out)
    worst = 0.0
    for t in tensors:
        num = numeric_grad(lambda: fn(*[Tensor(s.data) for s in tensors]), t.data, h)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(ana, num))
    return worst


def _projected(op):
    """Scalar loss sum(op(...) * R) with a fixed random projection R."""
    cache = {}

    def fn(*ts):
        out = op(*ts)
        if out.shape not in cache:
            cache[out.shape] = Tensor(np.random.default_rng(99).normal(size=out.shape))
        return F.sum(F.mul(out, cache[out.shape]))

    return fn


def _away_from_zero(a: np.ndarray, margin: float = 0.05) -> np.ndarray:
    return np.where(a >= 0, a + margin, a - margin)


def gradcheck_cases(seeds: int = 10) -> Iterator[tuple[str, Callable, list]]:
    """(name, scalar function, float64 input arrays) for every differentiable op."""
    for seed in range(seeds):
        rng = np.random.default_rng(1000 + seed)
        nrm = rng.normal
        k = 1 if seed % 2 else 3
        stride = 1 + seed % 2 if k == 3 else 1 + (seed // 2) % 2
        pad = (seed // 2) % 2 if k == 3 else 0
        yield (f"conv2d k={k} s={stride} p={pad} seed={seed}",
               _projected(lambda x, w, b, s=stride, p=pad: F.conv2d(x, w, b, s, p)),
               [nrm(size=(2, 2, 5, 5)), nrm(size=(3, 2, k, k)), nrm(size=3)])
        yield (f"batch_norm train seed={seed}",
               _projected(lambda x, g, b: F.batch_norm(x, g, b, training=True)),
               [nrm(size=(3, 2, 3, 3)) * 2 + 1, nrm(size=2), nrm(size=2)])
        yield (f"relu seed={seed}", _projected(F.relu), [_away_from_zero(nrm(size=(2, 3, 4)))])
        yield (f"upsample_bilinear seed={seed}",
               _projected(lambda x, oh=4 + seed % 3, ow=5 + seed % 2: F.upsample_bilinear(x, oh, ow)),
               [nrm(size=(2, 2, 3, 3))])
        yield (f"linear seed={seed}", _projected(F.linear),
               [nrm(size=(3, 4)), nrm(size=(4, 2)), nrm(size=2)])
        yield (f"global_avg_pool seed={seed}", _projected(F.global_avg_pool), [nrm(size=(2, 3, 3, 4))])
        target = rng.integers(0, 5, size=(2, 3, 3))
        cw = rng.uniform(0.2, 2.0, size=5)
        yield (f"weighted_ce seed={seed}", lambda z, t=target, w=cw: weighted_ce(z, t, w),
               [nrm(size=(2, 5, 3, 3)) * 2])
        labels = rng.integers(0, 2, size=4)
        yield (f"bce_with_logit seed={seed}", lambda z, y=labels: bce_with_logit(z, y),
               [nrm(size=(4, 1)) * 3])
        lam = float(rng.uniform(0.05, 0.95))

        def joint(z, w, b, t=target, cwt=cw, y=labels[:2], lam=lam):
            l_seg = weighted_ce(z, t, cwt)
            l_cls = bce_with_logit(F.linear(F.global_avg_pool(z), w, b), y)
            return joint_loss(l_cls, l_seg, lam).l_total

        yield (f"joint_loss lam={lam:.3f} seed={seed}", joint,
               [nrm(size=(2, 5, 3, 3)), nrm(size=(5, 1)), nrm(size=1)])
        yield (f"sigmoid seed={seed}", _projected(F.sigmoid), [nrm(size=(3, 4)) * 2])
        yield (f"log_softmax seed={seed}", _projected(lambda x: F.log_softmax(x, 1)), [nrm(size=(2, 4, 3))])
        yield (f"mul/add/mean seed={seed}", lambda a, b: F.mean(F.add(F.mul(a, b), F.scale(a, 0.5))),
               [nrm(size=(3, 3)), nrm(size=(3, 3))])


def run_gradcheck(seeds: int = 10, tol: float = GRAD_TOL) -> list[CheckResult]:
    results = []
    with precision(np.float64):
        for name, fn, arrays in gradcheck_cases(seeds):
            err = check_gradients(fn, arrays)
            results.append(CheckResult(f"gradcheck {name}", err < tol, f"rel err {err:.2e}"))
    return results


# ---- brute-force oracles ------------------------------------------------------------

def conv2d_loops(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for i in range(n):
        for o in range(f):
            for y in range(ho):
                for xx in range(wo):
                    acc = b[o]
                    for ch in range(c):
                        for dy in range(kh):
                            for dx in range(kw):
                                sy, sx = y * stride + dy - padding, xx * stride + dx - padding
                                if 0 <= sy < h and 0 <= sx < wd:
                                    acc += x[i, ch, sy, sx] * w[o, ch, dy, dx]
                    out[i, o, y, xx] = acc
    return out


def auc_pairwise(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def dice_sets(pred, gt, k):
    pred, gt = np.asarray(pred).ravel(), np.asarray(gt).ravel()
    scores = []
    for c in range(k):
        p = {i for i, v in enumerate(pred) if v == c}
        g = {i for i, v in enumerate(gt) if v == c}
        if p or g:
            scores.append(2 * len(p & g) / (len(p) + len(g)))
    return sum(scores) / len(scores)


def run_oracles(conv_cases: int = 50, auc_cases: int = 1000, dice_cases: int = 1000) -> list[CheckResult]:
    results = []
    rng = np.random.default_rng(7)
    worst = 0.0
    with precision(np.float64):
        for _ in range(conv_cases):
            k = int(rng.choice([1, 3]))
            stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
            n, c, f = (int(v) for v in rng.integers(1, 4, size=3))
            h, w = (int(v) for v in rng.integers(k, 8, size=2))
            x, wt, b = rng.normal(size=(n, c, h, w)), rng.normal(size=(f, c, k, k)), rng.normal(size=f)
            got = F.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride, pad).data
            worst = max(worst, float(np.abs(got - conv2d_loops(x, wt, b, stride, pad)).max()))
    results.append(CheckResult(f"conv2d == six-loop oracle ({conv_cases} cases)", worst <= 1e-5,
                               f"max abs diff {worst:.1e}"))

    mismatches = 0
    for _ in range(auc_cases):
        n = int(rng.integers(2, 501))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = (0, 1)
        scores = rng.integers(0, max(2, n // 4), size=n) / 7.0  # coarse grid forces ties
        if roc_auc(scores, labels) != auc_pairwise(scores, labels):
            mismatches += 1
    results.append(CheckResult(f"roc_auc == pairwise oracle ({auc_cases} cases, exact)", mismatches == 0,
                               f"{mismatches} mismatches"))

    mismatches = 0
    for _ in range(dice_cases):
        shape = tuple(int(v) for v in rng.integers(1, 9, size=2))
        pred, gt = rng.integers(0, 5, size=shape), rng.integers(0, 5, size=shape)
        if rng.random() < 0.3:
            gt = pred.copy()
        if mean_dice(pred, gt, 5)[0] != dice_sets(pred, gt, 5):
            mismatches += 1
    results.append(CheckResult(f"mean_dice == set-counting oracle ({dice_cases} cases, exact)",
                               mismatches == 0, f"{mismatches} mismatches"))

    ce = weighted_ce(Tensor(np.zeros((1, 5, 4, 4))), np.zeros((1, 4, 4), int), np.ones(5)).item()
    results.append(CheckResult("weighted_ce uniform logits == ln 5", abs(ce - math.log(5)) <= 1e-6,
                               f"{ce:.8f}"))
    bce = bce_with_logit(Tensor(np.zeros((1, 1))), [1]).item()
    results.append(CheckResult("bce at logit 0 == ln 2", abs(bce - math.log(2)) <= 1e-6, f"{bce:.8f}"))
    mid = joint_loss(2.0, 4.0, 0.5).l_total
    results.append(CheckResult("joint_loss(2, 4, 0.5) == 3", mid == 3.0, repr(mid)))
    ends = (joint_loss(1.7, 3.1, 1.0).l_total == 1.7, joint_loss(1.7, 3.1, 0.0).l_total == 3.1)
    results.append(CheckResult("joint_loss endpoints lambda in {0, 1} exact", all(ends)))
    return results


SUITES = {"gradcheck": run_gradcheck, "oracles": run_oracles}


def run_suite(name: str) -> list[CheckResult]:
    names = list(SUITES) if name == "all" else [name]
    results = []
    for n in names:
        t0 = time.perf_counter()
        results += SUITES[n]()
        results.append(CheckResult(f"{n} suite runtime", True, f"{time.perf_counter() - t0:.1f}s"))
    return results
