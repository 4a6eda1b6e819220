"""Quick property suites against brute-force oracles, runnable from the CLI."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.stats import chisquare

from .assignment import CostParams, Prediction, baseline_assign, hungarian, matching_cost, second_chance_assign
from .lifecycle import LifecycleConfig, QueryKind, QueryState, sample_group
from .metrics import MotAccumulator, motar
from .oracle import bce_gradient, bce_loss
from .rng import substream
from .world import BoxBEV, Frame, GtObject


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def __post_init__(self):
        self.passed = bool(self.passed)


def brute_force_min(c: np.ndarray) -> float:
    n, m = c.shape
    if n <= m:
        return min(sum(c[i, p[i]] for i in range(n)) for p in itertools.permutations(range(m), n))
    return min(sum(c[p[j], j] for j in range(m)) for p in itertools.permutations(range(n), m))


def check_hungarian(trials: int = 200, seed: int = 0) -> CheckResult:
    rng = substream(seed, 1)
    worst = 0.0
    for _ in range(trials):
        n, m = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        # small integer costs make ties common, which is what the tie-break must survive
        c = rng.integers(0, 5, size=(n, m)).astype(float)
        worst = max(worst, abs(matching_cost(c, hungarian(c)) - brute_force_min(c)))
    return CheckResult("hungarian_vs_brute_force", worst == 0.0, f"{trials} matrices, max gap {worst}")


def _pred(x, y, cls=0, k=3):
    scores = [0.1 / (k - 1)] * k
    scores[cls] = 0.9
    return Prediction(BoxBEV(x, y, 4.0, 2.0, 0.0), tuple(scores), 0.5, evidence=1.0)


def random_assignment_instance(rng, num_classes: int = 3):
    objs = [
        GtObject(i, int(rng.integers(num_classes)), BoxBEV(*rng.uniform(-10, 10, 2), 4.0, 2.0, 0.0))
        for i in range(int(rng.integers(1, 6)))
    ]
    tqs = []
    bound = rng.permutation(len(objs) + 2)[: int(rng.integers(0, 4))]
    for j, b in enumerate(bound):
        x, y = rng.uniform(-10, 10, 2)
        gt = int(b) if b < len(objs) else None
        tqs.append(QueryState(100 + j, QueryKind.TRACK, _pred(x, y, int(rng.integers(num_classes))), gt, 1))
    pqs = [
        QueryState(j, QueryKind.PROPOSAL, _pred(*rng.uniform(-10, 10, 2), int(rng.integers(num_classes))))
        for j in range(int(rng.integers(0, 4)))
    ]
    return tqs, pqs, Frame(0, 0.0, tuple(objs))


def check_sca_dominance(trials: int = 200, seed: int = 0) -> CheckResult:
    rng = substream(seed, 2)
    cp = CostParams()
    worse = strict = 0
    for _ in range(trials):
        tqs, pqs, frame = random_assignment_instance(rng)
        b = baseline_assign(tqs, pqs, frame, cp).total_second_stage_cost
        s = second_chance_assign(tqs, pqs, frame, cp).total_second_stage_cost
        worse += s > b
        strict += s < b
    ok = worse == 0 and strict >= 1
    return CheckResult("sca_dominance", ok, f"{trials} instances, {worse} worse, {strict} strictly better")


def check_gradient(batches: int = 20, seed: int = 0, h: float = 1e-5) -> CheckResult:
    rng = substream(seed, 3)
    worst = 0.0
    for _ in range(batches):
        w, b = rng.normal(0, 1, 5), float(rng.normal())
        X, y = rng.uniform(0, 1, (16, 5)), rng.integers(0, 2, 16).astype(float)
        gw, gb = bce_gradient(w, b, X, y)
        theta = np.append(w, b)
        analytic = np.append(gw, gb)
        for i in range(theta.size):
            up, dn = theta.copy(), theta.copy()
            up[i] += h
            dn[i] -= h
            fd = (bce_loss(up[:-1], up[-1], X, y) - bce_loss(dn[:-1], dn[-1], X, y)) / (2 * h)
            worst = max(worst, abs(fd - analytic[i]) / max(1.0, abs(fd), abs(analytic[i])))
    return CheckResult("bce_gradient_vs_finite_differences", worst < 1e-5, f"max rel err {worst:.2e}")


def check_dropout_uniformity(draws: int = 20_000, seed: int = 0) -> CheckResult:
    cfg = LifecycleConfig(n_tq=3, num_aux_groups=1)
    queries = [QueryState(i, QueryKind.PROPOSAL, _pred(float(i), 0.0)) for i in range(6)]
    subsets = {s: i for i, s in enumerate(itertools.combinations(range(6), 3))}
    counts = np.zeros(len(subsets))
    for d in range(draws):
        g = sample_group(queries, 1, cfg, substream(seed, 4, d))
        counts[subsets[tuple(q.query_id for q in g.queries)]] += 1
    p = float(chisquare(counts).pvalue)
    return CheckResult("dropout_subset_uniformity", p > 1e-3, f"chi2 p={p:.4f} over {draws} draws")


def check_motar() -> CheckResult:
    got = motar(MotAccumulator(0.7, fp=10, fn=35, ids=2, gt_count=100))
    want = 1.0 - (2 + 10 + 35 - 0.3 * 100) / (0.7 * 100)
    ok = got is not None and math.isclose(got, want, rel_tol=0, abs_tol=1e-9)
    return CheckResult("motar_hand_case", ok, f"got {got}, want {want:.10f}")


SUITES: dict[str, Callable[[], CheckResult]] = {
    "hungarian": check_hungarian,
    "sca": check_sca_dominance,
    "gradient": check_gradient,
    "dropout": check_dropout_uniformity,
    "motar": check_motar,
}


def run_selftest() -> list[CheckResult]:
    return [fn() for fn in SUITES.values()]
