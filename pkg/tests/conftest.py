"""Small builders shared by the test modules."""

import itertools

import numpy as np
import pytest

from tbasim.assignment import Prediction
from tbasim.lifecycle import QueryKind, QueryState
from tbasim.world import BoxBEV, Frame, GtObject

K = 3  # classes in hand-built instances


def scores(cls=0, p=1.0, k=K):
    rest = (1.0 - p) / (k - 1)
    s = [rest] * k
    s[cls] = p
    return tuple(s)


def pred(x, y, cls=0, p=1.0, conf=0.5, captured=None, evidence=1.0):
    return Prediction(BoxBEV(x, y, 4.0, 2.0, 0.0), scores(cls, p), conf, evidence=evidence, captured_gt=captured)


def gt(tid, x, y, cls=0, visible=True):
    return GtObject(tid, cls, BoxBEV(x, y, 4.0, 2.0, 0.0), visible=visible)


def frame(*objs, index=0):
    return Frame(index, index / 2.0, tuple(objs))


def tq(qid, x=0.0, y=0.0, prior=None, conf=0.5, age=1, cls=0):
    return QueryState(qid, QueryKind.TRACK, pred(x, y, cls, conf=conf), prior, age, anchor=(x, y))


def pq(qid, x=0.0, y=0.0, conf=0.5, cls=0):
    return QueryState(qid, QueryKind.PROPOSAL, pred(x, y, cls, conf=conf), anchor=(x, y))


def brute_force_min(c):
    c = np.asarray(c, dtype=float)
    n, m = c.shape
    if n <= m:
        return min(sum(c[i, p[i]] for i in range(n)) for p in itertools.permutations(range(m), n))
    return min(sum(c[p[j], j] for j in range(m)) for p in itertools.permutations(range(n), m))


def all_matchings(n, m):
    """Every matching of size min(n, m) as a row-sorted pair list."""
    if n <= m:
        for p in itertools.permutations(range(m), n):
            yield [(i, p[i]) for i in range(n)]
    else:
        for p in itertools.permutations(range(n), m):
            yield sorted((p[j], j) for j in range(m))


@pytest.fixture
def builders():
    return dict(pred=pred, gt=gt, frame=frame, tq=tq, pq=pq)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
