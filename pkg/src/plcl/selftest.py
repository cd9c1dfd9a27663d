"""Quick oracle checks shipped with the package (``plcl selftest``).

Each check compares an implementation with an independent brute-force
computation and yields one PASS/FAIL line. The full suites live in the
test tree; these are the subset cheap enough to run on any install.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .contrastive import ContrastiveConfig, PhonemeBatch, info_nce
from .corpus import levenshtein
from .memory_bank import MemoryBank
from .metrics import auc, eer
from .numerics import Tensor, attention, cosine_matrix, grad_check, gru_sequence, layer_norm, softmax_rows, sum_
from .numerics.nn import GRUParams


def _table_distance(a, b) -> int:
    t = [[i + j if i * j == 0 else 0 for j in range(len(b) + 1)] for i in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            t[i][j] = min(t[i - 1][j] + 1, t[i][j - 1] + 1, t[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return t[-1][-1]


def _pairwise_auc(s, y) -> float:
    pos = s[y == 1]
    neg = s[y == 0]
    return float(np.mean([[1.0 if p > n else 0.5 if p == n else 0.0 for n in neg] for p in pos]))


def _sweep_eer(s, y) -> float:
    u = np.unique(s)
    ts = np.concatenate([[u[0] - 1], (u[1:] + u[:-1]) / 2, [u[-1] + 1]])
    far = np.array([(s[y == 0] >= t).mean() for t in ts])
    frr = np.array([(s[y == 1] < t).mean() for t in ts])
    d = far - frr
    k = int(np.flatnonzero(d <= 0)[0])
    w = d[k - 1] / (d[k - 1] - d[k])
    return float(far[k - 1] + w * (far[k] - far[k - 1]))


def check_gradients(seed: int = 0):
    rng = np.random.default_rng(seed)
    h = 3
    gru = GRUParams(Tensor(rng.normal(size=(2, 3 * h))), Tensor(rng.normal(size=(h, 3 * h))), Tensor(rng.normal(size=3 * h)))
    weights = Tensor(rng.normal(size=(3, 4)))
    cases = {
        "softmax": (lambda i: sum_(softmax_rows(i[0], 0.7) * weights), [(3, 4)]),
        "layer_norm": (lambda i: sum_(layer_norm(i[0], i[1], i[2]) ** 2), [(2, 5), (5,), (5,)]),
        "cosine": (lambda i: sum_(cosine_matrix(i[0], i[1])), [(3, 4), (2, 4)]),
        "attention": (lambda i: sum_(attention(i[0], i[1], i[2]) ** 2), [(2, 3), (4, 3), (4, 3)]),
        "gru": (lambda i: sum_(gru_sequence(i[0], GRUParams(i[1], gru.U, gru.b)) ** 2), [(1, 4, 2), (2, 3 * h)]),
    }
    for name, (f, shapes) in cases.items():
        ins = [Tensor(rng.normal(size=s)) for s in shapes]
        rep = grad_check(f, ins, op_name=name)
        yield rep.passed, rep.line()


def check_closed_forms():
    eye = Tensor(np.eye(2))
    v = info_nce(PhonemeBatch(eye, eye, (0, 1), (0, 1)), ContrastiveConfig(temperature=1.0)).item()
    want = 2 * math.log(1 + math.exp(-1))
    yield abs(v - want) < 1e-9, f"info_nce orthogonal pair: {v:.9f} vs {want:.9f}"
    one = Tensor(np.array([[1.0, 2.0]]))
    v1 = info_nce(PhonemeBatch(one, one, (0,), (0,))).item()
    yield v1 == 0.0, f"info_nce single pair: {v1}"
    bank = MemoryBank.empty(1, 3, alpha=0.8)
    p0, target = np.array([1.0, -2.0, 0.5]), np.array([0.0, 1.0, 1.0])
    bank.update(0, p0)
    ok = True
    for n in range(1, 20):
        bank.update(0, target)
        ok &= abs(np.linalg.norm(bank.entries[0] - target) - 0.8**n * np.linalg.norm(p0 - target)) < 1e-9
    yield ok, "memory bank geometric convergence at alpha 0.8"


def check_metrics(n_sets: int = 20):
    rng = np.random.default_rng(1)
    worst_auc = worst_eer = 0.0
    for _ in range(n_sets):
        y = rng.integers(0, 2, 50)
        y[:2] = [0, 1]
        s = np.round(rng.normal(size=50) + y, 1)
        worst_auc = max(worst_auc, abs(auc(s, y) - _pairwise_auc(s, y)))
        worst_eer = max(worst_eer, abs(eer(s, y)[0] - _sweep_eer(s, y)))
    yield worst_auc < 1e-12, f"auc vs pairwise count: max diff {worst_auc:.1e}"
    yield worst_eer < 1e-9, f"eer vs threshold sweep: max diff {worst_eer:.1e}"


def check_levenshtein(max_len: int = 3, alphabet: int = 3):
    seqs = [s for n in range(max_len + 1) for s in itertools.product(range(alphabet), repeat=n)]
    bad = sum(levenshtein(a, b) != _table_distance(a, b) for a in seqs for b in seqs)
    yield bad == 0, f"levenshtein vs full table on {len(seqs) ** 2} pairs: {bad} mismatches"


def run(echo=print) -> bool:
    ok = True
    for check in (check_gradients, check_closed_forms, check_metrics, check_levenshtein):
        for passed, line in check():
            ok &= bool(passed)
            echo(("PASS " if passed else "FAIL ") + line.removeprefix("PASS ").removeprefix("FAIL "))
    return ok
