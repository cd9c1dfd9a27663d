"""Shared fixtures: trained runs reused by the acceptance and trained-model
suites, plus a terminal summary of acceptance verdicts."""

import time
from dataclasses import dataclass

import pytest

from plcl.config import RunConfig
from plcl.training import TrainState, evaluate, generate_splits, train

VERDICTS = []


@dataclass
class Run:
    cfg: RunConfig
    state: TrainState
    report: object
    scored: object
    seconds: float


def hard_auc(run, mode="text"):
    return run.report.get(f"{mode}/hard").auc


def _train(splits, overrides=None):
    cfg = RunConfig().with_overrides(overrides or {})
    t0 = time.perf_counter()
    state = train(TrainState.fresh(cfg), splits.pairs["train"], splits.pairs["val"], splits.inventory)
    seconds = time.perf_counter() - t0
    rep, sp = evaluate(state.model, state.bank, splits.pairs["test"], cfg.train.seed, cfg.train.eval_batch_size)
    return Run(cfg, state, rep, sp, seconds)


@pytest.fixture(scope="session")
def default_splits():
    return generate_splits(RunConfig().corpus)


@pytest.fixture(scope="session")
def default_run(default_splits):
    return _train(default_splits)


@pytest.fixture(scope="session")
def no_phoneme_run(default_splits):
    return _train(default_splits, {"train.clat": False, "train.claa": False})


@pytest.fixture(scope="session")
def no_bank_run(default_splits):
    return _train(default_splits, {"train.memory_bank": False, "train.augment_ratio": 0.0})


@pytest.fixture(scope="session")
def verdict():
    """``verdict(n, ok, detail)`` records one line for the summary."""

    def record(n, ok, detail):
        VERDICTS.append((n, bool(ok), detail))
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(VERDICTS, key=lambda v: v[0]):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
