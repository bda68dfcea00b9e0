"""Session fixtures: reference training runs shared by the slow tests, and the acceptance summary."""

import time
from dataclasses import replace
from pathlib import Path

import pytest

from arflow.config import load_config
from arflow.tasks import make_corpus
from arflow.training import Trainer

ROOT = Path(__file__).resolve().parent.parent
TRAIN_SEED, HELD_OUT_SEED = 0, 12345
N_TRAIN, N_HELD_OUT = 1000, 500

ACCEPTANCE = {}


def reference_config():
    return load_config(ROOT / "configs" / "default.toml")


class ReferenceRuns:
    """Trains (once per session) the reference config with a chosen prior, mechanism and seed."""

    def __init__(self):
        self.cfg = reference_config()
        self.train = make_corpus(self.cfg.task, N_TRAIN, TRAIN_SEED)
        self.held_out = make_corpus(self.cfg.task, N_HELD_OUT, HELD_OUT_SEED)
        self._runs = {}

    def get(self, prior="previous", mechanism="c2f", seed=0):
        key = (prior, mechanism, seed)
        if key not in self._runs:
            cfg = replace(self.cfg, model=replace(self.cfg.model, prior=prior, mechanism=mechanism),
                          train=replace(self.cfg.train, seed=seed))
            records = []
            t0 = time.perf_counter()
            tr = Trainer(cfg, self.train)
            tr.fit(callback=lambda _, rec: records.append(rec))
            self._runs[key] = (tr.model, records, time.perf_counter() - t0)
        return self._runs[key]


@pytest.fixture(scope="session")
def reference_runs():
    return ReferenceRuns()


def record_acceptance(n, ok, detail):
    ACCEPTANCE[n] = (ok, detail)
    print(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
