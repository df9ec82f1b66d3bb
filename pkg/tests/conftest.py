import time
from pathlib import Path

import pytest

from nca_amt import amtnet, synthgen

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"

BENCH_SEEDS = range(10)
SIGN_SEEDS = range(5)
LAMBDA = 0.5
GAMMA = 0.5


class BenchmarkCache:
    """Lazily trains synthetic-benchmark runs, keyed by (seed, weights)."""

    def __init__(self):
        self.runs = {}
        self.data = {}
        self.seconds = {}

    def run(self, seed, weights=None):
        key = (seed, tuple(sorted((weights or {}).items())))
        if key not in self.runs:
            t0 = time.perf_counter()
            spec = synthgen.default_benchmark(seed)
            if seed not in self.data:
                self.data[seed] = amtnet.benchmark_datasets(spec)
            self.runs[key] = amtnet.run_benchmark(spec, weights, data=self.data[seed])
            self.seconds[key] = time.perf_counter() - t0
        return self.runs[key]

    def cost(self, seed, weights=None):
        """Wall time of one run, including data generation if it ran first for its seed."""
        self.run(seed, weights)
        return self.seconds[(seed, tuple(sorted((weights or {}).items())))]

    def baseline(self, seed):
        return self.run(seed)

    def amt(self, seed, lam=-LAMBDA):
        return self.run(seed, self.amt_weights(lam))

    @staticmethod
    def amt_weights(lam=-LAMBDA):
        return {"scene": lam, "object": GAMMA}


@pytest.fixture(scope="session")
def bench():
    return BenchmarkCache()


ACCEPTANCE = {}


def record_criterion(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
