import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

GOLDEN_CONFIG = Path(__file__).parents[1] / "configs" / "golden.json"

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@dataclass
class GoldenRun:
    out: Path
    seconds: dict = field(default_factory=dict)


def run_golden(out: Path) -> GoldenRun:
    """The shipped golden scenario: both methods, their attacks and a pretrained eval."""
    from mrplab.cli import main

    run = GoldenRun(out)
    steps = [("gen", "mrp"), ("pretrain", "mrp"), ("unlearn", "mrp"), ("attack", "mrp"),
             ("unlearn", "ga"), ("attack", "ga"), ("eval", "mrp")]
    for cmd, method in steps:
        t = time.perf_counter()
        status = main(["-q", cmd, "--config", str(GOLDEN_CONFIG), "--out", str(out), "--method", method])
        run.seconds[f"{cmd}-{method}"] = time.perf_counter() - t
        assert status == 0, f"mrplab {cmd} --method {method} failed"
    return run


@pytest.fixture(scope="session")
def golden(tmp_path_factory):
    return run_golden(tmp_path_factory.mktemp("golden"))


@pytest.fixture(scope="session")
def golden_repeat(tmp_path_factory, golden):
    return run_golden(tmp_path_factory.mktemp("golden-repeat"))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
