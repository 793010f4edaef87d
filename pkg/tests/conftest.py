import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from opendx.kbmodel import KbConfig, generate_synthetic_kb

settings.register_profile(
    "default", max_examples=60, deadline=None,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


SMALL_KB = dict(n_diseases=40, n_findings=300, n_very_common=10, n_systems=8,
                system_size=30, n_exclusion_groups=5)


@pytest.fixture(scope="session")
def small_kb():
    return generate_synthetic_kb(KbConfig(seed=11, **SMALL_KB))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if getattr(rep, "when", "call") != "call" and outcome != "error":
                continue
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" in props:
                lines.append((props["criterion"], "PASS" if outcome == "passed" else "FAIL",
                              props.get("detail", "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, status, detail in sorted(lines):
            terminalreporter.write_line(f"{status}  {name}  {detail}".rstrip())
