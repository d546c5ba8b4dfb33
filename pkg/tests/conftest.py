import pytest

from stagger_lab.labrunner import RunConfig

TINY = {
    "env": {"horizon": 20, "block_length": 5, "num_actions": 4},
    "ppo": {"num_envs": 16, "total_updates": 6},
    "net": {"embed_dim": 8, "hidden": [16, 16]},
}


@pytest.fixture
def tiny_cfg() -> RunConfig:
    """A run that finishes in well under a second."""
    return RunConfig().replace(**TINY)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for the end-of-session acceptance summary, then assert."""

    def record(number, name, ok, detail):
        ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {name}: {detail}")
        print(ACCEPTANCE_LINES[-1])
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
