import numpy as np
import pytest

from choreoflow.schema import find_schema


@pytest.fixture(scope="session")
def mhr():
    return find_schema("mhr260")


@pytest.fixture(scope="session")
def chain3():
    return find_schema("chain3")


@pytest.fixture(scope="session")
def minimal2():
    return find_schema("minimal2")


def random_native(schema, T, rng, scale=np.pi):
    """Random native frames with angles in (-scale, scale) and zero jaw columns."""
    f = rng.uniform(-scale, scale, (T, schema.native_pose_dim))
    f[:, :6] = rng.normal(0, 1, (T, 6))
    for j in schema.joints:
        if j.group == "jaw":
            f[:, schema.native_slices[j.name]] = 0.0
    return f


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if rep.when != "call":
                continue
            lines += [v for k, v in getattr(rep, "user_properties", []) if k == "criterion"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
