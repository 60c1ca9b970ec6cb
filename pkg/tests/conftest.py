import numpy as np
import pytest

from lwdet.model import ModelSpec, build_model, init_weights


def random_weights(shapes, seed=0):
    """Random weights for a block's ``param_shapes``; BN stats kept sane."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in shapes.items():
        if name.endswith("running_var"):
            out[name] = rng.uniform(0.5, 1.5, shape).astype(np.float32)
        elif name.endswith("bn.weight"):
            out[name] = rng.uniform(0.5, 1.5, shape).astype(np.float32)
        elif name.endswith(".w") or name == "w":
            out[name] = rng.uniform(0.1, 1.0, shape).astype(np.float32)
        else:
            out[name] = (0.3 * rng.standard_normal(shape)).astype(np.float32)
    return out


def identity_bn(shapes, weights):
    for name in shapes:
        if name.endswith("bn.weight") or name.endswith("running_var"):
            weights[name] = np.ones(shapes[name], dtype=np.float32)
        elif name.endswith("bn.bias") or name.endswith("running_mean"):
            weights[name] = np.zeros(shapes[name], dtype=np.float32)
    return weights


@pytest.fixture(scope="session")
def small_model():
    return init_weights(build_model(ModelSpec(input_size=64)), seed=7)


@pytest.fixture(scope="session")
def default_model():
    return init_weights(build_model(ModelSpec()), seed=0)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
