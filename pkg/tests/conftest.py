import numpy as np
import pytest

from flowfilter.autodiff import ParameterStore
from flowfilter.flows import FlowTransform
from flowfilter.training import ModelConfig, build_model

SMALL = dict(flow_blocks=2, flow_layers=1, flow_units=8, cond_layers=1, cond_units=8)

# (criterion, passed, detail) lines collected by the acceptance module
ACCEPTANCE: list[tuple[str, bool, str]] = []


def perturb(store: ParameterStore, rng: np.random.Generator, scale: float = 0.3, prefix: str = "") -> None:
    """Add Gaussian noise to every slot under ``prefix`` so nets are not at their init."""
    for name, t in store.items():
        if name.startswith(prefix):
            t.data[...] = t.data + scale * rng.standard_normal(t.shape)


def random_flow(dim, n_blocks=3, hidden=(16, 16), seed=0, scale=0.1, prefix="T"):
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    flow = FlowTransform.build(store, prefix, dim, n_blocks, list(hidden), rng)
    perturb(store, rng, scale)
    return store, flow


def small_model(variant="fbf", seed=0, scale=0.1):
    cfg = ModelConfig(variant=variant, state_dim=2, obs_dim=2, **SMALL)
    rng = np.random.default_rng(seed)
    model = build_model(cfg, rng)
    norm = {n: t for n, t in model.store.items() if ".norm." in n}
    for name, t in model.store.items():
        if name not in norm:
            t.data[...] = t.data + scale * rng.standard_normal(t.shape)
    # give the frozen standardization non-trivial values so it is exercised too
    side = np.random.default_rng(seed + 1000)
    for t in norm.values():
        t.data[...] = 3.0 * scale * side.standard_normal(t.shape)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE, key=lambda r: int(r[0][1:])):
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")
