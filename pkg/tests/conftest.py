import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def fd_grad(f, x, eps=1e-5):
    """Central differences of scalar f() w.r.t. array x (perturbed in place)."""
    out = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        old = x[idx]
        x[idx] = old + eps
        up = f()
        x[idx] = old - eps
        down = f()
        x[idx] = old
        out[idx] = (up - down) / (2 * eps)
    return out


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def block_ones(*sizes):
    n = sum(sizes)
    m = np.zeros((n, n))
    lo = 0
    for k in sizes:
        m[lo : lo + k, lo : lo + k] = 1.0
        lo += k
    return m


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE_RAN: set[str] = set()


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid and report.when == "setup":
        _ACCEPTANCE_RAN.add(report.nodeid.rsplit("::", 1)[-1])


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not _ACCEPTANCE_RAN:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.NAMES):
        ran = any(name.startswith(f"test_{k:02d}_") for name in _ACCEPTANCE_RAN)
        status = "FAIL  raised before reporting" if ran else "not run"
        terminalreporter.write_line(mod.RESULTS.get(k, f"criterion {k:>2} {mod.NAMES[k]:<24} {status}"))
