import numpy as np
import pytest

import vaedlm.ad  # noqa: F401  (enables 64-bit mode before any array is built)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def central_diff(f, x, h=1e-5):
    """Central finite differences of scalar or array-valued ``f`` w.r.t. array ``x``."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x))
    out = np.zeros(f0.shape + x.shape)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        out[(...,) + idx] = (np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h)
    return out


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


# -- acceptance report -------------------------------------------------------

ACCEPTANCE = {}


def record(criterion: str, ok: bool, detail: str) -> None:
    """Note one acceptance check; checks sharing a criterion are and-ed together."""
    prev = ACCEPTANCE.get(criterion)
    if prev is None:
        ACCEPTANCE[criterion] = (bool(ok), [detail])
    else:
        ACCEPTANCE[criterion] = (prev[0] and bool(ok), prev[1] + [detail])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda s: (int("".join(c for c in s if c.isdigit())), s)):
        ok, details = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  ({'; '.join(details)})")
