import numpy as np
import pytest

from moslora.adapter import Adapter, AdapterConfig, MixerKind


@pytest.fixture
def rng():
    return np.random.default_rng(20240519)


def dense_adapter(rng, d1, d2, r, mixer=None, alpha=0.0):
    """Adapter with every factor drawn from N(0, 1), W included."""
    mixer = mixer or MixerKind.learnable()
    W = rng.standard_normal((r, r))
    if not mixer.trainable:
        from moslora.adapter import new_adapter

        W = new_adapter(AdapterConfig(d1, d2, r, mixer)).W
    return Adapter(
        AdapterConfig(d1, d2, r, mixer, alpha),
        rng.standard_normal((d1, r)),
        W,
        rng.standard_normal((r, d2)),
    )


def loop_matmul(a, b):
    """Reference product: explicit left-to-right accumulation in Python floats."""
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc = acc + float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
