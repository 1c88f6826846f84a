import numpy as np
import pytest

from fpdt.numeric import Layout, make_rng, random_tensor


@pytest.fixture
def rng():
    return make_rng(1234)


def head_sharded(rng, shape):
    return random_tensor(rng, shape, Layout.SEQ_GLOBAL_HEADS_LOCAL)


def assert_close(a, b, tol):
    a = getattr(a, "data", a)
    b = getattr(b, "data", b)
    err = float(np.max(np.abs(np.asarray(a) - np.asarray(b))))
    assert err < tol, f"max abs err {err:.3e} >= {tol:.1e}"
