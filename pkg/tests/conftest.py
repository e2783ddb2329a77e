import sys

import numpy as np
import pytest

from toolnet.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand_tensor(rng, shape, grad=True):
    return Tensor(rng.normal(size=shape), requires_grad=grad)


def conv_oracle(x, k, b, stride, pad):
    """Quadruple-loop cross-correlation, written without any vectorisation."""
    n, c, h, w = x.shape
    oc, _, kh, kw = k.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, oc, ho, wo))
    for bi in range(n):
        for o in range(oc):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o] if b is not None else 0.0
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                r, s = i * stride + u - pad, j * stride + v - pad
                                if 0 <= r < h and 0 <= s < w:
                                    acc += x[bi, ci, r, s] * k[o, ci, u, v]
                    out[bi, o, i, j] = acc
    return out


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance.summary_lines():
        terminalreporter.write_line(line)
