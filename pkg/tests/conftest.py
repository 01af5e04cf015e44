import numpy as np
import pytest

from dermrep import autodiff as ad


def check_grads(build, tensors, rng, h=1e-5):
    """Compare backward() with central differences for loss = sum(build() * R).

    Returns the worst relative error over ``tensors``.
    """
    out = build()
    proj = rng.normal(size=out.shape)

    def f():
        return float(np.sum(build().data * proj))

    ad.zero_grad(tensors)
    ad.backward(ad.tensor_sum(ad.mul(build(), ad.Tensor(proj))))
    worst = 0.0
    for t in tensors:
        numeric = ad.numerical_grad(f, t, h)
        worst = max(worst, ad.relative_error(t.grad, numeric))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def gradcheck():
    return check_grads


# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
