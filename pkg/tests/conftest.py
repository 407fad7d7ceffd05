import numpy as np
import pytest

from m4mil import autodiff as ad


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def assert_gradients_match(make_scalar, tensors, h=1e-5, tol=1e-6):
    """Backward gradients vs the central-difference oracle, per tensor."""
    for t in tensors:
        t.zero_grad()
    loss = make_scalar()
    loss.backward()
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        numeric = ad.finite_diff_grad(lambda _: make_scalar(), t, h=h).values
        err = ad.max_relative_error(analytic, numeric)
        assert err <= tol, f"gradient mismatch for tensor of shape {t.shape}: {err:.3e} > {tol:.0e}"
