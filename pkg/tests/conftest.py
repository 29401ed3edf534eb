import numpy as np
import pytest

from grafiti.numerics import tensor as T


def autodiff_and_numeric(fn, arrays, step=1e-5, seed=0):
    """Analytic and central-difference gradients of ``sum(fn(*tensors) * R)``.

    ``R`` is a fixed random weighting so that no output entry cancels out.
    """
    probe = fn(*[T.Tensor(a) for a in arrays])
    R = np.random.default_rng(seed).normal(size=probe.shape)

    def scalar(*arrs):
        return float((fn(*[T.Tensor(a) for a in arrs]).data * R).sum())

    with T.Tape() as tape:
        leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
        out = T.sum(T.mul(fn(*leaves), R))
        analytic = tape.gradient(out, leaves)

    numeric = []
    for i, a in enumerate(arrays):
        def f(x, i=i):
            args = list(arrays)
            args[i] = x
            return scalar(*args)

        numeric.append(T.numeric_gradient(f, a, step))
    return analytic, numeric


def assert_gradients_match(fn, arrays, rel=1e-4, step=1e-5, seed=0):
    """Per-input check; errors are relative to the largest gradient entry of
    the whole function so identically-zero blocks are not judged on roundoff."""
    analytic, numeric = autodiff_and_numeric(fn, arrays, step, seed)
    scale = max(np.abs(n).max(initial=0.0) for n in numeric)
    for i, (a, n) in enumerate(zip(analytic, numeric)):
        err = T.relative_error(a, n, floor=max(scale, 1e-8))
        assert err < rel, f"input {i}: relative gradient error {err:.2e}"
    return analytic, numeric


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
