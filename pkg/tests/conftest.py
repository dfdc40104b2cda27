import numpy as np
import pytest

from kronblock import KronShape, random_factor


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_shape(rng, max_dim=64, max_r=4, full_rank=False):
    """Random factorization pattern with m, n <= max_dim."""

    def split(dim):
        divs = [d for d in range(1, dim + 1) if dim % d == 0]
        d1 = int(rng.choice(divs))
        return d1, dim // d1

    m = int(rng.integers(1, max_dim + 1))
    n = int(rng.integers(1, max_dim + 1))
    m1, m2 = split(m)
    n1, n2 = split(n)
    ceiling = min(m1 * n1, m2 * n2)
    r = ceiling if full_rank else int(rng.integers(1, min(max_r, ceiling) + 1))
    return KronShape(m1, n1, m2, n2, r)


def random_dense_factor(shape, rng):
    """Factor with a non-trivial (non-ones) mask for algebra tests."""
    f = random_factor(shape, rng)
    f.s[:] = rng.standard_normal(f.s.shape)
    return f


def rel_err(analytic, numeric, abs_floor=1e-8, rel_tol=1e-6):
    """Worst normalized deviation under the gradient tolerance rule: a
    component passes at rel_tol when |a - n| <= rel_tol * max(|a|, |n|) or
    |a - n| <= abs_floor (the near-zero absolute rule; also the finite
    difference oracle's roundoff floor). Compare the result against rel_tol."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric)
    out = err / np.maximum(denom, abs_floor / rel_tol)
    return float(np.max(out)) if out.size else 0.0


def finite_diff(loss_fn, arr, h=1e-5):
    """Central finite differences of a scalar function w.r.t. every entry."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + h
        up = loss_fn()
        arr[idx] = orig - h
        down = loss_fn()
        arr[idx] = orig
        grad[idx] = (up - down) / (2.0 * h)
    return grad
