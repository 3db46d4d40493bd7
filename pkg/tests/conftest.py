"""Shared test helpers: tolerance-aware comparison and a finite-difference
gradient checker used across the suite."""

import numpy as np
import pytest

from rsm import tensor as T
from rsm.tensor import Tensor


@pytest.fixture(autouse=True)
def _checked_mode():
    # non-finite scan on in every test, as in verification builds
    with T.checked_mode(True):
        yield


def rel_err(actual, expected):
    """Normalized max error: ||a - e||_inf / max(||e||_inf, tiny)."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    scale = max(np.abs(expected).max(), 1e-12)
    return np.abs(actual - expected).max() / scale


def fd_gradcheck(build_loss, leaves, step=1e-5, rtol=1e-3, max_coords=24, rng=None):
    """Compare reverse-mode grads of build_loss() against central differences.

    ``build_loss`` must rebuild the graph from the leaf Tensors on every call
    (their .data are perturbed in place). Leaves must be float64. Checks up
    to max_coords random coordinates per leaf.
    """
    rng = rng or np.random.default_rng(0)
    for t in leaves:
        t.grad = None
    loss = build_loss()
    T.backward(loss)
    for t in leaves:
        assert t.dtype == np.float64, "fd_gradcheck requires float64 leaves"
        assert t.grad is not None, "leaf did not receive a gradient"
        flat = t.data.reshape(-1)
        gflat = t.grad.reshape(-1)
        k = min(max_coords, flat.size)
        coords = rng.choice(flat.size, size=k, replace=False)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + step
            lp = build_loss().item()
            flat[idx] = orig - step
            lm = build_loss().item()
            flat[idx] = orig
            fd = (lp - lm) / (2.0 * step)
            got = gflat[idx]
            denom = max(abs(fd), abs(got), 1e-4)
            assert abs(fd - got) / denom < rtol, (
                f"gradient mismatch at coord {idx}: fd={fd:.8g} got={got:.8g}"
            )


def directional_fd_check(build_loss, leaves, step=1e-6, rtol=1e-3, rng=None):
    """Directional finite difference <grad, v> vs (L(x+hv)-L(x-hv))/2h for a
    random unit direction over all leaves jointly (cheap for big models)."""
    rng = rng or np.random.default_rng(0)
    for t in leaves:
        t.grad = None
    loss = build_loss()
    T.backward(loss)
    vs = [rng.normal(size=t.shape) for t in leaves]
    norm = np.sqrt(sum((v * v).sum() for v in vs))
    vs = [v / norm for v in vs]
    analytic = sum((t.grad * v).sum() for t, v in zip(leaves, vs))
    originals = [t.data.copy() for t in leaves]
    for t, v, o in zip(leaves, vs, originals):
        t.data = o + step * v
    lp = build_loss().item()
    for t, v, o in zip(leaves, vs, originals):
        t.data = o - step * v
    lm = build_loss().item()
    for t, o in zip(leaves, originals):
        t.data = o
    fd = (lp - lm) / (2.0 * step)
    denom = max(abs(fd), abs(analytic), 1e-6)
    assert abs(fd - analytic) / denom < rtol, f"directional fd={fd:.8g} vs {analytic:.8g}"


def rand_tensor(rng, shape, requires_grad=True, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), dtype=np.float64,
                  requires_grad=requires_grad)
