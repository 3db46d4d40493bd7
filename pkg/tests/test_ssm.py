"""Selective scan: discretization against a series oracle, sequential form
against a straight-line recurrence, parallel/sequential equivalence,
stability, causality, and gradients."""

import numpy as np
import pytest

from conftest import directional_fd_check, fd_gradcheck, rel_err
from rsm import tensor as T
from rsm.errors import ShapeError
from rsm.ssm import (
    SsmParams,
    linear_recurrence,
    selective_scan_parallel,
    selective_scan_sequential,
    zoh_discretize,
)
from rsm.tensor import Tensor


# ---------------------------------------------------------------------------
# independent oracles


def series_exp(x):
    """e^x by Taylor series at 64-bit; negative x via 1/e^|x| to avoid
    alternating-sum cancellation."""
    t = abs(x)
    term = 1.0
    total = 1.0
    k = 1
    while True:
        term *= t / k
        total += term
        if term < 1e-20 * total:
            break
        k += 1
    return 1.0 / total if x < 0 else total


def series_expm1x(x):
    """(e^x - 1)/x = sum_k x^k/(k+1)! at 64-bit."""
    term = 1.0
    total = 1.0
    k = 1
    while True:
        term *= x / (k + 1)
        total += term
        if abs(term) < 1e-20 * abs(total):
            break
        k += 1
    return total


def oracle_zoh(a, delta, b):
    x = a * delta
    return series_exp(x), delta * b * series_expm1x(x)


def oracle_scan(u, params):
    """Straight-line float64 recurrence, independent of the tensor engine."""
    bsz, c, length = u.shape
    n = params.state_dim
    a = -np.exp(params.a_log.data.astype(np.float64))
    dw = params.delta_w.data.astype(np.float64)
    db = params.delta_b.data.astype(np.float64)
    bw = params.b_w.data.astype(np.float64)
    cw = params.c_w.data.astype(np.float64)
    skip = params.d.data.astype(np.float64)
    y = np.zeros((bsz, c, length))
    for bi in range(bsz):
        h = np.zeros((c, n))
        for k in range(length):
            x = u[bi, :, k].astype(np.float64)
            dt = np.logaddexp(0.0, x @ dw + db)
            bk = x @ bw
            ck = x @ cw
            for ci in range(c):
                for ni in range(n):
                    if params.exact_discretization:
                        phi, gam = zoh_discretize(a[ci, ni], dt[ci], bk[ni])
                    else:
                        phi = np.exp(a[ci, ni] * dt[ci])
                        gam = dt[ci] * bk[ni]
                    h[ci, ni] = phi * h[ci, ni] + gam * x[ci]
            y[bi, :, k] = h @ ck + skip * x
    return y


# ---------------------------------------------------------------------------
# discretization


class TestZohDiscretize:
    def test_reference_point(self):
        phi, gamma = zoh_discretize(-1.0, 0.1, 1.0)
        ophi, ogamma = oracle_zoh(-1.0, 0.1, 1.0)
        assert abs(phi - 0.9048374180359595) < 1e-12
        assert abs(gamma - 0.09516258196404042) < 1e-12
        assert abs(phi - ophi) < 1e-14 and abs(gamma - ogamma) < 1e-14

    def test_limit_a_to_zero(self):
        phi, gamma = zoh_discretize(-1e-12, 0.1, 2.0)
        assert abs(phi - 1.0) < 1e-12
        assert abs(gamma - 0.2) < 1e-12

    def test_nonpositive_delta_rejected(self):
        with pytest.raises(ValueError):
            zoh_discretize(-1.0, 0.0, 1.0)
        with pytest.raises(ValueError):
            zoh_discretize(-1.0, -0.5, 1.0)

    def test_random_against_series_oracle(self):
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(200):
            a = -np.exp(rng.uniform(np.log(1e-8), np.log(5.0)))
            delta = np.exp(rng.uniform(np.log(1e-4), 0.0))
            b = rng.normal()
            phi, gamma = zoh_discretize(a, delta, b)
            ophi, ogamma = oracle_zoh(a, delta, b)
            worst = max(worst, abs(phi - ophi) / max(abs(ophi), 1e-12),
                        abs(gamma - ogamma) / max(abs(ogamma), 1e-12))
        assert worst < 1e-10

    def test_phi_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            a = -np.exp(rng.uniform(-3, 2))
            delta = np.exp(rng.uniform(np.log(1e-3), 0.0))
            phi, _ = zoh_discretize(a, delta, 1.0)
            assert 0.0 < phi < 1.0


# ---------------------------------------------------------------------------
# linear recurrence primitive


class TestLinearRecurrence:
    def test_prefix_count(self):
        # phi = 1, gx = 1 -> hidden state equals the step index (1-based)
        phi = Tensor(np.ones((1, 7, 2)))
        gx = Tensor(np.ones((1, 7, 2)))
        for seq in (True, False):
            h = linear_recurrence(phi, gx, sequential=seq)
            np.testing.assert_allclose(h.data[0, :, 0], np.arange(1, 8), rtol=1e-6)

    def test_forms_identical_on_random(self):
        rng = np.random.default_rng(2)
        for length in (1, 2, 3, 17, 64, 257):
            phi = Tensor(rng.uniform(0.1, 0.99, size=(2, length, 3)))
            gx = Tensor(rng.normal(size=(2, length, 3)))
            hs = linear_recurrence(phi, gx, sequential=True)
            hp = linear_recurrence(phi, gx, sequential=False)
            assert rel_err(hp.data, hs.data) < 1e-6

    def test_gradients(self):
        rng = np.random.default_rng(3)
        for seq in (True, False):
            phi = Tensor(rng.uniform(0.2, 0.9, size=(1, 5, 2)), dtype=np.float64,
                         requires_grad=True)
            gx = Tensor(rng.normal(size=(1, 5, 2)), dtype=np.float64,
                        requires_grad=True)
            w = Tensor(np.cos(np.arange(10.0)).reshape(1, 5, 2), dtype=np.float64)

            def build():
                return T.sum_reduce(T.mul(linear_recurrence(phi, gx, sequential=seq), w))

            fd_gradcheck(build, [phi, gx], rng=rng)


# ---------------------------------------------------------------------------
# selective scan


class TestSelectiveScan:
    def test_zero_input_zero_output(self):
        rng = np.random.default_rng(4)
        p = SsmParams(3, 4, rng, np.float32)
        u = Tensor(np.zeros((2, 3, 9), dtype=np.float32))
        for scan in (selective_scan_sequential, selective_scan_parallel):
            np.testing.assert_array_equal(scan(u, p).data, 0.0)

    def test_single_step_unrolling(self):
        rng = np.random.default_rng(5)
        p = SsmParams(2, 3, rng, np.float64)
        u = Tensor(rng.normal(size=(1, 2, 1)), dtype=np.float64)
        y = selective_scan_sequential(u, p)
        x = u.data[0, :, 0]
        dt = np.logaddexp(0, x @ p.delta_w.data + p.delta_b.data)
        bk = x @ p.b_w.data
        ck = x @ p.c_w.data
        a = -np.exp(p.a_log.data)
        expect = np.zeros(2)
        for c in range(2):
            gam = np.array([zoh_discretize(a[c, n], dt[c], bk[n])[1] for n in range(3)])
            expect[c] = (gam * x[c]) @ ck + p.d.data[c] * x[c]
        np.testing.assert_allclose(y.data[0, :, 0], expect, rtol=1e-12)

    @pytest.mark.parametrize("exact", [True, False])
    def test_sequential_matches_bruteforce_oracle(self, exact):
        rng = np.random.default_rng(6)
        p = SsmParams(4, 8, rng, np.float64, exact_discretization=exact)
        u = rng.normal(size=(2, 4, 64))
        y = selective_scan_sequential(Tensor(u, dtype=np.float64), p)
        assert rel_err(y.data, oracle_scan(u, p)) < 1e-5

    def test_parallel_equals_sequential_float32(self):
        rng = np.random.default_rng(7)
        for _ in range(12):
            c = int(rng.integers(1, 5))
            n = int(rng.integers(1, 9))
            length = int(rng.integers(1, 258))
            bsz = int(rng.integers(1, 3))
            p = SsmParams(c, n, rng, np.float32)
            u = Tensor(rng.normal(size=(bsz, c, length)).astype(np.float32))
            ys = selective_scan_sequential(u, p)
            yp = selective_scan_parallel(u, p)
            assert rel_err(yp.data, ys.data) < 1e-5

    def test_stability_bound_constant_input(self):
        # with A < 0, ||h||_inf stays under ||Gamma u||_inf / (1 - max Phi)
        rng = np.random.default_rng(8)
        c, n, length = 2, 4, 200
        p = SsmParams(c, n, rng, np.float64)
        u = np.ones((1, c, length))
        x = u[0, :, 0]
        dt = np.logaddexp(0, x @ p.delta_w.data + p.delta_b.data)
        bk = x @ p.b_w.data
        a = -np.exp(p.a_log.data)
        phis = np.zeros((c, n))
        gams = np.zeros((c, n))
        for ci in range(c):
            for ni in range(n):
                phis[ci, ni], gams[ci, ni] = zoh_discretize(a[ci, ni], dt[ci], bk[ni])
        bound = np.abs(gams * x[:, None]).max() / (1.0 - phis.max())
        h = np.zeros((c, n))
        for _ in range(length):
            h = phis * h + gams * x[:, None]
            assert np.abs(h).max() <= bound + 1e-9

    def test_causality_bit_identical_prefix(self):
        rng = np.random.default_rng(9)
        p = SsmParams(3, 4, rng, np.float32)
        u = rng.normal(size=(1, 3, 40)).astype(np.float32)
        k = 25
        u2 = u.copy()
        u2[:, :, k:] += 1.0
        for scan in (selective_scan_sequential, selective_scan_parallel):
            ya = scan(Tensor(u), p).data
            yb = scan(Tensor(u2), p).data
            np.testing.assert_array_equal(ya[:, :, :k], yb[:, :, :k])
            assert not np.array_equal(ya[:, :, k:], yb[:, :, k:])

    @pytest.mark.parametrize("scan", [selective_scan_sequential, selective_scan_parallel])
    def test_gradients_match_finite_differences(self, scan):
        rng = np.random.default_rng(10)
        p = SsmParams(3, 4, rng, np.float64)
        u = Tensor(rng.normal(size=(2, 3, 7)), dtype=np.float64, requires_grad=True)
        leaves = [u, p.a_log, p.delta_w, p.delta_b, p.b_w, p.c_w, p.d]
        w = Tensor(np.cos(np.arange(42.0)).reshape(2, 3, 7), dtype=np.float64)

        def build():
            return T.sum_reduce(T.mul(scan(u, p), w))

        fd_gradcheck(build, leaves, rng=rng, max_coords=8)
        directional_fd_check(build, leaves, rng=rng)

    def test_empty_sequence_rejected(self):
        rng = np.random.default_rng(12)
        p = SsmParams(2, 2, rng)
        with pytest.raises(ShapeError):
            selective_scan_sequential(Tensor(np.zeros((1, 2, 0))), p)

    def test_channel_mismatch_rejected(self):
        rng = np.random.default_rng(13)
        p = SsmParams(2, 2, rng)
        with pytest.raises(ShapeError):
            selective_scan_sequential(Tensor(np.zeros((1, 3, 4))), p)
