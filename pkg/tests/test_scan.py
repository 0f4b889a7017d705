import numpy as np
import pytest
from hypothesis import given, strategies as st

from inklpose.errors import ArgumentError, ShapeError
from inklpose.substrate import functional as F, scan
from inklpose.substrate.gradcheck import grad_check
from inklpose.substrate.params import ParamRegistry, ssm_params
from inklpose.substrate.tensor import Tensor, precision

from oracles import scan_case, scan_loop

pytestmark = pytest.mark.usefixtures("f64")


def run_core(args):
    return scan.scan_core(*(Tensor(a) for a in args)).data


@pytest.mark.parametrize("backend", ["numba", "numpy"])
def test_scan_core_matches_loop_oracle(backend, rng):
    old = scan.backend()
    scan.set_backend(backend)
    try:
        for _ in range(25):
            L, d, n = rng.integers(1, 33), rng.integers(1, 17), rng.integers(1, 9)
            args = scan_case(rng, L, d, n)
            assert np.abs(run_core(args) - scan_loop(*args)).max() < 1e-6
    finally:
        scan.set_backend(old)


def test_selective_scan_zero_projections_is_skip_path(rng):
    reg = ParamRegistry(0, np.float64)
    reg.ssm("s", 5, 3)
    p = ssm_params(reg, "s")
    for k in ("w_dt", "b_dt", "w_B", "b_B", "w_C", "b_C"):
        p[k].data = np.zeros_like(p[k].data)
    u = rng.normal(size=(7, 5))
    assert np.allclose(scan.selective_scan(Tensor(u), p).data, u, atol=1e-15)


def test_two_step_hand_recurrence():
    u = np.array([[2.0], [3.0]])
    delta = np.ones((2, 1))
    A = np.array([[-1e-9]])
    B = np.ones((2, 1))
    C = np.ones((2, 1))
    y = run_core((u, delta, A, B, C, np.zeros(1)))
    assert y[0, 0] == pytest.approx(2.0)
    assert y[1, 0] == pytest.approx(5.0, abs=1e-8)


@given(seed=st.integers(0, 2**31 - 1), L=st.integers(2, 20), d=st.integers(1, 6), n=st.integers(1, 4))
def test_scan_is_causal(seed, L, d, n):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        args = list(scan_case(rng, L, d, n))
        base = run_core(args)
        t = int(rng.integers(L))
        u2 = args[0].copy()
        u2[t] += rng.normal(size=d) + 1.0
        moved = run_core([u2] + args[1:])
    assert np.array_equal(base[:t], moved[:t])
    assert not np.array_equal(base[t:], moved[t:])


def test_batched_equals_per_sample(rng):
    cases = [scan_case(rng, 9, 4, 3) for _ in range(3)]
    A, D = cases[0][2], cases[0][5]
    stack = [np.stack([c[i] for c in cases]) for i in (0, 1, 3, 4)]
    out = scan.scan_core(Tensor(stack[0]), Tensor(stack[1]), Tensor(A), Tensor(stack[2]), Tensor(stack[3]),
                         Tensor(D)).data
    for b, c in enumerate(cases):
        single = run_core((c[0], c[1], A, c[3], c[4], D))
        assert np.allclose(out[b], single, atol=1e-13)


@pytest.mark.parametrize("backend", ["numba", "numpy"])
def test_scan_core_gradcheck(backend, rng):
    old = scan.backend()
    scan.set_backend(backend)
    try:
        ts = [Tensor(a, requires_grad=True) for a in scan_case(rng, 6, 3, 2)]
        w = rng.normal(size=(6, 3))
        rep = grad_check(lambda: F.sum(scan.scan_core(*ts) * w), ts, h=1e-6, tol=1e-5)
        assert rep.passed, rep.errors
    finally:
        scan.set_backend(old)


def test_scan_shape_errors():
    with pytest.raises(ArgumentError):
        run_core(scan_case(np.random.default_rng(0), 0, 2, 2))
    u, dl, A, B, C, D = scan_case(np.random.default_rng(0), 4, 2, 2)
    with pytest.raises(ShapeError):
        run_core((u, dl, A, B[:, :1], C, D))
