import numpy as np
import pytest
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from multimode_om import _kernels
from multimode_om.dynamics import Generator
from multimode_om.fock import (FockSpace, coherent_single, fock_state, ladder,
                               random_density_matrix, thermal_single)


@pytest.fixture
def backend():
    old = _kernels.get_backend()

    def use(name):
        _kernels.set_backend(name)

    yield use
    _kernels.set_backend(old)


def _driven_pair(kappa=0.3):
    """Two modes with a time-dependent exchange, a static squeezing term and loss."""
    s = FockSpace((4, 4))
    b1, b2 = ladder(s, 0), ladder(s, 1)
    g = Generator(s)
    g.hamiltonian(b1.conj().T @ b2, [0.7, -1.1], [0.2, 0.05j])
    g.hamiltonian(b1 @ b2, 0.0, 0.03)
    g.lindblad(b1, kappa)
    g.lindblad(b2.conj().T, 0.02)
    return s, g.pack()


def _dense_rhs(gen, t, rho):
    out = np.zeros_like(rho)
    eye = np.eye(gen.dim)
    c = gen.coefficients(t)
    for j in range(gen.nterms):
        L = eye if gen.left[j] < 0 else gen.ops[gen.left[j]]
        R = eye if gen.right[j] < 0 else gen.ops[gen.right[j]]
        out += c[j] * L @ rho @ R
    return out


@pytest.mark.parametrize("name", ["numpy", "numba"])
def test_rhs_matches_dense_sum(backend, name):
    backend(name)
    _, gen = _driven_pair()
    rho = random_density_matrix(16, rng=2)
    for t in (0.0, 0.37, 5.0):
        assert np.allclose(_kernels.rhs(gen, t, rho), _dense_rhs(gen, t, rho), atol=1e-15)


def test_backends_agree_on_propagation(backend):
    _, gen = _driven_pair()
    rho0 = random_density_matrix(16, rng=3)
    ts = np.linspace(0.5, 4.0, 8)
    out = {}
    for name in ("numpy", "numba"):
        backend(name)
        out[name] = _kernels.propagate(gen, rho0, 0.0, ts, 0.05)
    a, b = out["numpy"], out["numba"]
    assert np.allclose(a[0], b[0], atol=1e-13)
    assert a[2:] == b[2:]


@pytest.mark.parametrize("name", ["numpy", "numba"])
def test_propagate_against_solve_ivp(backend, name):
    backend(name)
    _, gen = _driven_pair()
    rho0 = random_density_matrix(16, rng=4)
    ts = np.array([1.0, 3.0])
    states, herm, nsteps, nrej, dt, status = _kernels.propagate(gen, rho0, 0.0, ts, 0.05)
    assert status == _kernels.STATUS_OK
    assert herm.max() < 1e-15

    def f(t, y):
        return _dense_rhs(gen, t, y.reshape(16, 16)).ravel()

    ref = solve_ivp(f, (0, 3), rho0.ravel().astype(complex), t_eval=ts, rtol=1e-12, atol=1e-13,
                    method="DOP853")
    for k in range(2):
        assert np.abs(states[k] - ref.y[:, k].reshape(16, 16)).max() < 1e-8
        assert np.trace(states[k]).real == pytest.approx(1.0, abs=1e-12)


def test_static_generator_against_expm(backend):
    backend("numba")
    s = FockSpace((5,))
    b = ladder(s, 0)
    g = Generator(s)
    g.hermitian(b.conj().T @ b, 1.3)
    g.lindblad(b, 0.4)
    gen = g.pack()
    n = 5
    # column-stacking superoperator: vec(L rho R) = (R^T kron L) vec(rho)
    S = np.zeros((n * n, n * n), complex)
    eye = np.eye(n)
    for j in range(gen.nterms):
        L = eye if gen.left[j] < 0 else gen.ops[gen.left[j]]
        R = eye if gen.right[j] < 0 else gen.ops[gen.right[j]]
        S += gen.coefficients(0.0)[j] * np.kron(R.T, L)
    rho0 = random_density_matrix(n, rng=5)
    want = (expm(2.0 * S) @ rho0.ravel(order="F")).reshape(n, n, order="F")
    out = _kernels.propagate(gen, rho0, 0.0, np.array([2.0]), 0.1)
    # the tolerance is per step, so the global error is bounded by nsteps * tol
    assert np.abs(out[0][0] - want).max() < out[2] * 1e-9


def test_step_underflow_status(backend):
    backend("numpy")
    _, gen = _driven_pair()
    rho0 = random_density_matrix(16, rng=6)
    # tolerance far below round-off cannot be met
    out = _kernels.propagate(gen, rho0, 0.0, np.array([1.0]), 0.5, tol=1e-30, dt_min=1e-3)
    assert out[5] == _kernels.STATUS_DT_UNDERFLOW


def test_unknown_backend():
    with pytest.raises(ValueError):
        _kernels.set_backend("fortran")


# --- Wigner -----------------------------------------------------------------

XS = np.linspace(-2.5, 2.5, 11)
PS = np.linspace(-2.0, 2.0, 9)


def _grid():
    X, P = np.meshgrid(XS, PS, indexing="ij")
    return X + 1j * P


@pytest.mark.parametrize("name", ["numpy", "numba"])
def test_wigner_coherent_gaussian(backend, name):
    backend(name)
    beta = 0.6 - 0.4j
    rho = coherent_single(20, beta)
    W = _kernels.wigner_grid(rho, XS, PS)
    want = 2 / np.pi * np.exp(-2 * np.abs(_grid() - beta) ** 2)
    assert np.abs(W - want).max() < 1e-10


@pytest.mark.parametrize("name", ["numpy", "numba"])
def test_wigner_fock_one_and_thermal(backend, name):
    backend(name)
    a = _grid()
    r2 = np.abs(a) ** 2
    W1 = _kernels.wigner_grid(fock_state(FockSpace((4,)), [1]), XS, PS)
    assert np.allclose(W1, 2 / np.pi * (4 * r2 - 1) * np.exp(-2 * r2), atol=1e-12)
    nbar = 0.3
    Wt = _kernels.wigner_grid(thermal_single(40, nbar), XS, PS)
    want = 2 / np.pi / (2 * nbar + 1) * np.exp(-2 * r2 / (2 * nbar + 1))
    assert np.allclose(Wt, want, atol=1e-10)


def test_wigner_cat_coherence(backend):
    # even cat: interference fringes come entirely from off-diagonal elements
    beta = 1.2
    n = 30
    ket = lambda b: expm(b * ladder(FockSpace((n + 20,)), 0).conj().T)[:n, 0] * np.exp(-abs(b) ** 2 / 2)
    psi = ket(beta) + ket(-beta)
    psi /= np.linalg.norm(psi)
    rho = np.outer(psi, psi.conj())
    a = _grid()
    N = 2 * (1 + np.exp(-2 * beta ** 2))
    want = 2 / np.pi / N * (np.exp(-2 * np.abs(a - beta) ** 2) + np.exp(-2 * np.abs(a + beta) ** 2)
                            + 2 * np.exp(-2 * np.abs(a) ** 2) * np.cos(4 * beta * a.imag))
    for name in ("numpy", "numba"):
        backend(name)
        assert np.abs(_kernels.wigner_grid(rho, XS, PS) - want).max() < 1e-9


def test_wigner_padding_grows_with_extent():
    assert _kernels.wigner_padding(10, 5.0) > _kernels.wigner_padding(10, 1.0) > 10
