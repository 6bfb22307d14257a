"""Closed-form reference values for Maxwell-molecule mixtures.

Everything here is computed without the package's velocity grid or collision
stencils.  For velocity-independent kernels (gamma = 0, constant angular
profile) the linearized operator maps the span of the per-species current
carriers ``v_1 mu_i e_i`` into itself, so the constrained inversion behind
the diffusion matrix collapses to an N x N linear system that can be solved
exactly.  Tests compare the discrete pipeline against these references and
pin the observed agreement.
"""

import numpy as np

#: Amplitude of the constant angular profile that makes the angular measure
#: a probability measure on the unit circle.
UNIT_CIRCLE_B0 = 1.0 / (2.0 * np.pi)


def maxwell_flux_matrix(masses, n, constants, b0=UNIT_CIRCLE_B0):
    """Exact diffusion matrix ``abar`` for velocity-independent kernels.

    Restricted to the current carriers, the linearized operator acts as

        L(sum_j c_j v_1 mu_j e_j)_k = v_1 mu_k (T c)_k,
        T_kj = K_kj n_k m_k / (m_k + m_j)
               - delta_kj sum_l K_kl n_l m_l / (m_k + m_l),

    with ``K = 2 pi b0 C``.  ``T`` is self-adjoint under the Gram matrix
    ``D = diag(1 / (n_i m_i))`` and annihilates ``n * m``.  With ``h_i`` the
    coordinate vectors projected against ``n * m``, the diffusion matrix is
    ``abar_ij = x_i^T D h_j`` where ``T x_i = h_i`` and ``x_i`` is
    D-orthogonal to ``n * m``.

    Parameters
    ----------
    masses, n : array_like, shape (N,)
        Species masses and background concentrations.
    constants : array_like, shape (N, N)
        Symmetric kinetic constants of the pair kernels.
    b0 : float
        Amplitude of the constant angular profile.

    Returns
    -------
    ndarray, shape (N, N)
        Symmetric matrix with kernel along ``n * masses`` and all other
        eigenvalues strictly negative.
    """
    masses = np.asarray(masses, dtype=float)
    n = np.asarray(n, dtype=float)
    constants = np.asarray(constants, dtype=float)
    nsp = masses.size
    kmat = 2.0 * np.pi * b0 * constants
    msum = masses[:, None] + masses[None, :]
    friction = kmat * (n * masses)[None, :] / msum
    tmat = kmat * (n * masses)[:, None] / msum - np.diag(friction.sum(axis=1))

    direction = n * masses
    rho = float(direction.sum())
    h = np.eye(nsp) - direction[None, :] / rho

    bordered = np.zeros((nsp + 1, nsp + 1))
    bordered[:nsp, :nsp] = tmat
    bordered[:nsp, nsp] = direction
    bordered[nsp, :nsp] = 1.0
    x = np.empty((nsp, nsp))
    for i in range(nsp):
        rhs = np.zeros(nsp + 1)
        rhs[:nsp] = h[i]
        x[i] = np.linalg.solve(bordered, rhs)[:nsp]
    return (x / (n * masses)[None, :]) @ h.T


def modal_rate(a_matrix, wavenumber=1):
    """Slowest nonzero decay rate of one Fourier mode of ``d_t n = A d_x^2 n``.

    ``A`` is the full (generally nonsymmetric) evolution matrix; its nonzero
    spectrum is real and negative for admissible mixtures, and each mode
    ``k`` decays at ``|lambda| (2 pi k)^2``.
    """
    values = np.linalg.eigvals(np.asarray(a_matrix, dtype=float))
    magnitudes = np.abs(values)
    nonzero = values[magnitudes > 1e-12 * magnitudes.max()]
    if nonzero.size == 0:
        raise ValueError("matrix has no nonzero eigenvalue")
    return float((2.0 * np.pi * wavenumber) ** 2 * np.abs(np.real(nonzero)).min())


def reference_pair_matrix():
    """The worked two-species example: masses (1, 3), n = (1, 2), unit kernels.

    Closed form from :func:`maxwell_flux_matrix` done by hand; the bordered
    solve reproduces it to machine precision, which pins the oracle itself.
    """
    return np.array([[-24.0, 4.0], [4.0, -2.0 / 3.0]]) / 49.0
