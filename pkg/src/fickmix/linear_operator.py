"""Linearized collision operator, its kernel structure, and gap constants."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .collision import CollisionStencil, scattered_velocities
from .mixture import (
    Mixture,
    maxwellian_field,
    mixture_fingerprint,
    mixture_scalars,
    validate_hypotheses,
)
from .velocity_grid import VelocityGrid, weighted_inner

log = logging.getLogger(__name__)

#: Relative threshold below which an eigenvalue counts as a kernel mode.
KERNEL_TOL = 1e-8

#: Magic tag of assembled-operator cache files.
OPERATOR_CACHE_MAGIC = "FICKL1"


@dataclass
class LinearizedOperator:
    """Dense discrete linearization of the collision operators at equilibrium.

    ``matrix`` acts on flattened node values (species-major, shape N*Q) and
    is exactly self-adjoint in the Maxwellian-weighted metric with the
    orthonormalized ``kernel`` vectors as an exact null space; the raw
    assembly defects that the closure removed are kept in ``diagnostics``.

    ``sym`` is the same operator expressed in the half-weighted frame
    ``y = sqrt(metric) f`` where it is a plain symmetric matrix with entries
    of moderate size.  The metric spans hundreds of orders of magnitude
    across the velocity box, so every precision-critical computation
    (eigensolves, constrained inversion, coefficient pairings) must run on
    ``sym`` and rescale at the boundaries; ``root`` holds the flattened
    square root of the metric used for that rescaling.
    """

    matrix: np.ndarray
    mixture: Mixture
    n: np.ndarray
    grid: VelocityGrid
    equilibrium: np.ndarray
    metric: np.ndarray
    kernel_raw: np.ndarray
    kernel: np.ndarray
    sym: np.ndarray
    root: np.ndarray
    mono: np.ndarray | None = None
    bi: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def kernel_dim(self) -> int:
        return self.kernel.shape[0]

    def flatten(self, f) -> np.ndarray:
        return np.asarray(f).reshape(-1)

    def unflatten(self, x) -> np.ndarray:
        return np.asarray(x).reshape(self.equilibrium.shape)

    def apply(self, f) -> np.ndarray:
        return self.unflatten(self.matrix @ self.flatten(f))

    def inner(self, f, g) -> float:
        return weighted_inner(f, g, self.equilibrium, self.grid)


def kernel_basis(mixture: Mixture, n, grid: VelocityGrid) -> np.ndarray:
    """Closed-form null-space basis of the linearized operator.

    Species modes, one momentum mode per coordinate, and the energy mode;
    orthonormal in the Maxwellian-weighted inner product up to quadrature
    error.  Shape (N + dim + 1, N, Q).
    """
    n = np.asarray(n, dtype=float)
    nsp = mixture.species_count
    eq = maxwellian_field(mixture, n, grid.nodes)
    c_inf, rho_inf = mixture_scalars(mixture, n)
    sq = np.sum(grid.nodes * grid.nodes, axis=-1)

    basis = np.zeros((nsp + grid.dim + 1, nsp, grid.count))
    for k in range(nsp):
        basis[k, k] = eq[k] / np.sqrt(n[k])
    for ax in range(grid.dim):
        for i in range(nsp):
            basis[nsp + ax, i] = (
                grid.nodes[:, ax] * mixture.masses[i] * eq[i] / np.sqrt(rho_inf)
            )
    for i in range(nsp):
        basis[nsp + grid.dim, i] = (
            (sq - grid.dim / mixture.masses[i])
            * mixture.masses[i]
            * eq[i]
            / np.sqrt(2.0 * grid.dim * c_inf)
        )
    return basis


def orthonormalize_kernel(basis: np.ndarray, metric: np.ndarray) -> np.ndarray:
    """Re-orthonormalize kernel vectors in the discrete weighted metric."""
    flat = basis.reshape(basis.shape[0], -1)
    omega = metric.reshape(-1)
    gram = (flat * omega) @ flat.T
    chol = np.linalg.cholesky(gram)
    ortho = scipy.linalg.solve_triangular(chol, flat, lower=True)
    return ortho.reshape(basis.shape)


def assemble_L(mixture: Mixture, n, grid: VelocityGrid,
               stencil: CollisionStencil) -> LinearizedOperator:
    """Assemble the linearized operator around the mixture equilibrium.

    Parameters
    ----------
    mixture : Mixture
    n : array_like, shape (N,)
        Strictly positive concentrations.
    grid : VelocityGrid
    stencil : CollisionStencil
        Pair kernels from :func:`fickmix.collision.precompute_stencil`.

    Returns
    -------
    LinearizedOperator
        The raw block assembly is symmetrized in the weighted metric and
        compressed onto the orthogonal complement of the closed-form null
        space, so self-adjointness and the kernel are exact; the sizes of
        the removed defects are reported in ``diagnostics``.

    Notes
    -----
    The assembled matrix is exactly linear in ``n`` (the pair kernels are
    concentration-free), which downstream scaling tests rely on.
    """
    n = np.asarray(n, dtype=float)
    nsp = mixture.species_count
    if n.shape != (nsp,):
        raise ValueError("one concentration per species required")
    if np.any(n <= 0.0):
        raise ValueError("concentrations must be strictly positive")
    q = grid.count
    size = nsp * q
    mu = maxwellian_field(mixture, np.ones(nsp), grid.nodes)
    eq = maxwellian_field(mixture, n, grid.nodes)

    mono = np.zeros((size, size))
    bi = np.zeros((size, size))
    for i in range(nsp):
        rows = slice(i * q, (i + 1) * q)
        for j in range(nsp):
            cols = slice(j * q, (j + 1) * q)
            maxw_against = (
                n[i] * (mu[i][:, None] * stencil.k1[(i, j)] / mu[j][None, :])
            )
            perturbed_against = (
                n[j] * (mu[i][:, None] * stencil.k2[(i, j)] / mu[i][None, :])
            )
            target = mono if i == j else bi
            target[rows, cols] += maxw_against
            if i == j:
                mono[rows, rows] += perturbed_against
            else:
                bi[rows, rows] += perturbed_against
    raw = mono + bi

    # All symmetrization and projection happens in the half-weighted frame
    # y = sqrt(metric) f.  Forming the weighted adjoint directly in the node
    # frame would multiply far-tail entries by metric ratios around
    # exp(m r^2) and drown the physically relevant block in amplified
    # roundoff; in the half-weighted frame every entry stays moderate.
    omega = (grid.weights[None, :] / eq).reshape(-1)
    root = np.sqrt(omega)
    half = raw * (root[:, None] / root[None, :])
    sym_defect = float(
        np.linalg.norm(half - half.T) / max(np.linalg.norm(half), 1e-300)
    )
    sym = 0.5 * (half + half.T)

    metric = (grid.weights[None, :] / eq)
    raw_basis = kernel_basis(mixture, n, grid)
    ortho = orthonormalize_kernel(raw_basis, metric)
    flat_basis = ortho.reshape(ortho.shape[0], -1)
    # Metric-orthonormal in the node frame means flat-orthonormal here.
    kappa = flat_basis * root[None, :]

    scale = np.linalg.norm(sym) / np.sqrt(size)
    raw_kernel_defect = float(
        max(
            np.linalg.norm(sym @ kappa[k]) / max(scale, 1e-300)
            for k in range(kappa.shape[0])
        )
    )

    sym = sym - kappa.T @ (kappa @ sym)
    sym -= (sym @ kappa.T) @ kappa
    sym = 0.5 * (sym + sym.T)

    # The continuous operator is negative semidefinite, but symmetrizing the
    # strongly asymmetric far-tail entries (where the quadrature no longer
    # resolves the Maxwellian) leaves a handful of positive eigenvalues whose
    # eigenvectors live entirely on box-edge nodes.  Left in place they make
    # the implicit collision step amplifying and relaxation runs blow up from
    # the tails.  Flipping their sign restores dissipativity while keeping
    # the modulus spectrum, the kernel and the bordered-solver invertibility
    # unchanged; clipping to zero instead would enlarge the numerical kernel.
    values, vectors = np.linalg.eigh(sym)
    positive = values > 0.0
    dissipativity_defect = float(values[positive].max()) if np.any(positive) else 0.0
    if np.any(positive):
        sym = (vectors * (-np.abs(values))[None, :]) @ vectors.T
        sym = sym - kappa.T @ (kappa @ sym)
        sym -= (sym @ kappa.T) @ kappa
        sym = 0.5 * (sym + sym.T)
    matrix = sym * (root[None, :] / root[:, None])

    diagnostics = {
        "raw_symmetry_defect": sym_defect,
        "raw_kernel_defect": raw_kernel_defect,
        "dissipativity_defect": dissipativity_defect,
        "flipped_modes": int(np.count_nonzero(positive)),
        "truncation_loss_max": max(stencil.truncation_loss.values(), default=0.0),
    }
    log.debug("assembled operator: %s", diagnostics)
    return LinearizedOperator(
        matrix=matrix,
        mixture=mixture,
        n=n,
        grid=grid,
        equilibrium=eq,
        metric=metric,
        kernel_raw=raw_basis,
        kernel=ortho,
        sym=sym,
        root=root,
        mono=mono,
        bi=bi,
        diagnostics=diagnostics,
    )


def project_pi_L(f, op: LinearizedOperator) -> np.ndarray:
    """Weighted-orthogonal projection onto the operator's null space."""
    f = np.asarray(f, dtype=float)
    coeffs = np.einsum("kiq,iq,iq->k", op.kernel, f, op.metric)
    return np.einsum("k,kiq->iq", coeffs, op.kernel)


def project_complement(f, op: LinearizedOperator) -> np.ndarray:
    """Component of f orthogonal to the operator's null space."""
    return np.asarray(f, dtype=float) - project_pi_L(f, op)


def collision_frequency(mixture: Mixture, n, grid: VelocityGrid):
    """Pairwise and per-species collision frequencies on the grid.

    Returns (nu_pairs, nu, nu_min) with shapes (N, N, Q), (N, Q) and a
    scalar minimum over species and nodes.
    """
    n = np.asarray(n, dtype=float)
    nsp = mixture.species_count
    if np.any(n <= 0.0):
        raise ValueError("concentrations must be strictly positive")
    eq = maxwellian_field(mixture, n, grid.nodes)
    nodes = grid.nodes
    rel = nodes[:, None, :] - nodes[None, :, :]
    speed = np.linalg.norm(rel, axis=-1)
    if mixture.gamma == 0.0:
        speed_pow = np.ones_like(speed)
    else:
        speed_pow = speed ** mixture.gamma

    angular = np.zeros_like(speed)
    for a in range(len(grid.angular_weights)):
        sigma = grid.angular_nodes[a]
        cos = np.divide(rel @ sigma, speed, out=np.ones_like(speed),
                        where=speed > 0.0)
        angular += grid.angular_weights[a] * mixture.angular_b(cos)
    base = angular * speed_pow

    nu_pairs = np.empty((nsp, nsp, grid.count))
    for j in range(nsp):
        partner = base @ (grid.weights * eq[j])
        for i in range(nsp):
            nu_pairs[i, j] = mixture.kinetic_constants[i, j] * partner
    nu = nu_pairs.sum(axis=1)
    return nu_pairs, nu, float(nu.min())


@dataclass
class GapResult:
    """Spectrum summary of an assembled operator."""

    lam: float
    eigenvalues: np.ndarray
    operator_norm: float
    zero_count: int
    kernel_angles: np.ndarray


def numeric_spectral_gap(op: LinearizedOperator,
                         kernel_tol: float = KERNEL_TOL) -> GapResult:
    """Dense eigensolve of the operator in its weighted metric.

    Returns the spectral gap (smallest nonzero eigenvalue magnitude), the
    full spectrum, the operator norm, the near-zero count, and the
    principal angles between the numerical near-null space and the
    closed-form kernel basis.

    Raises
    ------
    RuntimeError
        If more near-zero eigenvalues appear than the kernel dimension
        (spectral degeneracy: the grid is too coarse to separate the gap).
    """
    values, vectors = np.linalg.eigh(op.sym)
    norm = float(np.max(np.abs(values)))
    near_zero = np.abs(values) <= kernel_tol * norm
    count = int(np.count_nonzero(near_zero))
    if count > op.kernel_dim:
        raise RuntimeError(
            f"{count} near-zero eigenvalues for kernel dimension "
            f"{op.kernel_dim}; grid too coarse to resolve the gap"
        )
    nonzero = np.abs(values[~near_zero])
    lam = float(nonzero.min()) if nonzero.size else 0.0

    # In the half-weighted frame the kernel basis is flat-orthonormal, so
    # the principal angles come from a plain inner product.
    kappa = op.kernel.reshape(op.kernel_dim, -1) * op.root[None, :]
    overlap = kappa @ vectors[:, near_zero]
    singulars = np.linalg.svd(overlap, compute_uv=False)
    angles = np.arccos(np.clip(singulars, -1.0, 1.0))
    return GapResult(
        lam=lam,
        eigenvalues=values,
        operator_norm=norm,
        zero_count=count,
        kernel_angles=angles,
    )


@dataclass
class SpectralConstants:
    """Explicit spectral-gap constants and measured operator norms."""

    lambda0: np.ndarray
    lambda_species: np.ndarray
    big_lambda: float
    eta0: float
    lambda_lower: float
    nu_min: float
    c2: float
    c_phi: np.ndarray
    c_b: np.ndarray
    radii: np.ndarray
    operator_norm: float | None = None
    norm_per_concentration: float | None = None

    def as_dict(self) -> dict:
        out = {
            "big_lambda": self.big_lambda,
            "eta0": self.eta0,
            "lambda_lower": self.lambda_lower,
            "nu_min": self.nu_min,
            "c2": self.c2,
            "c2_user_supplied": True,
        }
        for i in range(self.lambda0.size):
            out[f"lambda0_{i}"] = float(self.lambda0[i])
            out[f"lambda_species_{i}"] = float(self.lambda_species[i])
        if self.operator_norm is not None:
            out["operator_norm"] = self.operator_norm
            out["norm_per_concentration"] = self.norm_per_concentration
        return out


def mono_species_gap(c_phi: float, c_b: float, radius: float) -> float:
    """Explicit single-species spectral-gap lower bound."""
    return c_phi * c_b * np.exp(-4.0 * radius * radius) / 96.0


def energy_transfer_constant(mixture: Mixture, n, grid: VelocityGrid) -> float:
    """Quadrature of the worst-pair energy/momentum transfer functional.

    Integrates ``m_i^2 B_ij min(|v - v'|^2 / 3, (|v'|^2 - |v|^2)^2)``
    against the product equilibrium over velocities and angles, minimized
    over species pairs, with an overall 1/4.
    """
    n = np.asarray(n, dtype=float)
    nsp = mixture.species_count
    eq = maxwellian_field(mixture, n, grid.nodes)
    nodes = grid.nodes
    w = grid.weights
    rel = nodes[:, None, :] - nodes[None, :, :]
    speed = np.linalg.norm(rel, axis=-1)
    if mixture.gamma == 0.0:
        speed_pow = np.ones_like(speed)
    else:
        speed_pow = speed ** mixture.gamma
    sq = np.sum(nodes * nodes, axis=-1)

    best = np.inf
    for i in range(nsp):
        mi = float(mixture.masses[i])
        for j in range(nsp):
            mj = float(mixture.masses[j])
            total = 0.0
            for a in range(len(grid.angular_weights)):
                sigma = grid.angular_nodes[a]
                cos = np.divide(rel @ sigma, speed, out=np.ones_like(speed),
                                where=speed > 0.0)
                out, _ = scattered_velocities(
                    mi, mj, nodes[:, None, :], nodes[None, :, :], sigma
                )
                jump = np.sum(
                    (nodes[:, None, :] - out) ** 2, axis=-1
                )
                energy_shift = (np.sum(out * out, axis=-1) - sq[:, None]) ** 2
                kernel = (
                    float(mixture.kinetic_constants[i, j])
                    * speed_pow
                    * mixture.angular_b(cos)
                    * grid.angular_weights[a]
                )
                integrand = kernel * np.minimum(jump / 3.0, energy_shift)
                total += mi * mi * ((w * eq[i]) @ integrand @ (w * eq[j]))
            best = min(best, total)
    return 0.25 * best


def explicit_constants(mixture: Mixture, n, grid: VelocityGrid,
                       c2: float = 1.0, op: LinearizedOperator | None = None,
                       gap: GapResult | None = None, *,
                       c_phi=None, c_b=None, radii=None) -> SpectralConstants:
    """Evaluate the explicit lower-bound constants for the spectral gap.

    ``c2`` is inherited from the coercivity decomposition of the
    cross-interaction part and is not derivable here; it must be supplied
    (default 1) and is flagged as user input in reports.  The measured
    operator norm and its per-concentration quotient are filled when an
    assembled operator (or its gap result) is available.
    """
    if c2 <= 0.0:
        raise ValueError("c2 must be strictly positive")
    n = np.asarray(n, dtype=float)
    nsp = mixture.species_count
    if c_phi is None:
        c_phi = np.diag(mixture.kinetic_constants).astype(float)
    else:
        c_phi = np.asarray(c_phi, dtype=float)
    if c_b is None:
        report = validate_hypotheses(mixture)
        c_b = np.full(nsp, report.cusp_constant)
    else:
        c_b = np.asarray(c_b, dtype=float)
    if radii is None:
        radii = np.ones(nsp)
    else:
        radii = np.asarray(radii, dtype=float)

    lambda0 = np.array(
        [mono_species_gap(c_phi[i], c_b[i], radii[i]) for i in range(nsp)]
    )
    lambda_species = lambda0 / mixture.masses ** (mixture.gamma / 2.0)
    big = energy_transfer_constant(mixture, n, grid)
    c_inf, rho_inf = mixture_scalars(mixture, n)
    bulk = max(rho_inf, 6.0 * c_inf)
    _, _, nu_min = collision_frequency(mixture, n, grid)
    eta0 = min(
        1.0,
        10.0 * nsp * float(lambda_species.min()) * bulk
        / (c2 + 40.0 * nsp * bulk * nu_min),
    )
    lambda_lower = big * eta0 / (20.0 * nsp * bulk)

    norm = None
    per_conc = None
    if gap is not None:
        norm = gap.operator_norm
    elif op is not None:
        norm = float(np.max(np.abs(np.linalg.eigvalsh(op.sym))))
    if norm is not None:
        per_conc = norm / float(np.max(n))
    return SpectralConstants(
        lambda0=lambda0,
        lambda_species=lambda_species,
        big_lambda=float(big),
        eta0=float(eta0),
        lambda_lower=float(lambda_lower),
        nu_min=nu_min,
        c2=float(c2),
        c_phi=c_phi,
        c_b=c_b,
        radii=radii,
        operator_norm=norm,
        norm_per_concentration=per_conc,
    )


def save_operator(op: LinearizedOperator, path) -> None:
    """Write the assembled operator with a validation header."""
    path = Path(path)
    payload = {
        "magic": np.array(OPERATOR_CACHE_MAGIC),
        "dim": np.array(op.grid.dim),
        "points_per_axis": np.array(op.grid.points_per_axis),
        "r_max": np.array(op.grid.r_max),
        "angular_count": np.array(len(op.grid.angular_weights)),
        "fingerprint": np.array(mixture_fingerprint(op.mixture)),
        "n": op.n,
        "matrix": op.matrix,
        "mono": op.mono if op.mono is not None else np.zeros(0),
        "bi": op.bi if op.bi is not None else np.zeros(0),
    }
    for key, value in op.diagnostics.items():
        payload[f"diag_{key}"] = np.array(value)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **payload)


def load_operator(path, mixture: Mixture, n, grid: VelocityGrid
                  ) -> LinearizedOperator:
    """Load a cached operator; refuse mismatched headers."""
    path = Path(path)
    n = np.asarray(n, dtype=float)
    with np.load(path, allow_pickle=False) as data:
        if "magic" not in data or str(data["magic"]) != OPERATOR_CACHE_MAGIC:
            raise ValueError(f"{path} is not an operator cache")
        if (
            int(data["dim"]) != grid.dim
            or int(data["points_per_axis"]) != grid.points_per_axis
            or int(data["angular_count"]) != len(grid.angular_weights)
            or abs(float(data["r_max"]) - grid.r_max) > 1e-12 * grid.r_max
        ):
            raise ValueError(f"cache {path} was built for a different grid")
        if str(data["fingerprint"]) != mixture_fingerprint(mixture):
            raise ValueError(f"cache {path} was built for a different mixture")
        if data["n"].shape != n.shape or not np.allclose(
            data["n"], n, rtol=1e-12, atol=0.0
        ):
            raise ValueError(
                f"cache {path} was built for concentrations {data['n']}"
            )
        eq = maxwellian_field(mixture, n, grid.nodes)
        metric = grid.weights[None, :] / eq
        raw_basis = kernel_basis(mixture, n, grid)
        ortho = orthonormalize_kernel(raw_basis, metric)
        diagnostics = {
            key[len("diag_"):]: float(data[key])
            for key in data.files
            if key.startswith("diag_")
        }
        mono = data["mono"] if data["mono"].size else None
        bi = data["bi"] if data["bi"].size else None
        matrix = data["matrix"]
        root = np.sqrt(metric.reshape(-1))
        sym = matrix * (root[:, None] / root[None, :])
        sym = 0.5 * (sym + sym.T)
        return LinearizedOperator(
            matrix=matrix,
            mixture=mixture,
            n=n,
            grid=grid,
            equilibrium=eq,
            metric=metric,
            kernel_raw=raw_basis,
            kernel=ortho,
            sym=sym,
            root=root,
            mono=mono,
            bi=bi,
            diagnostics=diagnostics,
        )
