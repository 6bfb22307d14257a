"""Cross-diffusion matrices from the constrained inverse of the linearized operator."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .collision import CollisionStencil
from .errors import VerificationError
from .linear_operator import (
    GapResult,
    LinearizedOperator,
    assemble_L,
    project_complement,
    project_pi_L,
)
from .mixture import Mixture, maxwellian_field
from .velocity_grid import VelocityGrid, weighted_inner

log = logging.getLogger(__name__)

#: Relative kernel-contamination threshold of the strict solve mode.
STRICT_KERNEL_TOL = 1e-8

#: Slack multiplier applied to the eigenvalue lower bound built from the
#: measured spectral gap.
EIGEN_BOUND_SLACK = 1.1


class ComplementSolver:
    """Solve L f = rhs with f constrained to the orthogonal complement.

    Realized as one LU factorization in the half-weighted frame, where the
    operator is symmetric with moderate entries and the kernel constraints
    are flat-orthonormal rows, so the bordered system is well conditioned
    and repeated right-hand sides are cheap.  Working in the node frame
    instead would mix matrix entries across the huge dynamic range of the
    Maxwellian weights and leave amplified roundoff in the far tails.
    """

    def __init__(self, op: LinearizedOperator):
        self.op = op
        size = op.sym.shape[0]
        k = op.kernel_dim
        kappa = op.kernel.reshape(k, -1) * op.root[None, :]
        bordered = np.zeros((size + k, size + k))
        bordered[:size, :size] = op.sym
        bordered[:size, size:] = kappa.T
        bordered[size:, :size] = kappa
        self._lu = scipy.linalg.lu_factor(bordered)
        self._size = size
        self._k = k

    def _check_kernel_component(self, rhs, strict):
        op = self.op
        kernel_part = project_pi_L(rhs, op)
        rhs_norm = np.sqrt(max(op.inner(rhs, rhs), 0.0))
        kernel_norm = np.sqrt(max(op.inner(kernel_part, kernel_part), 0.0))
        if rhs_norm > 0.0 and kernel_norm > STRICT_KERNEL_TOL * rhs_norm:
            if strict:
                raise ValueError(
                    "right-hand side has a kernel component "
                    f"({kernel_norm / rhs_norm:.3e} relative); "
                    "project it or use strict=False"
                )
            log.info(
                "projected kernel component of relative size %.3e "
                "off the right-hand side",
                kernel_norm / rhs_norm,
            )
        return rhs - kernel_part

    def solve_scaled(self, rhs, strict: bool = True) -> np.ndarray:
        """Constrained inverse in the half-weighted frame.

        Takes a node-frame right-hand side of shape (N, Q) and returns the
        flattened half-weighted solution ``sqrt(metric) f``; pair it with
        another half-weighted field by a plain dot product to evaluate the
        weighted inner product without touching the tail weights.
        """
        rhs = np.asarray(rhs, dtype=float)
        target = self._check_kernel_component(rhs, strict)
        padded = np.concatenate(
            [self.op.root * target.reshape(-1), np.zeros(self._k)]
        )
        solution = scipy.linalg.lu_solve(self._lu, padded)
        return solution[: self._size]

    def solve(self, rhs, strict: bool = True) -> np.ndarray:
        """Apply the constrained inverse to one field of shape (N, Q).

        In strict mode a right-hand side with a kernel component above
        ``STRICT_KERNEL_TOL`` (relative, weighted norm) is rejected; in
        lenient mode it is projected out and the removed fraction logged.
        """
        rhs = np.asarray(rhs, dtype=float)
        scaled = self.solve_scaled(rhs, strict=strict)
        return (scaled / self.op.root).reshape(rhs.shape)


def solve_in_complement(rhs, op: LinearizedOperator,
                        strict: bool = True) -> np.ndarray:
    """One-shot constrained solve; build a ComplementSolver for repeated use."""
    return ComplementSolver(op).solve(rhs, strict=strict)


@dataclass
class FickAssembly:
    """Cross-diffusion matrices and their measured structural defects."""

    abar: np.ndarray
    a: np.ndarray
    n: np.ndarray
    masses: np.ndarray
    eigenvalues: np.ndarray
    kernel_vector: np.ndarray
    kernel_residual: float
    symmetry_defect: float


def gradient_moment_fields(mixture: Mixture, grid: VelocityGrid) -> np.ndarray:
    """Per-species first-coordinate moment carriers, shape (N, N, Q).

    Entry i is the field whose only nonzero species component is
    ``v_1 * mu_i`` on species i; these are the right-hand sides whose
    constrained inverses generate the diffusion coefficients.
    """
    nsp = mixture.species_count
    mu = maxwellian_field(mixture, np.ones(nsp), grid.nodes)
    fields = np.zeros((nsp, nsp, grid.count))
    for i in range(nsp):
        fields[i, i] = grid.nodes[:, 0] * mu[i]
    return fields


def assemble_fick(mixture: Mixture, n, grid: VelocityGrid,
                  op: LinearizedOperator,
                  solver: ComplementSolver | None = None) -> FickAssembly:
    """Build the diffusion matrices from the assembled linearized operator.

    Parameters
    ----------
    mixture, n, grid : model data; ``op`` must be assembled at this ``n``.
    op : LinearizedOperator
    solver : ComplementSolver, optional
        Reused when provided (it holds the LU factorization).

    Returns
    -------
    FickAssembly
        ``abar`` collects the weighted pairings of the constrained inverses
        of the moment carriers; ``a`` is ``diag(n) @ abar``.  Symmetry and
        the one-dimensional kernel along masses * concentrations are
        measured, not enforced.
    """
    n = np.asarray(n, dtype=float)
    if not np.allclose(op.n, n, rtol=1e-12, atol=0.0):
        raise ValueError("operator was assembled at different concentrations")
    if solver is None:
        solver = ComplementSolver(op)
    nsp = mixture.species_count
    carriers = gradient_moment_fields(mixture, grid)
    reduced = np.stack(
        [project_complement(carriers[i], op) for i in range(nsp)]
    )
    # Both factors of the pairing live in the half-weighted frame, so the
    # weighted inner product reduces to a plain dot product.
    inverses = np.stack(
        [solver.solve_scaled(reduced[i], strict=True) for i in range(nsp)]
    )
    scaled_rhs = reduced.reshape(nsp, -1) * op.root[None, :]
    abar = inverses @ scaled_rhs.T
    a = n[:, None] * abar

    kernel_vector = n * mixture.masses
    norm = float(np.linalg.norm(abar, ord=2))
    kernel_residual = float(
        np.linalg.norm(abar @ kernel_vector)
        / (norm * np.linalg.norm(kernel_vector))
    )
    symmetry_defect = float(
        np.max(np.abs(abar - abar.T)) / max(np.max(np.abs(abar)), 1e-300)
    )
    eigenvalues = np.linalg.eigvalsh(0.5 * (abar + abar.T))
    return FickAssembly(
        abar=abar,
        a=a,
        n=n,
        masses=np.array(mixture.masses, dtype=float),
        eigenvalues=eigenvalues,
        kernel_vector=kernel_vector,
        kernel_residual=kernel_residual,
        symmetry_defect=symmetry_defect,
    )


@dataclass
class EigenReport:
    """Spectrum of the diffusion matrix against its theoretical envelope."""

    eigenvalues: np.ndarray
    nonzero: np.ndarray
    negative_count: int
    carrier_norms: np.ndarray
    c1: float
    lambda_a: float
    bound_ok: bool
    degenerate: bool
    degenerate_spread: float


def eigen_report(assembly: FickAssembly, op: LinearizedOperator,
                 gap: GapResult,
                 slack: float = EIGEN_BOUND_SLACK) -> EigenReport:
    """Check the sign pattern and lower bound of the diffusion spectrum.

    The nonzero eigenvalues must all be strictly negative and bounded below
    by ``-C1 / (min n * gap)`` (with ``slack`` multiplying the bound), where
    C1 is the largest Gaussian-weighted norm of the projected moment
    carriers.  Equal-mass, equal-kernel, equal-concentration mixtures are
    flagged degenerate: their nonzero eigenvalues coincide.

    Raises
    ------
    VerificationError
        If a nonzero eigenvalue is positive (discretization bug).
    """
    values = np.sort(assembly.eigenvalues)
    kernel_tol = 1e-8 * max(float(np.max(np.abs(values))), 1e-300)
    nonzero = values[np.abs(values) > kernel_tol]
    if nonzero.size and float(nonzero.max()) > 0.0:
        raise VerificationError(
            f"diffusion matrix has a positive eigenvalue {nonzero.max():.3e}"
        )

    mixture = op.mixture
    grid = op.grid
    carriers = gradient_moment_fields(mixture, grid)
    mu = maxwellian_field(mixture, np.ones(mixture.species_count), grid.nodes)
    norms = np.empty(mixture.species_count)
    for j in range(mixture.species_count):
        residual = project_complement(carriers[j], op)
        norms[j] = weighted_inner(residual, residual, mu, grid)
    c1 = float(np.max(norms))
    lambda_a = c1 / (float(np.min(assembly.n)) * gap.lam)
    bound_ok = bool(np.all(nonzero >= -lambda_a * slack))

    masses = assembly.masses
    same_mass = np.allclose(masses, masses[0], rtol=1e-12)
    same_n = np.allclose(assembly.n, assembly.n[0], rtol=1e-12)
    constants = mixture.kinetic_constants
    same_kernel = np.allclose(constants, constants.flat[0], rtol=1e-12)
    degenerate = bool(same_mass and same_n and same_kernel)
    if degenerate and nonzero.size:
        spread = float(
            (nonzero.max() - nonzero.min()) / max(abs(nonzero).max(), 1e-300)
        )
    else:
        spread = 0.0
    return EigenReport(
        eigenvalues=values,
        nonzero=nonzero,
        negative_count=int(np.count_nonzero(values < -kernel_tol)),
        carrier_norms=norms,
        c1=c1,
        lambda_a=lambda_a,
        bound_ok=bound_ok,
        degenerate=degenerate,
        degenerate_spread=spread,
    )


def eigen_gap_trend(mixture: Mixture, grid: VelocityGrid,
                    stencil: CollisionStencil, n,
                    factors=(1.0, 0.5, 0.25)) -> list:
    """Reassemble at shrinking minimum concentration; report the slowest mode.

    Returns one entry per factor with the scaled minimum concentration and
    the largest (least negative) nonzero eigenvalue.  Report-only: the
    theoretical envelope weakens as min n shrinks, the measured trend is
    recorded without a hard assertion.
    """
    n = np.asarray(n, dtype=float)
    idx = int(np.argmin(n))
    trend = []
    for factor in factors:
        probe = n.copy()
        probe[idx] = n[idx] * factor
        op = assemble_L(mixture, probe, grid, stencil)
        assembly = assemble_fick(mixture, probe, grid, op)
        values = np.sort(assembly.eigenvalues)
        kernel_tol = 1e-8 * max(float(np.max(np.abs(values))), 1e-300)
        nonzero = values[np.abs(values) > kernel_tol]
        trend.append({
            "min_n": float(probe.min()),
            "beta_max": float(nonzero.max()) if nonzero.size else 0.0,
        })
    return trend


@dataclass
class IsotropyReport:
    """Coordinate isotropy of the diffusion coefficients."""

    cross_max: float
    scale: float
    axis_mismatch: float
    diagonal_negative: bool
    ok: bool = field(init=False)

    def __post_init__(self):
        self.ok = bool(
            self.cross_max <= 1e-8 * self.scale
            and self.axis_mismatch <= 1e-8 * self.scale
            and self.diagonal_negative
        )


def verify_lemma_cij(mixture: Mixture, n, grid: VelocityGrid,
                     op: LinearizedOperator,
                     solver: ComplementSolver | None = None) -> IsotropyReport:
    """Verify that the diffusion pairing does not mix coordinates.

    Computes the pairings of constrained inverses of per-coordinate moment
    carriers: off-axis combinations must vanish and the two on-axis
    coefficients must coincide, by the reflection symmetries of the grid.
    """
    if grid.dim != 2:
        raise ValueError("coordinate comparison requires dim 2")
    n = np.asarray(n, dtype=float)
    if solver is None:
        solver = ComplementSolver(op)
    nsp = mixture.species_count
    mu = maxwellian_field(mixture, np.ones(nsp), grid.nodes)

    scaled_rhs = {}
    inverted = {}
    for i in range(nsp):
        for ax in range(2):
            carrier = np.zeros((nsp, grid.count))
            carrier[i] = grid.nodes[:, ax] * mu[i]
            reduced = project_complement(carrier, op)
            scaled_rhs[(i, ax)] = op.root * reduced.reshape(-1)
            inverted[(i, ax)] = solver.solve_scaled(reduced, strict=True)

    coef = np.empty((nsp, 2, nsp, 2))
    for i in range(nsp):
        for ax in range(2):
            for j in range(nsp):
                for bx in range(2):
                    coef[i, ax, j, bx] = inverted[(i, ax)] @ scaled_rhs[(j, bx)]
    scale = float(np.max(np.abs(coef)))
    cross = float(
        max(
            abs(coef[i, 0, j, 1]) for i in range(nsp) for j in range(nsp)
        )
    )
    cross = max(cross, float(
        max(
            abs(coef[i, 1, j, 0]) for i in range(nsp) for j in range(nsp)
        )
    ))
    mismatch = float(
        max(
            abs(coef[i, 0, j, 0] - coef[i, 1, j, 1])
            for i in range(nsp) for j in range(nsp)
        )
    )
    diagonal_negative = bool(
        all(coef[i, ax, i, ax] < 0.0 for i in range(nsp) for ax in range(2))
    )
    return IsotropyReport(
        cross_max=cross,
        scale=scale,
        axis_mismatch=mismatch,
        diagonal_negative=diagonal_negative,
    )


def projection_PiA(X, n, masses):
    """Idempotent orthogonal projection onto the diffusion kernel direction.

    Returns the pair (projection, complement); the kernel direction is the
    componentwise product of concentrations and masses.
    """
    X = np.asarray(X, dtype=float)
    direction = np.asarray(n, dtype=float) * np.asarray(masses, dtype=float)
    weight = float(direction @ direction)
    if weight == 0.0:
        raise ValueError("kernel direction must be nonzero")
    proj = (X @ direction / weight) * direction
    return proj, X - proj


@dataclass
class SensitivityReport:
    """Finite-difference differentiability probe of the diffusion matrix."""

    derivative: np.ndarray
    order: float
    continuity_slope: float
    steps: tuple


def matrix_function(mixture: Mixture, grid: VelocityGrid,
                    stencil: CollisionStencil):
    """Return a callable n -> Abar(n) running the full assembly pipeline.

    Consumers multiply by ``diag(n)`` themselves where the full matrix
    ``A(n) = diag(n) Abar(n)`` is needed.
    """
    def evaluate(n):
        op = assemble_L(mixture, n, grid, stencil)
        return assemble_fick(mixture, np.asarray(n, dtype=float), grid, op).abar
    return evaluate


def sobolev_sensitivity(mixture: Mixture, n, grid: VelocityGrid,
                        stencil: CollisionStencil, direction,
                        eps_list=(1e-2, 5e-3, 2.5e-3)) -> SensitivityReport:
    """Central-difference derivative of A(n) along a concentration direction.

    Runs the full assembly at displaced concentrations, estimates the
    Richardson order of the central difference over the halved step list,
    and the log-log continuity slope of ``||A(n + eps h) - A(n)||``.
    """
    n = np.asarray(n, dtype=float)
    direction = np.asarray(direction, dtype=float)
    eps_list = tuple(sorted(eps_list, reverse=True))
    if len(eps_list) < 3:
        raise ValueError("need at least three steps for an order estimate")
    biggest = eps_list[0]
    for sign in (+1.0, -1.0):
        probe = n + sign * biggest * direction
        if np.any(probe <= 0.0):
            raise ValueError("probe leaves the positive concentration cone")

    evaluate = matrix_function(mixture, grid, stencil)
    base = evaluate(n)
    diffs = []
    continuity = []
    for eps in eps_list:
        plus = evaluate(n + eps * direction)
        minus = evaluate(n - eps * direction)
        diffs.append((plus - minus) / (2.0 * eps))
        continuity.append(np.linalg.norm(plus - base))

    if np.linalg.norm(direction) == 0.0:
        order = float("nan")
        slope = float("nan")
    else:
        step1 = np.linalg.norm(diffs[0] - diffs[1])
        step2 = np.linalg.norm(diffs[1] - diffs[2])
        order = float(np.log2(step1 / step2)) if step2 > 0.0 else float("inf")
        logs = np.log(np.asarray(continuity))
        slope = float(np.polyfit(np.log(np.asarray(eps_list)), logs, 1)[0])
    return SensitivityReport(
        derivative=diffs[-1],
        order=order,
        continuity_slope=slope,
        steps=eps_list,
    )


def homogeneity_exponent(mixture: Mixture, grid: VelocityGrid,
                         stencil: CollisionStencil, n,
                         factors=(1.0, 2.0, 4.0)) -> float:
    """Fitted power of ||abar(alpha n)|| against alpha."""
    n = np.asarray(n, dtype=float)
    norms = []
    for alpha in factors:
        op = assemble_L(mixture, alpha * n, grid, stencil)
        assembly = assemble_fick(mixture, alpha * n, grid, op)
        norms.append(np.linalg.norm(assembly.abar))
    fit = np.polyfit(np.log(np.asarray(factors)), np.log(np.asarray(norms)), 1)
    return float(fit[0])
