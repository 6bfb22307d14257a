"""Species data, binary collision kernels, and Maxwellian equilibria."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

#: Angular profiles available for the collision kernel b(cos theta).
ANGULAR_PROFILES = ("constant", "grad")

#: Default amplitude of the constant angular profile.  Chosen so that the
#: angular measure integrates to one on the unit circle, which keeps the
#: Maxwell-molecule collision frequency equal to the partner concentration.
DEFAULT_B0 = 1.0 / (2.0 * np.pi)

#: Relative tolerance used when checking the angular upper bound.
_BOUND_TOL = 1e-12


@dataclass(frozen=True)
class Mixture:
    """An ideal gas mixture of N species with binary collision kernels.

    The collision kernel for the pair (i, j) factorizes as
    ``B_ij(r, c) = kinetic_constants[i, j] * r**gamma * b(c)`` where ``r`` is
    the relative speed, ``c`` the cosine of the deviation angle and ``b`` the
    selected angular profile.  ``kinetic_constants`` must be symmetric
    (micro-reversibility); this is checked by :func:`validate_hypotheses`
    rather than at construction so that invalid matrices can be diagnosed.
    """

    masses: np.ndarray
    kinetic_constants: np.ndarray
    gamma: float = 0.0
    angular_profile: str = "constant"
    profile_constant: float = DEFAULT_B0
    dim: int = 2

    def __post_init__(self):
        masses = np.asarray(self.masses, dtype=float)
        constants = np.asarray(self.kinetic_constants, dtype=float)
        if masses.ndim != 1 or masses.size < 2:
            raise ValueError("need at least two species masses")
        if np.any(masses <= 0.0):
            raise ValueError("all masses must be strictly positive")
        n = masses.size
        if constants.shape != (n, n):
            raise ValueError(
                f"kinetic_constants must be {n}x{n}, got {constants.shape}"
            )
        if np.any(constants < 0.0):
            raise ValueError("kinetic_constants must be non-negative")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.angular_profile not in ANGULAR_PROFILES:
            raise ValueError(
                f"unknown angular profile {self.angular_profile!r}; "
                f"options: {ANGULAR_PROFILES}"
            )
        if self.profile_constant <= 0.0:
            raise ValueError("profile_constant must be strictly positive")
        if self.dim not in (1, 2):
            raise ValueError("velocity dimension must be 1 or 2")
        object.__setattr__(self, "masses", masses)
        object.__setattr__(self, "kinetic_constants", constants)

    @property
    def species_count(self) -> int:
        return self.masses.size

    def angular_b(self, cos_theta):
        """Angular collision profile b evaluated at cos(theta)."""
        c = np.asarray(cos_theta, dtype=float)
        if self.angular_profile == "constant":
            return np.full_like(c, self.profile_constant)
        # grad profile: |sin theta| * |cos theta| up to the amplitude
        sin = np.sqrt(np.clip(1.0 - c * c, 0.0, None))
        return self.profile_constant * sin * np.abs(c)


def reduced_maxwellian(mixture: Mixture, i: int, v) -> np.ndarray:
    """Unit-concentration Maxwellian of species i at velocities v.

    ``v`` has shape (..., dim); the result drops the last axis.
    """
    m = mixture.masses[i]
    v = np.asarray(v, dtype=float)
    sq = np.sum(v * v, axis=-1)
    return (m / (2.0 * np.pi)) ** (mixture.dim / 2.0) * np.exp(-0.5 * m * sq)


def maxwellian(mixture: Mixture, i: int, n_i: float, v) -> np.ndarray:
    """Maxwellian equilibrium of species i with concentration n_i."""
    if n_i <= 0.0:
        raise ValueError("concentration must be strictly positive")
    return n_i * reduced_maxwellian(mixture, i, v)


def maxwellian_field(mixture: Mixture, n, nodes) -> np.ndarray:
    """Stack the species Maxwellians on velocity nodes, shape (N, Q)."""
    n = np.asarray(n, dtype=float)
    if n.shape != (mixture.species_count,):
        raise ValueError("one concentration per species required")
    if np.any(n <= 0.0):
        raise ValueError("concentrations must be strictly positive")
    return np.stack(
        [maxwellian(mixture, i, n[i], nodes) for i in range(mixture.species_count)]
    )


def mixture_scalars(mixture: Mixture, n):
    """Total concentration and total mass density (c_inf, rho_inf)."""
    n = np.asarray(n, dtype=float)
    if n.shape != (mixture.species_count,):
        raise ValueError("one concentration per species required")
    if np.any(n <= 0.0):
        raise ValueError("concentrations must be strictly positive")
    return float(np.sum(n)), float(np.sum(mixture.masses * n))


@dataclass
class HypothesesReport:
    """Outcome of the structural checks on a mixture's collision kernels."""

    symmetric: bool
    asymmetric_pairs: list
    upper_bound_checked: bool
    upper_bound_violation: float
    cusp_constant: float
    cusp_positive: bool
    degenerate_equal_mass_1d: bool
    ok: bool = field(init=False)

    def __post_init__(self):
        self.ok = bool(
            self.symmetric
            and self.cusp_positive
            and (not self.upper_bound_checked or self.upper_bound_violation <= 0.0)
        )


def _cusp_integrand_minimum(mixture: Mixture, relative_angle, sample_count: int):
    """Integral over the sphere of min(b(s1.s3), b(s2.s3)) at fixed angle.

    ``relative_angle`` is the angle between the two reference directions; by
    rotation invariance this single parameter determines the integral.
    """
    if mixture.dim == 1:
        sig3 = np.array([1.0, -1.0])
        b1 = mixture.angular_b(np.cos(relative_angle) * sig3)
        b2 = mixture.angular_b(sig3)
        return float(np.sum(np.minimum(b1, b2)))
    t = (np.arange(sample_count) + 0.5) * (2.0 * np.pi / sample_count)
    b1 = mixture.angular_b(np.cos(t))
    b2 = mixture.angular_b(np.cos(t - relative_angle))
    return float(np.sum(np.minimum(b1, b2)) * (2.0 * np.pi / sample_count))


def cusp_constant_at(mixture: Mixture, angle1: float, angle2: float,
                     sample_count: int = 4096) -> float:
    """Two-direction form of the overlap integral, used to probe rotation
    invariance: only the relative angle should matter."""
    if mixture.dim != 2:
        raise ValueError("two-direction probe only defined for dim 2")
    t = (np.arange(sample_count) + 0.5) * (2.0 * np.pi / sample_count)
    b1 = mixture.angular_b(np.cos(t - angle1))
    b2 = mixture.angular_b(np.cos(t - angle2))
    return float(np.sum(np.minimum(b1, b2)) * (2.0 * np.pi / sample_count))


def validate_hypotheses(mixture: Mixture, sample_count: int = 4096,
                        angle_count: int = 512) -> HypothesesReport:
    """Check the structural hypotheses on the collision kernels.

    Verifies symmetry of the kinetic constants, samples the angular upper
    bound where the grad profile is selected, and computes the overlap
    ("cusp") constant ``min_i inf_{s1,s2} int min(b(s1.s3), b(s2.s3)) ds3``
    by a grid search over the relative angle between the two directions.
    """
    constants = mixture.kinetic_constants
    pairs = []
    for i in range(mixture.species_count):
        for j in range(i + 1, mixture.species_count):
            if not np.isclose(constants[i, j], constants[j, i],
                              rtol=1e-12, atol=0.0):
                pairs.append((i, j))
    symmetric = not pairs

    if mixture.angular_profile == "grad":
        theta = (np.arange(sample_count) + 0.5) * (np.pi / sample_count)
        values = mixture.angular_b(np.cos(theta))
        bound = mixture.profile_constant * np.abs(np.sin(theta) * np.cos(theta))
        violation = float(np.max(values - bound * (1.0 + _BOUND_TOL)))
        bound_checked = True
    else:
        violation = 0.0
        bound_checked = False

    if mixture.dim == 1:
        angles = np.array([0.0, np.pi])
    else:
        angles = np.linspace(0.0, np.pi, angle_count)
    overlap = min(
        _cusp_integrand_minimum(mixture, a, sample_count) for a in angles
    )

    degenerate = mixture.dim == 1 and bool(
        np.all(np.isclose(mixture.masses, mixture.masses[0]))
    )
    return HypothesesReport(
        symmetric=symmetric,
        asymmetric_pairs=pairs,
        upper_bound_checked=bound_checked,
        upper_bound_violation=violation,
        cusp_constant=overlap,
        cusp_positive=overlap > 0.0,
        degenerate_equal_mass_1d=degenerate,
    )


def mixture_fingerprint(mixture: Mixture) -> str:
    """Stable hex digest of the physical parameters, for cache validation."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(mixture.masses).tobytes())
    h.update(np.ascontiguousarray(mixture.kinetic_constants).tobytes())
    h.update(np.float64(mixture.gamma).tobytes())
    h.update(mixture.angular_profile.encode())
    h.update(np.float64(mixture.profile_constant).tobytes())
    h.update(np.int64(mixture.dim).tobytes())
    return h.hexdigest()
