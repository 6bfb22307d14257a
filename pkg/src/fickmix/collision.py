"""Discrete bi-species collision operators on the velocity lattice.

The collision sphere is discretized with the grid's angular nodes.  Scattered
velocities generally fall off the lattice; their values are obtained by
multilinear interpolation of the ratio F / M (Gaussian-relative values), which
keeps the Maxwellian exactly stationary and the discrete entropy sign exact.
Triples whose scattered velocities leave the box are dropped gain and loss
together, and the lost share of the collision measure is recorded.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .mixture import Mixture, maxwellian_field, mixture_fingerprint
from .velocity_grid import VelocityGrid, lattice_interpolation

log = logging.getLogger(__name__)

#: Magic tag of the pair-kernel cache files.
CACHE_MAGIC = "FICKQ1"


def scattered_velocities(mass_i: float, mass_j: float, v, v_star, sigma):
    """Elastic two-body scattering of (v, v_star) in direction sigma.

    Conserves pair momentum ``m_i v + m_j v_star`` and pair kinetic energy
    exactly; sigma parametrizes the sphere of admissible outcomes.  Arrays
    broadcast over leading axes; the last axis is the velocity component.
    """
    v = np.asarray(v, dtype=float)
    v_star = np.asarray(v_star, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    total = mass_i + mass_j
    center = mass_i * v + mass_j * v_star
    radius = np.linalg.norm(v - v_star, axis=-1)[..., None]
    out = (center + mass_j * radius * sigma) / total
    out_star = (center - mass_i * radius * sigma) / total
    return out, out_star


class PairGeometry(NamedTuple):
    """Vectorized collision geometry for one species pair and one angle."""

    kernel: np.ndarray        # (Q, Q) angular-weighted kernel, masked
    idx_out: np.ndarray       # (Q*Q, 2**dim) interpolation targets for v'
    wgt_out: np.ndarray
    idx_out_star: np.ndarray  # same for v'_*
    wgt_out_star: np.ndarray
    inside: np.ndarray        # (Q, Q) bool, both targets in the box


def pair_geometry(mixture: Mixture, grid: VelocityGrid, i: int, j: int,
                  a: int) -> PairGeometry:
    """Geometry of (i, j) collisions at angular node a.

    The returned kernel already contains the kinetic constant, the relative
    speed factor, the angular profile and the angular weight.  It is zeroed
    on the diagonal v = v_star (the collision is the identity there) and on
    triples whose scattered velocities leave the truncation box.
    """
    nodes = grid.nodes
    q = grid.count
    mi = float(mixture.masses[i])
    mj = float(mixture.masses[j])
    sigma = grid.angular_nodes[a]

    rel = nodes[:, None, :] - nodes[None, :, :]
    speed = np.linalg.norm(rel, axis=-1)
    cos = np.divide(rel @ sigma, speed, out=np.ones_like(speed),
                    where=speed > 0.0)

    out, out_star = scattered_velocities(
        mi, mj, nodes[:, None, :], nodes[None, :, :], sigma
    )
    idx_out, wgt_out, in_out = lattice_interpolation(
        out.reshape(q * q, grid.dim), grid
    )
    idx_os, wgt_os, in_os = lattice_interpolation(
        out_star.reshape(q * q, grid.dim), grid
    )
    inside = (in_out & in_os).reshape(q, q)

    if mixture.gamma == 0.0:
        speed_pow = np.ones_like(speed)
    else:
        speed_pow = speed ** mixture.gamma
    kernel = (
        float(mixture.kinetic_constants[i, j])
        * speed_pow
        * mixture.angular_b(cos)
        * grid.angular_weights[a]
    )
    kernel[~inside] = 0.0
    np.fill_diagonal(kernel, 0.0)
    return PairGeometry(kernel, idx_out, wgt_out, idx_os, wgt_os, inside)


@dataclass
class CollisionStencil:
    """Precomputed per-pair data for collision evaluation and linearization.

    ``k1[(i, j)]`` maps phi_j to the gain-minus-loss of collisions of a
    Maxwellian i against perturbation j; ``k2[(i, j)]`` maps phi_i for the
    perturbation-i-against-Maxwellian-j part.  Both use unit-concentration
    Maxwellians of the partner species, so the assembled linearized operator
    is exactly linear in the concentration vector.
    """

    mixture: Mixture
    grid: VelocityGrid
    k1: dict = field(default_factory=dict)
    k2: dict = field(default_factory=dict)
    truncation_loss: dict = field(default_factory=dict)

    def geometry(self, i: int, j: int, a: int) -> PairGeometry:
        return pair_geometry(self.mixture, self.grid, i, j, a)


def precompute_stencil(mixture: Mixture, grid: VelocityGrid) -> CollisionStencil:
    """Sweep collision geometry once per species pair and angular node.

    Builds the linearized pair kernels and the truncation-loss counters.

    Parameters
    ----------
    mixture : Mixture
    grid : VelocityGrid

    Returns
    -------
    CollisionStencil
        With ``k1``, ``k2`` filled for every ordered pair and
        ``truncation_loss[(i, j)]`` the fraction of the Gaussian-weighted
        collision measure dropped because scattered velocities left the box.

    Notes
    -----
    Cost is O(N^2 * A * Q^2) in time and O(N^2 * Q^2) in memory.  The
    kernels are reusable for any concentration vector; see
    :func:`save_stencil` / :func:`load_stencil` for on-disk caching.
    """
    nsp = mixture.species_count
    q = grid.count
    w = grid.weights
    mu = maxwellian_field(mixture, np.ones(nsp), grid.nodes)
    rows = np.repeat(np.arange(q, dtype=np.int64), q)

    stencil = CollisionStencil(mixture=mixture, grid=grid)
    for i in range(nsp):
        for j in range(nsp):
            k1 = np.zeros((q, q))
            k2 = np.zeros((q, q))
            kept = 0.0
            lost = 0.0
            for a in range(len(grid.angular_weights)):
                geom = pair_geometry(mixture, grid, i, j, a)
                gain = (w[None, :] * mu[j][None, :]) * geom.kernel
                flat = gain.ravel()

                scatter = rows[:, None] * q + geom.idx_out_star
                k1 += np.bincount(
                    scatter.ravel(),
                    weights=(flat[:, None] * geom.wgt_out_star).ravel(),
                    minlength=q * q,
                ).reshape(q, q)
                k1 -= gain

                scatter = rows[:, None] * q + geom.idx_out
                k2 += np.bincount(
                    scatter.ravel(),
                    weights=(flat[:, None] * geom.wgt_out).ravel(),
                    minlength=q * q,
                ).reshape(q, q)
                k2[np.diag_indices(q)] -= gain.sum(axis=1)

                pair_measure = np.outer(w * mu[i], w * mu[j])
                kept += (pair_measure * geom.kernel).sum()
                dropped = ~geom.inside
                np.fill_diagonal(dropped, False)
                if mixture.gamma == 0.0 and mixture.angular_profile == "constant":
                    # kernel value is uniform off the diagonal
                    lost += (
                        pair_measure[dropped].sum()
                        * float(mixture.kinetic_constants[i, j])
                        * grid.angular_weights[a]
                        * mixture.profile_constant
                    )
                else:
                    full = _unmasked_kernel(mixture, grid, i, j, a)
                    lost += (pair_measure * full)[dropped].sum()
            stencil.k1[(i, j)] = k1
            stencil.k2[(i, j)] = k2
            total = kept + lost
            stencil.truncation_loss[(i, j)] = lost / total if total > 0 else 0.0
            log.debug(
                "pair (%d, %d): truncation loss %.3e",
                i, j, stencil.truncation_loss[(i, j)],
            )
    return stencil


def _unmasked_kernel(mixture, grid, i, j, a):
    nodes = grid.nodes
    sigma = grid.angular_nodes[a]
    rel = nodes[:, None, :] - nodes[None, :, :]
    speed = np.linalg.norm(rel, axis=-1)
    cos = np.divide(rel @ sigma, speed, out=np.ones_like(speed),
                    where=speed > 0.0)
    if mixture.gamma == 0.0:
        speed_pow = np.ones_like(speed)
    else:
        speed_pow = speed ** mixture.gamma
    kernel = (
        float(mixture.kinetic_constants[i, j])
        * speed_pow
        * mixture.angular_b(cos)
        * grid.angular_weights[a]
    )
    np.fill_diagonal(kernel, 0.0)
    return kernel


def _pair_collision(mixture, grid, i, j, phi_i, phi_j, mu):
    """Raw discrete Q_ij acting on Gaussian-relative values phi."""
    q = grid.count
    w = grid.weights
    out = np.zeros(q)
    loss_outer = phi_i[:, None] * phi_j[None, :]
    for a in range(len(grid.angular_weights)):
        geom = pair_geometry(mixture, grid, i, j, a)
        gain_i = (phi_i.ravel()[geom.idx_out] * geom.wgt_out).sum(axis=1)
        gain_j = (phi_j.ravel()[geom.idx_out_star] * geom.wgt_out_star).sum(axis=1)
        term = geom.kernel * (gain_i.reshape(q, q) * gain_j.reshape(q, q)
                              - loss_outer)
        out += term @ (w * mu[j])
    return mu[i] * out


def _conservation_defects(parts, mixture, grid, pair):
    """Mass, pair-momentum and pair-energy defects of corrected pair output."""
    w = grid.weights
    nodes = grid.nodes
    sq = np.sum(nodes * nodes, axis=-1)
    i, j = pair
    mi, mj = mixture.masses[i], mixture.masses[j]
    defects = [w @ parts[0]]
    if i != j:
        defects.append(w @ parts[1])
    for ax in range(grid.dim):
        mom = mi * (w @ (parts[0] * nodes[:, ax]))
        if i != j:
            mom += mj * (w @ (parts[1] * nodes[:, ax]))
        defects.append(mom)
    energy = mi * (w @ (parts[0] * sq))
    if i != j:
        energy += mj * (w @ (parts[1] * sq))
    defects.append(energy)
    return np.array(defects)


def _correct_pair(parts, mixture, grid, mu, pair):
    """Least-squares conservative correction of one collision pair.

    Removes the interpolation-induced defect in the discrete mass, momentum
    and energy balances by subtracting the minimal-norm (in the Gaussian-
    weighted metric) combination of moment representers.
    """
    w = grid.weights
    nodes = grid.nodes
    sq = np.sum(nodes * nodes, axis=-1)
    i, j = pair
    mi, mj = mixture.masses[i], mixture.masses[j]

    reps = []
    reps.append((mu[i], np.zeros_like(mu[j]) if i != j else None))
    if i != j:
        reps.append((np.zeros_like(mu[i]), mu[j]))
    for ax in range(grid.dim):
        first = mi * mu[i] * nodes[:, ax]
        second = mj * mu[j] * nodes[:, ax] if i != j else None
        reps.append((first, second))
    first = mi * mu[i] * sq
    second = mj * mu[j] * sq if i != j else None
    reps.append((first, second))

    def inner(u, v):
        total = w @ (u[0] * v[0] / mu[i])
        if i != j:
            total += w @ (u[1] * v[1] / mu[j])
        return total

    size = len(reps)
    gram = np.empty((size, size))
    for r in range(size):
        for s in range(size):
            gram[r, s] = inner(reps[r], reps[s])
    defects = _conservation_defects(parts, mixture, grid, pair)
    coef = np.linalg.solve(gram, defects)
    corrected = [parts[0].copy()]
    if i != j:
        corrected.append(parts[1].copy())
    for c, rep in zip(coef, reps):
        corrected[0] -= c * rep[0]
        if i != j:
            corrected[1] -= c * rep[1]
    return corrected


def apply_Q(F, mixture: Mixture, grid: VelocityGrid,
            stencil: CollisionStencil | None = None, *,
            correct: bool = True, pairwise: bool = False):
    """Evaluate the discrete collision operators on a distribution stack.

    Parameters
    ----------
    F : ndarray, shape (N, Q)
        Non-negative node values of the species distributions.
    mixture, grid : model and discretization.
    stencil : CollisionStencil, optional
        Only used for its geometry; evaluation streams over angular nodes.
    correct : bool
        Apply the pairwise conservative correction (default).  The corrected
        output satisfies the discrete mass, momentum and energy balances to
        solver precision.
    pairwise : bool
        Also return the per-ordered-pair contributions.

    Returns
    -------
    ndarray, shape (N, Q)
        Species collision terms Q_i = sum_j Q_ij.
    dict, optional
        ``{(i, j): Q_ij}`` when ``pairwise`` is requested.
    """
    F = np.asarray(F, dtype=float)
    nsp = mixture.species_count
    if F.shape != (nsp, grid.count):
        raise ValueError("F must have shape (N, Q)")
    if np.any(F < 0.0):
        raise ValueError("distribution values must be non-negative")
    mu = maxwellian_field(mixture, np.ones(nsp), grid.nodes)
    phi = F / mu

    pairs = {}
    for i in range(nsp):
        for j in range(nsp):
            pairs[(i, j)] = _pair_collision(mixture, grid, i, j,
                                            phi[i], phi[j], mu)
    if correct:
        for i in range(nsp):
            fixed = _correct_pair([pairs[(i, i)]], mixture, grid, mu, (i, i))
            pairs[(i, i)] = fixed[0]
            for j in range(i + 1, nsp):
                fixed = _correct_pair([pairs[(i, j)], pairs[(j, i)]],
                                      mixture, grid, mu, (i, j))
                pairs[(i, j)], pairs[(j, i)] = fixed

    total = np.zeros((nsp, grid.count))
    for (i, _), value in pairs.items():
        total[i] += value
    if pairwise:
        return total, pairs
    return total


def entropy_production(F, mixture: Mixture, grid: VelocityGrid,
                       stencil: CollisionStencil | None = None) -> float:
    """Discrete entropy dissipation of the collision operators; always <= 0.

    Each quadrature triple contributes ``-(G' - G) log(G'/G)`` with G the
    product of distribution values and G' its interpolated scattered
    counterpart, which is non-positive term by term for positive F.
    """
    F = np.asarray(F, dtype=float)
    nsp = mixture.species_count
    if F.shape != (nsp, grid.count):
        raise ValueError("F must have shape (N, Q)")
    if np.any(F <= 0.0):
        raise ValueError("entropy requires strictly positive node values")
    mu = maxwellian_field(mixture, np.ones(nsp), grid.nodes)
    phi = F / mu
    w = grid.weights
    q = grid.count

    total = 0.0
    for i in range(nsp):
        for j in range(nsp):
            loss = phi[i][:, None] * phi[j][None, :]
            for a in range(len(grid.angular_weights)):
                geom = pair_geometry(mixture, grid, i, j, a)
                gi = (phi[i].ravel()[geom.idx_out]
                      * geom.wgt_out).sum(axis=1).reshape(q, q)
                gj = (phi[j].ravel()[geom.idx_out_star]
                      * geom.wgt_out_star).sum(axis=1).reshape(q, q)
                gain = gi * gj
                active = geom.kernel > 0.0
                ratio = np.ones_like(gain)
                np.divide(gain, loss, out=ratio, where=active)
                diff = np.where(active, gain - loss, 0.0)
                measure = np.outer(w * mu[i], w * mu[j]) * geom.kernel
                total -= 0.25 * np.sum(measure * diff * np.log(ratio))
    return float(total)


def pair_weak_form(F, psi_i, psi_j, mixture: Mixture, grid: VelocityGrid,
                   i: int, j: int):
    """Both sides of the symmetrized weak form for the pair (i, j).

    Returns ``(moment_side, sphere_side)`` where the moment side integrates
    the raw collision outputs against the test functions and the sphere side
    evaluates the equivalent collision-sphere expression directly.  The two
    agree up to interpolation error.
    """
    F = np.asarray(F, dtype=float)
    mu = maxwellian_field(mixture, np.ones(mixture.species_count), grid.nodes)
    phi = F / mu
    w = grid.weights
    q = grid.count

    q_ij = _pair_collision(mixture, grid, i, j, phi[i], phi[j], mu)
    q_ji = _pair_collision(mixture, grid, j, i, phi[j], phi[i], mu)
    moment_side = w @ (q_ij * psi_i) + w @ (q_ji * psi_j)

    sphere_side = 0.0
    f_outer = (mu[i] * phi[i])[:, None] * (mu[j] * phi[j])[None, :]
    base = psi_i[:, None] + psi_j[None, :]
    for a in range(len(grid.angular_weights)):
        geom = pair_geometry(mixture, grid, i, j, a)
        pi_out = (psi_i.ravel()[geom.idx_out]
                  * geom.wgt_out).sum(axis=1).reshape(q, q)
        pj_out = (psi_j.ravel()[geom.idx_out_star]
                  * geom.wgt_out_star).sum(axis=1).reshape(q, q)
        integrand = geom.kernel * f_outer * (pi_out + pj_out - base)
        sphere_side += w @ integrand @ w
    return float(moment_side), float(sphere_side)


def save_stencil(stencil: CollisionStencil, path) -> None:
    """Write the pair kernels and loss counters with a validation header."""
    path = Path(path)
    grid = stencil.grid
    payload = {
        "magic": np.array(CACHE_MAGIC),
        "dim": np.array(grid.dim),
        "points_per_axis": np.array(grid.points_per_axis),
        "r_max": np.array(grid.r_max),
        "angular_count": np.array(len(grid.angular_weights)),
        "fingerprint": np.array(mixture_fingerprint(stencil.mixture)),
    }
    for (i, j), k in stencil.k1.items():
        payload[f"k1_{i}_{j}"] = k
    for (i, j), k in stencil.k2.items():
        payload[f"k2_{i}_{j}"] = k
    loss = np.zeros((stencil.mixture.species_count,) * 2)
    for (i, j), value in stencil.truncation_loss.items():
        loss[i, j] = value
    payload["truncation_loss"] = loss
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **payload)


def load_stencil(path, mixture: Mixture, grid: VelocityGrid) -> CollisionStencil:
    """Load cached pair kernels; refuse mismatched headers.

    Raises ValueError when the file does not match the requested mixture
    and grid (or is not a kernel cache at all).
    """
    path = Path(path)
    with np.load(path, allow_pickle=False) as data:
        if "magic" not in data or str(data["magic"]) != CACHE_MAGIC:
            raise ValueError(f"{path} is not a collision kernel cache")
        header = {
            "dim": grid.dim,
            "points_per_axis": grid.points_per_axis,
            "angular_count": len(grid.angular_weights),
        }
        for key, expected in header.items():
            if int(data[key]) != expected:
                raise ValueError(
                    f"cache {path} was built for {key}={int(data[key])}, "
                    f"requested {expected}"
                )
        if abs(float(data["r_max"]) - grid.r_max) > 1e-12 * grid.r_max:
            raise ValueError(f"cache {path} was built for a different r_max")
        if str(data["fingerprint"]) != mixture_fingerprint(mixture):
            raise ValueError(f"cache {path} was built for a different mixture")
        stencil = CollisionStencil(mixture=mixture, grid=grid)
        nsp = mixture.species_count
        loss = data["truncation_loss"]
        for i in range(nsp):
            for j in range(nsp):
                stencil.k1[(i, j)] = data[f"k1_{i}_{j}"]
                stencil.k2[(i, j)] = data[f"k2_{i}_{j}"]
                stencil.truncation_loss[(i, j)] = float(loss[i, j])
    return stencil
