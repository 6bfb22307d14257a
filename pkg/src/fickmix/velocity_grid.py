"""Truncated velocity-space grid, quadrature, and weighted inner products."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

#: Default half-width multiplier: R = DEFAULT_RADIUS_SCALE / sqrt(min mass).
DEFAULT_RADIUS_SCALE = 6.0

#: Tolerance (in index units) for points sitting on the box boundary.
_EDGE_TOL = 1e-9


@dataclass(frozen=True)
class VelocityGrid:
    """Uniform tensor grid on [-r_max, r_max]^dim with trapezoidal weights.

    Node q = i0 * points_per_axis + i1 (dim 2) walks the first coordinate
    slowest; the node set is symmetric under v -> -v because the point count
    per axis is even.  Angular nodes discretize the unit sphere.
    """

    dim: int
    r_max: float
    points_per_axis: int
    nodes: np.ndarray
    weights: np.ndarray
    angular_nodes: np.ndarray
    angular_weights: np.ndarray

    @property
    def count(self) -> int:
        return self.nodes.shape[0]

    @property
    def spacing(self) -> float:
        return 2.0 * self.r_max / (self.points_per_axis - 1)

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(-self.r_max, self.r_max, self.points_per_axis)


def default_r_max(masses) -> float:
    """Half-width putting the lightest species' Gaussian tail below 1e-7."""
    return DEFAULT_RADIUS_SCALE / np.sqrt(float(np.min(masses)))


def build_grid(dim: int, r_max: float, points_per_axis: int,
               angular_count: int = 16) -> VelocityGrid:
    """Build the velocity grid and the angular quadrature.

    ``points_per_axis`` must be even (preserves the v -> -v node symmetry)
    and in dimension 2 ``angular_count`` must be a multiple of 4 so the
    angular set is closed under the reflections that make odd and
    cross-coordinate moments cancel exactly.
    """
    if dim not in (1, 2):
        raise ValueError("dim must be 1 or 2")
    if r_max <= 0.0:
        raise ValueError("r_max must be positive")
    if points_per_axis < 8:
        raise ValueError("need at least 8 points per axis")
    if points_per_axis % 2 != 0:
        raise ValueError("points_per_axis must be even (v -> -v symmetry)")
    axis = np.linspace(-r_max, r_max, points_per_axis)
    spacing = 2.0 * r_max / (points_per_axis - 1)
    line = np.full(points_per_axis, spacing)
    line[0] = line[-1] = 0.5 * spacing

    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    nodes = np.stack([g.ravel() for g in mesh], axis=-1)
    weights = np.ones(nodes.shape[0])
    shaped = weights.reshape((points_per_axis,) * dim)
    for ax in range(dim):
        form = [1] * dim
        form[ax] = points_per_axis
        shaped *= line.reshape(form)
    weights = shaped.ravel()

    if dim == 1:
        angular_nodes = np.array([[1.0], [-1.0]])
        angular_weights = np.array([1.0, 1.0])
    else:
        if angular_count < 8:
            raise ValueError("need at least 8 angular nodes")
        if angular_count % 4 != 0:
            raise ValueError(
                "angular_count must be a multiple of 4 "
                "(reflection closure of the angular set)"
            )
        theta = (np.arange(angular_count) + 0.5) * (2.0 * np.pi / angular_count)
        angular_nodes = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        angular_weights = np.full(angular_count, 2.0 * np.pi / angular_count)

    return VelocityGrid(
        dim=dim,
        r_max=float(r_max),
        points_per_axis=int(points_per_axis),
        nodes=nodes,
        weights=weights,
        angular_nodes=angular_nodes,
        angular_weights=angular_weights,
    )


def integrate(values: np.ndarray, grid: VelocityGrid) -> np.ndarray:
    """Quadrature over the velocity box along the last axis."""
    return np.asarray(values) @ grid.weights


def weighted_inner(f, g, M, grid: VelocityGrid) -> float:
    """Weighted inner product sum_i int f_i g_i / M_i dv on node values."""
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    M = np.asarray(M, dtype=float)
    if f.shape != g.shape or f.shape != M.shape:
        raise ValueError("f, g and M must share the shape (N, Q)")
    if f.ndim != 2 or f.shape[1] != grid.count:
        raise ValueError("fields must have shape (N, Q) matching the grid")
    if np.any(M <= 0.0):
        raise ValueError("weight field must be strictly positive")
    return float(np.einsum("iq,iq,q->", f, g / M, grid.weights))


def lattice_interpolation(points: np.ndarray, grid: VelocityGrid):
    """Multilinear interpolation data for arbitrary points in the box.

    Parameters
    ----------
    points : ndarray, shape (K, dim)
        Target locations.
    grid : VelocityGrid

    Returns
    -------
    indices : int ndarray, shape (K, 2**dim)
        Flattened node indices of the surrounding cell corners.
    weights : ndarray, shape (K, 2**dim)
        Non-negative convex weights (each row sums to 1 for inside points).
    inside : bool ndarray, shape (K,)
        True where the point lies in the closed box; rows for outside
        points are zeroed.
    """
    m = grid.points_per_axis
    t = (np.asarray(points) + grid.r_max) / grid.spacing
    inside = np.all((t >= -_EDGE_TOL) & (t <= m - 1 + _EDGE_TOL), axis=-1)
    base = np.clip(np.floor(t).astype(np.int64), 0, m - 2)
    frac = np.clip(t - base, 0.0, 1.0)

    corners = 2 ** grid.dim
    indices = np.zeros((t.shape[0], corners), dtype=np.int64)
    weights = np.ones((t.shape[0], corners))
    for c, offsets in enumerate(itertools.product((0, 1), repeat=grid.dim)):
        flat = np.zeros(t.shape[0], dtype=np.int64)
        for ax, off in enumerate(offsets):
            flat = flat * m + (base[:, ax] + off)
            weights[:, c] *= frac[:, ax] if off else (1.0 - frac[:, ax])
        indices[:, c] = flat
    indices[~inside] = 0
    weights[~inside] = 0.0
    return indices, weights, inside
