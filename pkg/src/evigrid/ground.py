"""Ground surface estimation: uniform bicubic B-spline height field fit to a point cloud.

The fit is a regularized linear least-squares problem over a lattice of control
heights. A first pass is seeded with the lowest points of each coarse cell so
obstacles do not drag the surface upward; subsequent passes re-select points
close to the previous surface and refit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class DegenerateFitError(ValueError):
    """Raised when the normal equations stay rank-deficient after regularization."""


@dataclass(frozen=True)
class GroundFitConfig:
    knot_spacing: float = 5.0
    tikhonov_lambda: float = 1e-2
    classify_threshold: float = 0.3
    refit_iterations: int = 2
    initial_percentile: float = 0.2

    def __post_init__(self) -> None:
        if self.knot_spacing <= 0 or self.tikhonov_lambda <= 0:
            raise ValueError("knot_spacing and tikhonov_lambda must be positive")
        if self.classify_threshold <= 0 or self.initial_percentile <= 0:
            raise ValueError("classify_threshold and initial_percentile must be positive")
        if self.refit_iterations < 1:
            raise ValueError("refit_iterations must be >= 1")


@dataclass(frozen=True)
class GroundSurface:
    """Uniform bicubic B-spline height field.

    ``control`` has shape (nu, nv); axis 0 follows x, axis 1 follows y. The
    parametric domain [0, nu-3] x [0, nv-3] maps to world coordinates starting
    at (u_origin, v_origin) with ``knot_spacing`` meters per knot interval.
    Queries outside the domain are clamped (flat extension).
    """

    control: np.ndarray
    knot_spacing: float
    u_origin: float
    v_origin: float

    def __post_init__(self) -> None:
        c = np.asarray(self.control, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 4 or c.shape[1] < 4:
            raise ValueError(f"control grid must be at least 4x4, got {c.shape}")
        object.__setattr__(self, "control", c)

    @classmethod
    def flat(cls, height: float = 0.0, knot_spacing: float = 5.0,
             u_origin: float = -40.0, v_origin: float = -40.0, n: int = 20) -> "GroundSurface":
        return cls(np.full((n, n), float(height)), knot_spacing, u_origin, v_origin)


def _cubic_basis(t: np.ndarray) -> np.ndarray:
    """The four uniform cubic B-spline weights for local parameter t in [0, 1]."""
    t = np.asarray(t, dtype=np.float64)
    t2 = t * t
    t3 = t2 * t
    w = np.stack([
        1.0 - 3.0 * t + 3.0 * t2 - t3,
        4.0 - 6.0 * t2 + 3.0 * t3,
        1.0 + 3.0 * t + 3.0 * t2 - 3.0 * t3,
        t3,
    ], axis=-1)
    return w / 6.0


def _span_params(coord, origin: float, spacing: float, n_ctrl: int):
    """Clamped span index and local parameter for one axis."""
    u = (np.asarray(coord, dtype=np.float64) - origin) / spacing
    u = np.clip(u, 0.0, n_ctrl - 3)
    span = np.minimum(np.floor(u), n_ctrl - 4).astype(np.int64)
    t = u - span
    return span, t


def eval_ground(surface: GroundSurface, x, y) -> np.ndarray:
    """Spline height at world (x, y); accepts scalars or broadcastable arrays."""
    nu, nv = surface.control.shape
    su, tu = _span_params(x, surface.u_origin, surface.knot_spacing, nu)
    sv, tv = _span_params(y, surface.v_origin, surface.knot_spacing, nv)
    su, sv = np.broadcast_arrays(su, sv)
    wu = _cubic_basis(np.broadcast_to(tu, su.shape))
    wv = _cubic_basis(np.broadcast_to(tv, sv.shape))
    offs = np.arange(4)
    flat = ((su[..., None, None] + offs[:, None]) * nv
            + (sv[..., None, None] + offs[None, :])).reshape(su.shape + (16,))
    weights = (wu[..., :, None] * wv[..., None, :]).reshape(su.shape + (16,))
    out = np.einsum("...k,...k->...", weights, surface.control.ravel()[flat])
    if out.ndim == 0:
        return float(out)
    return out


def _basis_matrix(coords: np.ndarray, origin: float, spacing: float, n_ctrl: int) -> np.ndarray:
    """Dense (len(coords), n_ctrl) matrix of basis weights along one axis."""
    span, t = _span_params(coords, origin, spacing, n_ctrl)
    weights = _cubic_basis(t)
    out = np.zeros((len(coords), n_ctrl))
    rows = np.arange(len(coords))[:, None]
    out[rows, span[:, None] + np.arange(4)] = weights
    return out


def eval_ground_on_grid(surface: GroundSurface, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Heights over an axis-aligned query lattice, shape (len(ys), len(xs)).

    Exploits the tensor-product separability, so it is far cheaper than
    pointwise evaluation over a meshgrid.
    """
    nu, nv = surface.control.shape
    bu = _basis_matrix(np.asarray(xs, dtype=np.float64), surface.u_origin,
                       surface.knot_spacing, nu)
    bv = _basis_matrix(np.asarray(ys, dtype=np.float64), surface.v_origin,
                       surface.knot_spacing, nv)
    return bv @ surface.control.T @ bu.T


def _design_matrix(x, y, surface_shape, u_origin, v_origin, spacing) -> sp.csr_matrix:
    nu, nv = surface_shape
    su, tu = _span_params(x, u_origin, spacing, nu)
    sv, tv = _span_params(y, v_origin, spacing, nv)
    wu = _cubic_basis(tu)
    wv = _cubic_basis(tv)
    n_pts = len(su)
    weights = (wu[:, :, None] * wv[:, None, :]).reshape(n_pts, 16)
    cols = ((su[:, None, None] + np.arange(4)[None, :, None]) * nv
            + (sv[:, None, None] + np.arange(4)[None, None, :])).reshape(n_pts, 16)
    rows = np.repeat(np.arange(n_pts), 16)
    return sp.csr_matrix((weights.ravel(), (rows, cols.ravel())), shape=(n_pts, nu * nv))


def _second_difference(nu: int, nv: int) -> sp.csr_matrix:
    """Stacked second-difference operators along both lattice axes."""
    def d2(n: int) -> sp.csr_matrix:
        if n < 3:
            return sp.csr_matrix((0, n))
        e = np.ones(n - 2)
        return sp.diags([e, -2 * e, e], [0, 1, 2], shape=(n - 2, n)).tocsr()

    du = sp.kron(d2(nu), sp.identity(nv, format="csr"), format="csr")
    dv = sp.kron(sp.identity(nu, format="csr"), d2(nv), format="csr")
    return sp.vstack([du, dv], format="csr")


def _solve_surface(x, y, z, nu, nv, u0, v0, cfg: GroundFitConfig) -> GroundSurface:
    a = _design_matrix(x, y, (nu, nv), u0, v0, cfg.knot_spacing)
    d = _second_difference(nu, nv)
    normal = (a.T @ a + cfg.tikhonov_lambda * (d.T @ d)).tocsc()
    rhs = a.T @ np.asarray(z, dtype=np.float64)
    try:
        coeffs = spla.spsolve(normal, rhs)
    except RuntimeError as exc:
        raise DegenerateFitError(f"ground fit normal equations singular: {exc}") from exc
    if not np.all(np.isfinite(coeffs)):
        raise DegenerateFitError("ground fit produced non-finite control heights")
    return GroundSurface(coeffs.reshape(nu, nv), cfg.knot_spacing, u0, v0)


def _percentile_seed(x, y, z, cfg: GroundFitConfig) -> np.ndarray:
    """Indices of the lowest-z fraction of points within each coarse cell."""
    ci = np.floor((x - x.min()) / cfg.knot_spacing).astype(np.int64)
    cj = np.floor((y - y.min()) / cfg.knot_spacing).astype(np.int64)
    key = ci * (cj.max() + 1) + cj
    order = np.lexsort((z, key))
    sorted_key = key[order]
    starts = np.flatnonzero(np.r_[True, sorted_key[1:] != sorted_key[:-1]])
    counts = np.diff(np.r_[starts, len(sorted_key)])
    keep = []
    for s, c in zip(starts, counts):
        k = max(1, int(np.ceil(c * cfg.initial_percentile)))
        keep.append(order[s:s + k])
    return np.concatenate(keep)


def fit_ground(cloud, cfg: GroundFitConfig = GroundFitConfig()) -> GroundSurface:
    """Fit the spline height field to a cloud, iteratively re-selecting ground points."""
    if len(cloud) == 0:
        raise ValueError("cannot fit ground surface to an empty cloud")
    x, y, z = cloud.xyz[:, 0], cloud.xyz[:, 1], cloud.xyz[:, 2]

    extent_u = max(x.max() - x.min(), 1e-9)
    extent_v = max(y.max() - y.min(), 1e-9)
    nu = max(4, int(np.ceil(extent_u / cfg.knot_spacing)) + 3)
    nv = max(4, int(np.ceil(extent_v / cfg.knot_spacing)) + 3)
    u0, v0 = float(x.min()), float(y.min())

    seed = _percentile_seed(x, y, z, cfg)
    surface = None
    for _ in range(cfg.refit_iterations):
        if len(seed) < 16:
            raise ValueError(f"only {len(seed)} seed points after selection, need >= 16")
        surface = _solve_surface(x[seed], y[seed], z[seed], nu, nv, u0, v0, cfg)
        residual = np.abs(z - eval_ground(surface, x, y))
        seed = np.flatnonzero(residual <= cfg.classify_threshold)
    return surface


def classify_points(cloud, surface: GroundSurface, threshold: float = 0.3):
    """Partition cloud indices into (ground, non_ground) by height over the surface."""
    dz = np.abs(cloud.xyz[:, 2] - eval_ground(surface, cloud.xyz[:, 0], cloud.xyz[:, 1]))
    ground = np.flatnonzero(dz <= threshold)
    non_ground = np.flatnonzero(dz > threshold)
    return ground, non_ground
