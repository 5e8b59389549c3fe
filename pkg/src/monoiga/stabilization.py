"""Spline Upwind stabilization machinery.

The stabilizer adds scaled k-th time-derivative Gram matrices, switched on by
a residual indicator sampled on the Greville grid, compressed to low rank and
interpolated piecewise linearly back onto the domain.
"""

import warnings

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator

from .assembly import QuadratureRule, SpatialQuadratureData, field_on_grid
from .bspline import KnotVector, SplineSpace
from .fields import evaluate_field

__all__ = [
    "StabilizationError",
    "StabilizationWeights",
    "ResidualIndicator",
    "LowRankIndicator",
    "StabilizationMatrices",
    "compute_tau",
    "strong_residual",
    "compute_theta",
    "lowrank_factorize",
    "assemble_stabilization",
    "write_theta_csv",
]

TAU_RESIDUAL_LIMIT = 1e-8


class StabilizationError(RuntimeError):
    """Raised when the stabilizer cannot be constructed reliably."""


def _max_smoothness_knots(breakpoints, degree):
    interior = np.asarray(breakpoints, dtype=float)[1:-1]
    return np.concatenate(
        [np.zeros(degree + 1), interior, np.ones(degree + 1)]
    )


class StabilizationWeights:
    """Upwind weight functions, one per time-derivative order.

    The weight of order ``k`` is a spline of degree ``p_t - k`` with maximal
    smoothness on the temporal breakpoints, stored in parametric form (the
    physical weight rescales by powers of the final time, which cancel in the
    assembled Gram matrices).
    """

    def __init__(self, time_space, spaces, coeffs, residual):
        self.time_space = time_space
        self.degree = time_space.degree
        self.spaces = tuple(spaces)
        self.coeffs = [np.asarray(c, dtype=float) for c in coeffs]
        self.residual = float(residual)

    def evaluate(self, k, points):
        """Values of the order-``k`` weight (1-based) at parametric points."""
        if not 1 <= k <= self.degree:
            raise ValueError("weight order %d not in [1, %d]" % (k, self.degree))
        C = self.spaces[k - 1].collocation_matrix(np.asarray(points, float), 0)
        return np.asarray(C @ self.coeffs[k - 1]).reshape(-1)

    def min_values(self, samples_per_element=8):
        """Minimum of each weight on a sample grid (sign diagnostic)."""
        bp = self.time_space.breakpoints
        pts = np.concatenate(
            [
                np.linspace(a, b, samples_per_element, endpoint=False)
                for a, b in zip(bp[:-1], bp[1:])
            ]
            + [np.array([1.0])]
        )
        return np.array(
            [self.evaluate(k, pts).min() for k in range(1, self.degree + 1)]
        )


def compute_tau(time_space):
    """Solve the orthogonality conditions for the upwind weight functions.

    For the constrained temporal basis (first function removed), the weights
    are chosen so every near-diagonal advection entry is cancelled by the sum
    of weighted k-th derivative Gram entries.  The stacked conditions are
    solved as one dense least-squares system; the relative residual is kept
    as a diagnostic and must not exceed ``1e-8``.
    """
    p = time_space.degree
    if p < 1:
        raise ValueError("temporal degree must be >= 1")
    nt = time_space.dimension - 1
    if nt < 2:
        raise ValueError("need at least two constrained temporal functions")
    spaces = [
        SplineSpace(KnotVector(_max_smoothness_knots(time_space.breakpoints, p - k), p - k))
        for k in range(1, p + 1)
    ]
    rule = QuadratureRule.for_space(time_space, npoints=2 * p)
    pts = rule.points
    w = rule.flat_weights
    basis = [
        np.asarray(time_space.collocation_matrix(pts, k).toarray())
        for k in range(0, p + 1)
    ]
    phis = [s.collocation_matrix(pts, 0).toarray() for s in spaces]
    dims = [s.dimension for s in spaces]
    offsets = np.concatenate([[0], np.cumsum(dims)])

    # Conditions over all near-diagonal pairs of the full temporal basis:
    # this makes the system exactly square; the conditions restricted to the
    # constrained basis (first function removed) are a subset.
    n_full = time_space.dimension
    rows = []
    rhs = []
    for i in range(n_full - 1):
        rmax = min(p, n_full - 1 - i)
        for ell in range(1, rmax + 1):
            j = i + ell
            row = np.empty(offsets[-1])
            for k in range(1, p + 1):
                pair = w * basis[k][:, j] * basis[k][:, i]
                row[offsets[k - 1] : offsets[k]] = pair @ phis[k - 1]
            rows.append(row)
            rhs.append(-np.sum(w * basis[1][:, j] * basis[0][:, i]))
    G = np.array(rows)
    b = np.array(rhs)
    # Column equilibration: the weight of order k scales like h^(1-2k), so
    # the raw least-squares problem is badly conditioned on fine meshes.
    col = np.linalg.norm(G, axis=0)
    col[col == 0.0] = 1.0
    sol, *_ = np.linalg.lstsq(G / col, b, rcond=None)
    sol = sol / col
    scale = max(np.max(np.abs(b)), 1e-300)
    residual = np.max(np.abs(G @ sol - b)) / scale
    if residual > TAU_RESIDUAL_LIMIT:
        raise StabilizationError(
            "upwind weight conditions not satisfied (residual %.3e)" % residual
        )
    coeffs = [sol[offsets[k] : offsets[k + 1]] for k in range(p)]
    return StabilizationWeights(time_space, spaces, coeffs, residual)


def strong_residual(problem, u, w, points):
    """Pointwise strong residual of the potential equation at the iterates.

    ``points`` are parametric space-time points; the Laplacian is pulled back
    to physical coordinates through the inverse Jacobian and the Hessian
    chain rule.
    """
    geo = problem.geometry
    st = problem.space
    data = evaluate_field(
        st, geo, u, points, time_derivative=True, laplacian=True
    )
    w_val = evaluate_field(st, geo, w, points)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    d = st.num_spatial_dims
    x = geo.evaluate(points[:, :d])
    t = points[:, d] * geo.final_time
    uv = data["value"]
    res = (
        problem.C_m * data["dt"]
        - problem.D * data["laplacian"]
        + problem.c1 * uv * (uv - problem.a) * (uv - 1.0)
        + problem.c2 * uv * w_val
    )
    if problem.source is not None:
        res = res - np.asarray(problem.source(x, t), dtype=float).reshape(-1)
    return res


class ResidualIndicator:
    """Clamped residual-to-solution-scale ratios on the Greville grid.

    ``values`` is the ``N_t x N_s`` matrix of indicator entries (rows indexed
    by the constrained temporal Greville abscissae, columns colexicographic
    over the spatial Greville grid); every entry lies in [0, 1].
    """

    def __init__(self, values, time_greville, spatial_grevilles, spatial_shape):
        self.values = np.asarray(values, dtype=float)
        self.time_greville = np.asarray(time_greville, dtype=float)
        self.spatial_grevilles = [np.asarray(g, dtype=float) for g in spatial_grevilles]
        self.spatial_shape = tuple(spatial_shape)

    @property
    def max(self):
        return float(self.values.max(initial=0.0))


class _ResidualGrid:
    """Cached Gauss-grid data for sampling the strong residual."""

    def __init__(self, problem):
        st = problem.space
        geo = problem.geometry
        self.st = st
        self.geo = geo
        self.trule = QuadratureRule.for_space(st.time)
        self.tc0 = st.time_collocation(self.trule.points, 0)
        self.tc1 = st.time_collocation(self.trule.points, 1)
        self.srules = [QuadratureRule.for_space(s) for s in st.spatial]
        self.sc = [
            [s.collocation_matrix(r.points, o) for o in range(3)]
            for s, r in zip(st.spatial, self.srules)
        ]
        d = st.num_spatial_dims
        gdata = geo.grid_data([r.points for r in self.srules], order=2)
        jac = gdata["jac"]
        det = np.linalg.det(jac)
        self.jinv = np.linalg.inv(jac)
        self.metric = np.einsum("...ak,...bk->...ab", self.jinv, self.jinv)
        self.hess = gdata["hess"]
        self.xphys = gdata["x"].reshape(-1, d)
        self.tphys = self.trule.points * geo.final_time
        # element -> quadrature-block bookkeeping
        self.q_time = self.trule.npoints
        self.q_space = [r.npoints for r in self.srules]
        self.e_time = self.trule.num_cells
        self.e_space = [r.num_cells for r in self.srules]

    def spatial_field(self, coeffs, orders):
        st = self.st
        d = st.num_spatial_dims
        tmat = self.tc1 if orders[-1] == 1 else self.tc0
        smats = [self.sc[l][orders[l]] for l in range(d)]
        return field_on_grid(st, coeffs, tmat, smats)


def compute_theta(problem, u, w, grid=None):
    """Residual indicator on the Greville grid of the discrete space.

    The numerator of each entry is the maximum absolute strong residual over
    the Gauss points of every element intersecting the basis function's
    support extension; the denominator combines the global maxima of the
    iterate and of its time derivative.  Entries are clamped to [0, 1]; a
    vanishing denominator yields 0 where the numerator also vanishes and 1
    (with a warning) where it does not.
    """
    st = problem.space
    geo = problem.geometry
    if grid is None:
        grid = _ResidualGrid(problem)
    d = st.num_spatial_dims
    T = geo.final_time

    u_val = grid.spatial_field(u, [0] * d + [0])
    u_dtau = grid.spatial_field(u, [0] * d + [1])
    w_val = grid.spatial_field(w, [0] * d + [0])

    # Parametric first and second derivatives of the iterate.
    firsts = []
    for a in range(d):
        orders = [0] * (d + 1)
        orders[a] = 1
        firsts.append(grid.spatial_field(u, orders))
    grad_eta = np.stack(firsts, axis=-1)  # (Qt, Qs..., d)
    # Physical gradient g_c = sum_i jinv[i, c] deta_i u
    grad_phys = np.einsum("...ic,t...i->t...c", grid.jinv, grad_eta)

    lap = np.zeros_like(u_val)
    for a in range(d):
        for b in range(d):
            orders = [0] * (d + 1)
            orders[a] += 1
            orders[b] += 1
            second = grid.spatial_field(u, orders)
            corr = np.einsum("...c,t...c->t...", grid.hess[..., a, b], grad_phys)
            lap += grid.metric[None, ..., a, b] * (second - corr)

    res = (
        problem.C_m * (u_dtau / T)
        - problem.D * lap
        + problem.c1 * u_val * (u_val - problem.a) * (u_val - 1.0)
        + problem.c2 * u_val * w_val
    )
    if problem.source is not None:
        qt = grid.tphys.size
        qs = grid.xphys.shape[0]
        fv = np.empty((qt, qs))
        for i, t in enumerate(grid.tphys):
            fv[i] = np.asarray(
                problem.source(grid.xphys, np.full(qs, t)), dtype=float
            ).reshape(qs)
        res = res - fv.reshape(res.shape)

    absres = np.abs(res)
    denom = problem.C_m * (
        np.max(np.abs(u_val), initial=0.0) / T
        + np.max(np.abs(u_dtau), initial=0.0) / T
    )

    # Reduce Gauss points to per-element maxima: axes (E_t, E_d, ..., E_1).
    shape = [grid.e_time, grid.q_time]
    for l in reversed(range(d)):
        shape += [grid.e_space[l], grid.q_space[l]]
    emax = absres.reshape(shape)
    for ax in reversed(range(1, 2 * (d + 1), 2)):
        emax = emax.max(axis=ax)

    # Window the element maxima per direction.
    windows_t = [st.time.window_elements(c) for c in range(st.num_time)]
    out = np.stack([emax[a:b].max(axis=0) for a, b in windows_t], axis=0)
    for l in reversed(range(d)):
        axis = 1 + (d - 1 - l)
        space = st.spatial[l]
        wins = [space.window_elements(i) for i in range(space.dimension)]
        moved = np.moveaxis(out, axis, 0)
        moved = np.stack([moved[a:b].max(axis=0) for a, b in wins], axis=0)
        out = np.moveaxis(moved, 0, axis)

    numer = out.reshape(st.num_time, st.num_space)
    if denom > 0.0:
        theta = np.minimum(numer / denom, 1.0)
    else:
        # Zero denominator (quiescent iterate): activate fully where the
        # residual is genuinely nonzero; a relative floor keeps float-level
        # source tails from switching the whole domain on.
        theta = np.zeros_like(numer)
        hot = numer > 1e-12 * numer.max(initial=0.0)
        if np.any(hot) and numer.max(initial=0.0) > 0.0:
            warnings.warn(
                "residual indicator denominator vanished with a nonzero "
                "residual; activating the stabilizer fully there",
                RuntimeWarning,
                stacklevel=2,
            )
            theta[hot] = 1.0
    return ResidualIndicator(
        theta,
        st.time_greville(),
        [s.greville() for s in st.spatial],
        st.spatial_shape,
    )


class LowRankIndicator:
    """Truncated SVD factorization of the residual indicator.

    ``time_factors`` and ``space_factors`` have orthonormal columns; the
    retained singular values sit in ``weights``.  Piecewise-linear profiles
    interpolate the factor columns on the Greville grids.
    """

    def __init__(self, indicator, rank, time_factors, space_factors, weights, tol):
        self.indicator = indicator
        self.rank = int(rank)
        self.time_factors = time_factors
        self.space_factors = space_factors
        self.weights = weights
        self.tol = float(tol)

    def reconstruction(self):
        if self.rank == 0:
            return np.zeros_like(self.indicator.values)
        return (self.time_factors * self.weights) @ self.space_factors.T

    @property
    def relative_error(self):
        norm = np.linalg.norm(self.indicator.values)
        if norm == 0.0:
            return 0.0
        return float(
            np.linalg.norm(self.indicator.values - self.reconstruction()) / norm
        )

    def time_profile(self, r, points):
        """Piecewise-linear temporal profile of column ``r``."""
        return np.interp(
            np.asarray(points, dtype=float),
            self.indicator.time_greville,
            self.time_factors[:, r],
        )

    def space_profile(self, r, axes):
        """Multilinear spatial profile of column ``r`` on a tensor grid.

        ``axes`` lists query points per direction (direction 1 first);
        returns the grid of values in C order (direction d first).
        """
        grevs = self.indicator.spatial_grevilles
        grid = self.space_factors[:, r].reshape(self.indicator.spatial_shape)
        d = len(grevs)
        coords = tuple(grevs[l] for l in reversed(range(d)))
        interp = RegularGridInterpolator(
            coords, grid, method="linear", bounds_error=False, fill_value=None
        )
        mesh = np.meshgrid(*[axes[l] for l in reversed(range(d))], indexing="ij")
        pts = np.stack([m.reshape(-1) for m in mesh], axis=-1)
        lo = np.array([c[0] for c in coords])
        hi = np.array([c[-1] for c in coords])
        pts = np.clip(pts, lo, hi)
        return interp(pts).reshape(mesh[0].shape)


def lowrank_factorize(indicator, tol):
    """Smallest-rank truncated SVD meeting the relative Frobenius tolerance."""
    if not 0.0 < tol < 1.0:
        raise ValueError("tolerance must lie in (0, 1)")
    theta = indicator.values
    norm = np.linalg.norm(theta)
    if norm == 0.0:
        nt, ns = theta.shape
        return LowRankIndicator(
            indicator, 0, np.zeros((nt, 0)), np.zeros((ns, 0)), np.zeros(0), tol
        )
    U, s, Vt = np.linalg.svd(theta, full_matrices=False)
    tail = np.sqrt(np.concatenate([np.cumsum(s[::-1] ** 2)[::-1], [0.0]]))
    rank = int(np.argmax(tail <= tol * norm))
    rank = max(rank, 1)
    return LowRankIndicator(
        indicator, rank, U[:, :rank], Vt[:rank].T.copy(), s[:rank].copy(), tol
    )


class StabilizationMatrices:
    """Assembled stabilizer factors and the Kronecker terms they induce.

    For every retained rank ``r`` there is one weighted spatial mass matrix
    and, per derivative order ``k``, one temporal Gram matrix; the system
    operator receives the terms ``C_m sigma_r (S^t_{r,k} kron S^s_r)``.
    """

    def __init__(self, lowrank, time_mats, space_mats, capacitance):
        self.lowrank = lowrank
        self.time_mats = time_mats
        self.space_mats = space_mats
        self.capacitance = float(capacitance)

    @property
    def rank(self):
        return self.lowrank.rank

    def terms(self):
        out = []
        for r in range(self.rank):
            coef = self.capacitance * self.lowrank.weights[r]
            for St in self.time_mats[r]:
                out.append((coef, St, self.space_mats[r]))
        return out


def assemble_stabilization(tau, lowrank, space_time, geo, capacitance):
    """Assemble the low-rank stabilizer as Kronecker terms.

    Quadrature cells are subdivided at the Greville abscissae so the
    piecewise-linear indicator profiles are integrated on their smoothness
    cells.  All temporal integrals are parametric: the powers of the final
    time carried by the upwind weights cancel against the derivative and
    measure scalings.
    """
    st = space_time
    p = st.time.degree
    if lowrank.rank == 0:
        return StabilizationMatrices(lowrank, [], [], capacitance)

    tg = lowrank.indicator.time_greville
    trule = QuadratureRule.for_space(st.time, npoints=p + 2, extra_breaks=tg)
    tpts = trule.points
    tw = trule.flat_weights
    tau_vals = [tau.evaluate(k, tpts) for k in range(1, p + 1)]
    tcolloc = [st.time_collocation(tpts, k) for k in range(1, p + 1)]

    sdata = SpatialQuadratureData(
        st.spatial,
        geo,
        npoints=max(s.degree for s in st.spatial) + 2,
        extra_breaks=[g for g in lowrank.indicator.spatial_grevilles],
    )
    axes = [r.points for r in sdata.rules]

    time_mats = []
    space_mats = []
    for r in range(lowrank.rank):
        prof_t = lowrank.time_profile(r, tpts)
        row = []
        for k in range(1, p + 1):
            Ck = tcolloc[k - 1]
            wk = tw * tau_vals[k - 1] * prof_t
            row.append(sp.csr_matrix(Ck.T @ sp.diags(wk) @ Ck))
        time_mats.append(row)
        prof_s = lowrank.space_profile(r, axes)
        space_mats.append(sdata.mass(weight_grid=prof_s))
    return StabilizationMatrices(lowrank, time_mats, space_mats, capacitance)


def write_theta_csv(indicator, path):
    """Dump the indicator matrix as CSV, one row per temporal Greville index."""
    with open(path, "w") as fh:
        header = ["t_greville"] + [
            "s%d" % j for j in range(indicator.values.shape[1])
        ]
        fh.write(",".join(header) + "\n")
        for i, tg in enumerate(indicator.time_greville):
            row = ["%.17g" % tg] + ["%.17g" % v for v in indicator.values[i]]
            fh.write(",".join(row) + "\n")
