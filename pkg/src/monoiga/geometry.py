"""Spline geometry maps for the spatial domain.

A :class:`GeometryMap` carries its own tensor-product spline spaces and a
control net, mapping the parametric box ``[0, 1]^d`` onto the physical domain.
The space-time map is the spatial map paired with a linear scaling of the
temporal coordinate by the final time, which is handled analytically by the
callers.
"""

import numpy as np

from .bspline import SplineSpace
from .tensorops import mode_apply

__all__ = [
    "GeometryError",
    "GeometryMap",
    "builtin_geometry",
    "box_geometry",
    "load_geometry",
    "save_geometry",
]

SINGULAR_REL_TOL = 1e-12


class GeometryError(RuntimeError):
    """Raised for singular or invalid geometry maps."""


class GeometryMap:
    """Tensor-product spline map from ``[0, 1]^d`` to the physical domain.

    Parameters
    ----------
    spaces : sequence of SplineSpace
        Spline space per parametric direction (direction 1 first).
    control_points : ndarray, shape (N, d)
        Control net in colexicographic order (direction 1 fastest).
    final_time : float
        Length of the temporal interval appended by the space-time map.
    affine_scales : tuple or None
        When the map is an axis-aligned affine map ``x_l = o_l + s_l eta_l``,
        the pair ``(scales, offsets)``; enables exact Kronecker-factored
        assembly.  ``None`` for general maps.
    """

    def __init__(self, spaces, control_points, final_time=1.0, affine_scales=None):
        self.spaces = tuple(spaces)
        self.dim = len(self.spaces)
        n = 1
        for s in self.spaces:
            n *= s.dimension
        control_points = np.asarray(control_points, dtype=float)
        if control_points.shape != (n, self.dim):
            raise ValueError(
                "control_points must have shape (%d, %d)" % (n, self.dim)
            )
        if final_time <= 0:
            raise ValueError("final_time must be positive")
        self.control_points = control_points
        self.final_time = float(final_time)
        self.affine_scales = affine_scales
        # Control net as a grid with axes (n_d, ..., n_1, component).
        shape = tuple(s.dimension for s in reversed(self.spaces))
        self._grid = control_points.reshape(shape + (self.dim,))

    def _axis_of(self, direction):
        # Parametric direction l lives on grid axis d - 1 - l.
        return self.dim - 1 - direction

    def evaluate(self, points):
        """Physical images of parametric ``points`` with shape (m, d)."""
        return self._pointwise(points, order=0)["x"]

    def jacobian(self, points):
        """Jacobians ``J[m, c, a] = dF_c / deta_a`` at parametric points."""
        return self._pointwise(points, order=1)["jac"]

    def hessian(self, points):
        """Second derivatives ``H[m, c, a, b]`` at parametric points."""
        return self._pointwise(points, order=2)["hess"]

    def _pointwise(self, points, order):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.shape[1] != self.dim:
            raise ValueError("points must have %d columns" % self.dim)
        m = points.shape[0]
        out = {"x": np.empty((m, self.dim))}
        if order >= 1:
            out["jac"] = np.empty((m, self.dim, self.dim))
        if order >= 2:
            out["hess"] = np.empty((m, self.dim, self.dim, self.dim))
        for q in range(m):
            tabs = []
            firsts = []
            for s, x in zip(self.spaces, points[q]):
                first, ders = s.eval_all_ders(x, order)
                tabs.append(ders)
                firsts.append(first)
            sl = tuple(
                slice(firsts[l], firsts[l] + self.spaces[l].degree + 1)
                for l in reversed(range(self.dim))
            )
            local = self._grid[sl + (slice(None),)]

            def contract(orders):
                val = local
                # Contract the leading axis repeatedly; axes run d-1 .. 0.
                for l in reversed(range(self.dim)):
                    o = min(orders[l], self.spaces[l].degree)
                    w = tabs[l][o] if orders[l] <= self.spaces[l].degree else None
                    if w is None:
                        return np.zeros(self.dim)
                    val = np.tensordot(w, val, axes=(0, 0))
                return val

            out["x"][q] = contract([0] * self.dim)
            if order >= 1:
                for a in range(self.dim):
                    orders = [0] * self.dim
                    orders[a] = 1
                    out["jac"][q, :, a] = contract(orders)
            if order >= 2:
                for a in range(self.dim):
                    for b in range(a, self.dim):
                        orders = [0] * self.dim
                        orders[a] += 1
                        orders[b] += 1
                        val = contract(orders)
                        out["hess"][q, :, a, b] = val
                        out["hess"][q, :, b, a] = val
        return out

    def grid_data(self, axes, order=1):
        """Geometry data on a tensor grid of parametric points.

        Parameters
        ----------
        axes : sequence of 1D arrays
            Points per parametric direction (direction 1 first).
        order : int
            0 for values, 1 to add Jacobians, 2 to add Hessians.

        Returns
        -------
        dict with entries ``x`` (grid + (d,)), optionally ``jac``
        (grid + (d, d)) and ``hess`` (grid + (d, d, d)); the grid axes are in
        C order (direction d first).
        """
        collocs = [
            [s.collocation_matrix(ax, o) for o in range(order + 1)]
            for s, ax in zip(self.spaces, axes)
        ]
        grid_shape = tuple(len(axes[l]) for l in reversed(range(self.dim)))
        out = {}

        def tabulate(orders):
            val = self._grid
            for l in range(self.dim):
                o = orders[l]
                if o > self.spaces[l].degree:
                    return np.zeros(grid_shape + (self.dim,))
                val = mode_apply(collocs[l][o], val, self._axis_of(l))
            return val

        out["x"] = tabulate([0] * self.dim)
        if order >= 1:
            jac = np.empty(grid_shape + (self.dim, self.dim))
            for a in range(self.dim):
                orders = [0] * self.dim
                orders[a] = 1
                jac[..., a] = tabulate(orders)
            out["jac"] = jac
        if order >= 2:
            hess = np.empty(grid_shape + (self.dim, self.dim, self.dim))
            for a in range(self.dim):
                for b in range(a, self.dim):
                    orders = [0] * self.dim
                    orders[a] += 1
                    orders[b] += 1
                    val = tabulate(orders)
                    hess[..., a, b] = val
                    hess[..., b, a] = val
            out["hess"] = hess
        return out

    def check_bijective(self, samples_per_element=3):
        """Verify that det J stays positive on a sample grid.

        Raises :class:`GeometryError` if the Jacobian determinant is not
        positive at every sample point.
        """
        axes = []
        for s in self.spaces:
            pts = []
            for a, b in zip(s.breakpoints[:-1], s.breakpoints[1:]):
                pts.extend(np.linspace(a, b, samples_per_element + 2)[1:-1])
            axes.append(np.array(pts))
        jac = self.grid_data(axes, order=1)["jac"]
        det = np.linalg.det(jac)
        if np.any(det <= 0):
            raise GeometryError("geometry map has nonpositive Jacobian determinant")
        return float(det.min())


def jacobian_inverse_and_det(jac):
    """Inverse and determinant of stacked Jacobians with singularity check."""
    det = np.linalg.det(jac)
    scale = np.prod(np.linalg.norm(jac, axis=-2), axis=-1)
    bad = np.abs(det) < SINGULAR_REL_TOL * np.maximum(scale, 1e-300)
    if np.any(bad):
        raise GeometryError("singular Jacobian encountered during pull-back")
    return np.linalg.inv(jac), det


def box_geometry(lengths, final_time=1.0, offsets=None, degree=1):
    """Axis-aligned box ``prod_l (o_l, o_l + L_l)`` as an affine spline map."""
    lengths = np.atleast_1d(np.asarray(lengths, dtype=float))
    d = lengths.size
    if offsets is None:
        offsets = np.zeros(d)
    offsets = np.atleast_1d(np.asarray(offsets, dtype=float))
    spaces = [SplineSpace.uniform(degree, 1) for _ in range(d)]
    grevs = [s.greville() for s in spaces]
    grids = np.meshgrid(*[g for g in reversed(grevs)], indexing="ij")
    n = grids[0].size
    ctrl = np.empty((n, d))
    for l in range(d):
        # grids axis order is (dir d, ..., dir 1)
        ctrl[:, l] = offsets[l] + lengths[l] * grids[d - 1 - l].reshape(-1)
    return GeometryMap(
        spaces, ctrl, final_time=final_time, affine_scales=(lengths, offsets)
    )


def _fit_closed_curve(space, samples, values, seam_point):
    """Least-squares spline fit of a closed boundary curve.

    The first and last control points are pinned to ``seam_point`` so the
    fitted curve is exactly closed at the seam.
    """
    C = space.collocation_matrix(samples, 0).toarray()
    n = space.dimension
    fixed = np.zeros((n, 2))
    fixed[0] = seam_point
    fixed[-1] = seam_point
    rhs = values - C[:, [0, -1]] @ fixed[[0, -1]]
    inner, *_ = np.linalg.lstsq(C[:, 1:-1], rhs, rcond=None)
    ctrl = np.vstack([fixed[0], inner, fixed[-1]])
    return ctrl


def ellipse_annulus_geometry(
    final_time=1.0,
    outer_axes=(0.75, 0.125),
    inner_axes=(0.375, 0.0625),
    degree=2,
    angular_elements=64,
    samples_per_element=64,
):
    """Elliptic annulus: ellipse with an elliptic hole.

    Direction 1 is the angular parameter (seam on the positive x axis,
    traversed clockwise so that det J > 0), direction 2 is radial with
    ``eta_2 = 0`` on the inner ellipse and ``eta_2 = 1`` on the outer one.
    Boundary curves are least-squares fits of dense uniform samples; the
    radial coordinate is an exact linear blend through the Greville
    abscissae.
    """
    ang = SplineSpace.uniform(degree, angular_elements)
    rad = SplineSpace.uniform(degree, 1)
    m = samples_per_element * angular_elements
    eta = (np.arange(m) + 0.5) / m
    theta = -2.0 * np.pi * eta
    ao, bo = outer_axes
    ai, bi = inner_axes
    outer = np.column_stack([ao * np.cos(theta), bo * np.sin(theta)])
    inner = np.column_stack([ai * np.cos(theta), bi * np.sin(theta)])
    q_out = _fit_closed_curve(ang, eta, outer, (ao, 0.0))
    q_in = _fit_closed_curve(ang, eta, inner, (ai, 0.0))
    gr = rad.greville()
    n1 = ang.dimension
    n2 = rad.dimension
    ctrl = np.empty((n1 * n2, 2))
    for i2 in range(n2):
        blend = (1.0 - gr[i2]) * q_in + gr[i2] * q_out
        ctrl[i2 * n1 : (i2 + 1) * n1] = blend
    return GeometryMap([ang, rad], ctrl, final_time=final_time)


def builtin_geometry(name, final_time=1.0):
    """Construct one of the shipped geometries by name.

    Supported names: ``unit_interval``, ``unit_square``, ``unit_cube``,
    ``ellipse_annulus``.
    """
    if name == "unit_interval":
        return box_geometry([1.0], final_time=final_time)
    if name == "unit_square":
        return box_geometry([1.0, 1.0], final_time=final_time)
    if name == "unit_cube":
        return box_geometry([1.0, 1.0, 1.0], final_time=final_time)
    if name == "ellipse_annulus":
        return ellipse_annulus_geometry(final_time=final_time)
    raise ValueError("unknown geometry %r" % name)


def save_geometry(geo, path):
    """Write a control-point file (plain text).

    Layout: dimension; degrees; knot counts; one knot line per direction;
    then the control points row-major in colexicographic order.
    """
    lines = [str(geo.dim)]
    lines.append(" ".join(str(s.degree) for s in geo.spaces))
    lines.append(" ".join(str(s.knots.size) for s in geo.spaces))
    for s in geo.spaces:
        lines.append(" ".join("%.17g" % k for k in s.knots))
    for row in geo.control_points:
        lines.append(" ".join("%.17g" % v for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_geometry(path, final_time=1.0):
    """Read a control-point file written by :func:`save_geometry`."""
    with open(path) as fh:
        tokens = [ln.split() for ln in fh if ln.strip() and not ln.startswith("#")]
    d = int(tokens[0][0])
    degrees = [int(v) for v in tokens[1][:d]]
    counts = [int(v) for v in tokens[2][:d]]
    spaces = []
    for l in range(d):
        knots = np.array([float(v) for v in tokens[3 + l][: counts[l]]])
        spaces.append(SplineSpace.from_knots(knots, degrees[l]))
    n = 1
    for s in spaces:
        n *= s.dimension
    rows = tokens[3 + d : 3 + d + n]
    if len(rows) != n:
        raise ValueError("geometry file has %d control rows, expected %d" % (len(rows), n))
    ctrl = np.array([[float(v) for v in row[:d]] for row in rows])
    return GeometryMap(spaces, ctrl, final_time=final_time)
