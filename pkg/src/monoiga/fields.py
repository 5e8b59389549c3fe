"""Pointwise evaluation of space-time spline fields with geometry pull-back."""

import numpy as np

__all__ = ["evaluate_field"]


def _full_time_tensor(space_time, coeffs):
    """Pad the constrained coefficient tensor with the removed first slab."""
    full = np.zeros((space_time.time.dimension,) + space_time.spatial_shape)
    full[1:] = np.asarray(coeffs, dtype=float).reshape(space_time.coeff_shape)
    return full


def evaluate_field(
    space_time,
    geo,
    coeffs,
    points,
    time_derivative=False,
    gradient=False,
    laplacian=False,
):
    """Evaluate a coefficient field at parametric space-time points.

    Parameters
    ----------
    points : ndarray, shape (m, d + 1)
        Parametric points ``(eta_1, ..., eta_d, tau)`` in ``[0, 1]^{d+1}``.
    time_derivative, gradient, laplacian : bool
        Request the physical time derivative, the physical spatial gradient,
        or the physical Laplacian alongside the values.

    Returns
    -------
    ndarray of values when nothing extra is requested, otherwise a dict with
    keys among ``value``, ``dt``, ``grad``, ``laplacian``.
    """
    d = space_time.num_spatial_dims
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[1] != d + 1:
        raise ValueError("points must have %d columns" % (d + 1))
    if np.any(points < -1e-14) or np.any(points > 1.0 + 1e-14):
        raise ValueError("points must lie in [0, 1]^%d" % (d + 1))
    points = np.clip(points, 0.0, 1.0)
    m = points.shape[0]
    T = geo.final_time

    full = _full_time_tensor(space_time, coeffs)
    space_order = 2 if laplacian else (1 if gradient else 0)
    time_order = 1 if time_derivative else 0

    values = np.empty(m)
    dt = np.empty(m) if time_derivative else None
    grad = np.empty((m, d)) if (gradient or laplacian) else None
    lap = np.empty(m) if laplacian else None

    if laplacian:
        jac_all = geo.jacobian(points[:, :d])
        hess_all = geo.hessian(points[:, :d])
    elif gradient:
        jac_all = geo.jacobian(points[:, :d])

    for q in range(m):
        tabs = []
        firsts = []
        for s, x in zip(space_time.spatial, points[q, :d]):
            first, ders = s.eval_all_ders(x, space_order)
            tabs.append(ders)
            firsts.append(first)
        tfirst, tders = space_time.time.eval_all_ders(points[q, d], time_order)
        pt = space_time.time.degree
        sl = [slice(tfirst, tfirst + pt + 1)]
        for l in reversed(range(d)):
            sl.append(slice(firsts[l], firsts[l] + space_time.spatial[l].degree + 1))
        local = full[tuple(sl)]

        def contract(time_o, space_orders):
            val = np.tensordot(tders[time_o], local, axes=(0, 0))
            for l in reversed(range(d)):
                o = space_orders[l]
                if o > space_time.spatial[l].degree:
                    return 0.0
                val = np.tensordot(tabs[l][o], val, axes=(0, 0))
            return float(val)

        values[q] = contract(0, [0] * d)
        if time_derivative:
            dt[q] = contract(1, [0] * d) / T
        if grad is not None:
            jinv = np.linalg.inv(jac_all[q])
            geta = np.array(
                [contract(0, [1 if l == a else 0 for l in range(d)]) for a in range(d)]
            )
            grad[q] = jinv.T @ geta
        if laplacian:
            h2 = np.empty((d, d))
            for a in range(d):
                for b in range(a, d):
                    orders = [0] * d
                    orders[a] += 1
                    orders[b] += 1
                    h2[a, b] = h2[b, a] = contract(0, orders)
            metric = jinv @ jinv.T
            corr = np.einsum("cij,c->ij", hess_all[q], grad[q])
            lap[q] = float(np.sum(metric * (h2 - corr)))

    if not (time_derivative or gradient or laplacian):
        return values
    out = {"value": values}
    if time_derivative:
        out["dt"] = dt
    if gradient or laplacian:
        out["grad"] = grad
    if laplacian:
        out["laplacian"] = lap
    return out
