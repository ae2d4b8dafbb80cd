"""Projections onto the probability simplex, L1 balls and their intersection.

The set of interest is the total-variation ball around a distribution ``c``::

    B(rho; c) = {w : w >= 0, sum(w) = 1, 0.5 * ||w - c||_1 <= rho}

:func:`project_tv_ball` computes the exact Euclidean projection in
O(n log n).  Writing ``y = q - c`` and ``x = w - c``, the KKT conditions give
``x_j = max(-c_j, soft(y_j - mu, kappa))``.  When the L1 constraint is active
the mass added above the threshold ``a = mu + kappa`` and the mass removed
below ``b = mu - kappa`` must each equal ``rho``, so ``a`` and ``b`` solve two
independent monotone piecewise-linear equations.  If the unconstrained
simplex projection already lies in the ball it is the answer.

:func:`dykstra_tv_ball` reaches the same point by alternating projections and
serves as an independent check.
"""

from __future__ import annotations

import numpy as np


class ProjectionError(ArithmeticError):
    pass


def project_simplex(v, z=1.0):
    """Euclidean projection of ``v`` onto {w >= 0, sum(w) = z}."""
    v = np.asarray(v, dtype=np.float64)
    return np.maximum(v - _upper_threshold(v, z), 0.0)


def project_l1_ball(v, radius=1.0, center=None):
    """Euclidean projection onto {w : ||w - center||_1 <= radius} by soft thresholding."""
    v = np.asarray(v, dtype=np.float64)
    c = np.zeros_like(v) if center is None else np.asarray(center, dtype=np.float64)
    d = v - c
    a = np.abs(d)
    if a.sum() <= radius:
        return v.copy()
    if radius <= 0:
        return c.copy()
    u = np.sort(a)[::-1]
    css = np.cumsum(u) - radius
    ind = np.arange(1, len(v) + 1)
    k = np.nonzero(u - css / ind > 0)[0][-1]
    theta = css[k] / (k + 1)
    return c + np.sign(d) * np.maximum(a - theta, 0.0)


def tv(p, q):
    """Total variation distance 0.5 * ||p - q||_1."""
    return 0.5 * float(np.abs(np.asarray(p, dtype=np.float64) - np.asarray(q, dtype=np.float64)).sum())


def _upper_threshold(y, mass):
    """a with sum(max(0, y - a)) == mass (mass > 0).

    Active-set iteration: starting from all entries, a is solved on the
    current set and entries at or below it are dropped.  a only increases and
    never passes the root, so the loop ends at the exact root after at most
    len(y) rounds (a handful in practice).
    """
    active = y
    a = (active.sum() - mass) / active.size
    while True:
        keep = active[active > a]
        if keep.size == active.size or keep.size == 0:  # empty only through rounding
            return a
        active = keep
        a = (active.sum() - mass) / active.size


def _lower_threshold(y, c, mass):
    """Smallest b with sum(min(c, max(0, b - y))) == mass, for 0 < mass < sum(c).

    The left side is non-decreasing and piecewise linear in b: each coordinate
    with c_j > 0 starts contributing at b = y_j and saturates at y_j + c_j.
    """
    live = c > 0
    yl, cl = y[live], c[live]
    starts = np.sort(yl)
    # a uniform center (the usual case) keeps the saturation points in the same order
    ends = starts + cl[0] if cl.min() == cl.max() else np.sort(yl + cl)
    pos = np.concatenate([starts, ends])
    slope = np.concatenate([np.ones(len(starts)), -np.ones(len(ends))])
    order = np.argsort(pos, kind="stable")  # merges two sorted runs
    pos, slope = pos[order], np.cumsum(slope[order])
    # F at each breakpoint; slope[i] holds on [pos[i], pos[i+1]]
    F = np.concatenate([[0.0], np.cumsum(slope[:-1] * np.diff(pos))])
    i = int(np.searchsorted(F, mass, side="left"))
    # F[i-1] < mass <= F[i]; interpolate on segment i-1
    i = max(i, 1)
    return pos[i - 1] + (mass - F[i - 1]) / slope[i - 1]


def project_tv_ball(q, center, radius):
    """Exact Euclidean projection of ``q`` onto B(radius; center)."""
    q = np.asarray(q, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    if q.shape != c.shape:
        raise ValueError(f"shape mismatch: {q.shape} vs {c.shape}")
    if not np.all(np.isfinite(q)):
        raise ProjectionError("non-finite input to projection")
    if radius <= 0:
        return c.copy()
    w = project_simplex(q)
    if radius >= 1 or tv(w, c) <= radius:
        return w
    y = q - c
    a = _upper_threshold(y, radius)
    b = _lower_threshold(y, c, radius)
    if a < b - 1e-12 * (1.0 + abs(a) + abs(b)):
        raise ProjectionError(f"inconsistent thresholds a={a!r} < b={b!r}")
    x = np.maximum(y - a, 0.0) - np.minimum(c, np.maximum(b - y, 0.0))
    return c + x


def dykstra_tv_ball(q, center, radius, max_iter=500, tol=1e-10):
    """Dykstra's alternating projections between the simplex and the L1 ball
    of radius 2*radius around ``center``.  Returns the simplex iterate."""
    q = np.asarray(q, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    if radius <= 0:
        return c.copy()
    if radius >= 1:  # the ball is the whole simplex
        return project_simplex(q)
    x = q.copy()
    p = np.zeros_like(q)
    r = np.zeros_like(q)
    y = x
    for it in range(max_iter):
        y = project_l1_ball(x + p, 2.0 * radius, c)
        p = x + p - y
        x_new = project_simplex(y + r)
        r = y + r - x_new
        if np.max(np.abs(x_new - x)) < tol and np.max(np.abs(x_new - y)) < tol:
            return x_new
        x = x_new
    raise ProjectionError(
        f"Dykstra did not converge in {max_iter} iterations "
        f"(last move {np.max(np.abs(x_new - y)):.3e}, tv={tv(x_new, c):.6f}, radius={radius})")


PROJECTORS = {"exact": project_tv_ball, "dykstra": dykstra_tv_ball}
