"""Shared helpers for the data-driven verification tests."""

import numpy as np


def sample_consistent_systems(member, a_center, count, rng, max_radius=10.0):
    """Radially sample coefficient matrices from a convex consistency set.

    ``member`` is a boolean membership predicate over coefficient matrices and
    ``a_center`` an interior point (the membership sets used here, norm balls
    per sample or one aggregate quadratic bound, are convex in A).  For each
    draw we pick a random direction, bisect to the boundary and back off a
    little, so every returned matrix satisfies ``member`` by convexity.
    """
    rng = np.random.default_rng(rng)
    a_center = np.asarray(a_center, dtype=float)
    if not member(a_center):
        raise ValueError("the center point is not in the consistency set")
    out = [a_center.copy()]
    while len(out) < count:
        d = rng.normal(size=a_center.shape)
        d /= np.linalg.norm(d)
        if member(a_center + max_radius * d):
            rmax = max_radius
        else:
            lo, hi = 0.0, max_radius
            for _ in range(40):
                mid = 0.5 * (lo + hi)
                if member(a_center + mid * d):
                    lo = mid
                else:
                    hi = mid
            rmax = lo
        out.append(a_center + float(rng.uniform(0.0, 0.98)) * rmax * d)
    return out[:count]
