"""Independent oracles shared by the test modules.

Nothing here calls into the code under test except for plain data types and
the angle normalization, which have their own exact tests.
"""

import numpy as np

from raydf.dataset import denormalize_rays
from raydf.geometry import BoundingSphere


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def angles_to_points(ray_n, sphere: BoundingSphere):
    """Normalized ray -> (entry, direction), written out independently."""
    t_in = (ray_n[0] + 1.0) * np.pi / 2
    f_in = ray_n[1] * np.pi
    t_out = (ray_n[2] + 1.0) * np.pi / 2
    f_out = ray_n[3] * np.pi
    a = sphere.center + sphere.radius * np.array([np.sin(t_in) * np.cos(f_in), np.sin(t_in) * np.sin(f_in), np.cos(t_in)])
    b = sphere.center + sphere.radius * np.array([np.sin(t_out) * np.cos(f_out), np.sin(t_out) * np.sin(f_out), np.cos(t_out)])
    return a, unit(b - a)


def encode(origin, direction, sphere: BoundingSphere):
    """Origin + direction -> normalized ray and d0, via the quadratic."""
    o = np.asarray(origin, float) - sphere.center
    m = unit(direction)
    b = o @ m
    disc = b * b - (o @ o - sphere.radius**2)
    with np.errstate(invalid="ignore"):  # a miss yields nan, callers skip it
        s0, s1 = -b - np.sqrt(disc), -b + np.sqrt(disc)
    out = []
    for s in (s0, s1):
        p = o + s * m
        th = np.arccos(np.clip(p[2] / sphere.radius, -1, 1))
        ph = np.arctan2(p[1], p[0])
        out += [2 * th / np.pi - 1, ph / np.pi]
    return np.array(out), s0


def sphere_field(center, radius, sphere: BoundingSphere):
    """Normalized distance from entry to a solid ball, as a function of the
    normalized ray."""
    c = np.asarray(center, float)

    def f(ray_n):
        p, m = angles_to_points(ray_n, sphere)
        rel = p - c
        b = rel @ m
        disc = b * b - (rel @ rel - radius**2)
        if disc < 0:
            return np.nan
        return (-b - np.sqrt(disc)) / sphere.diameter

    return f


def plane_field(normal, offset, sphere: BoundingSphere):
    n = unit(normal)

    def f(ray_n):
        p, m = angles_to_points(ray_n, sphere)
        return (offset - p @ n) / (m @ n) / sphere.diameter

    return f


def fd_gradient(f, x, h=1e-5):
    x = np.asarray(x, float)
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def angle_between(a, b):
    a, b = unit(a), unit(b)
    return np.arctan2(np.linalg.norm(np.cross(a, b), axis=-1), np.sum(a * b, axis=-1))


def analytic_batch(field, pick_target, normal_at, n, rng, sph):
    """Rays at an analytic field with FD gradients and reference normals."""
    rays, dh, gs, d0s, ref = [], [], [], [], []
    while len(rays) < n:
        o = unit(rng.standard_normal(3)) * 3.0
        m = unit(pick_target(rng) - o)
        r, d0 = encode(o, m, sph)
        d = field(r)
        if not np.isfinite(d):
            continue
        p = o + (d0 + d * sph.diameter) * m
        nrm = normal_at(p)
        nrm = -nrm if nrm @ m > 0 else nrm
        if abs(nrm @ m) < 0.2:  # skip grazing views, FD is ill-conditioned there
            continue
        rays.append(denormalize_rays(r))
        dh.append(d)
        gs.append(fd_gradient(field, r))
        d0s.append(d0)
        ref.append(nrm)
    return np.array(rays), np.array(dh), np.array(gs), np.array(d0s), np.array(ref)


def intersecting_pixels(cam, sphere):
    """Pixel rays meeting the sphere, via the quadratic in camera terms."""
    u, v = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
    local = np.stack([(u - cam.cy) / cam.f, (v - cam.cx) / cam.f, np.ones(u.shape)], axis=-1)
    m = unit(local @ cam.R.T)
    o = cam.t - sphere.center
    b = m @ o
    return (b * b - (o @ o - sphere.radius**2)) > 0

# acceptance verdict lines, printed again in the terminal summary
ACCEPTANCE = []
