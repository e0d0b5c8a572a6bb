"""Analytic primitive scenes with exact ray casting.

Scenes are unions of spheres, axis-aligned boxes and finite (square) planes.
They generate ground-truth depth scans and act as a brute-force visibility
oracle for the learned pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import BoundingSphere, Camera, pixel_directions, pixel_grid, rays_to_points

T_EPS = 1e-12

# desk scale: a 30 cm bounding sphere, so a 64 px view resolves a few mm per
# pixel and the 10 mm closeness threshold spans several pixels
DEFAULT_DIAMETER = 0.3


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    color: tuple = (0.8, 0.8, 0.8)

    def intersect(self, o, m):
        c = np.asarray(self.center, dtype=np.float64)
        oc = o - c
        b = np.sum(m * oc, axis=-1)
        cc = np.sum(oc * oc, axis=-1) - self.radius**2
        disc = b * b - cc
        root = np.sqrt(np.maximum(disc, 0.0))
        t0 = -b - root
        t1 = -b + root
        t = np.where(t0 > T_EPS, t0, np.where(t1 > T_EPS, t1, np.inf))
        t = np.where(disc >= 0.0, t, np.inf)
        hit = o + np.where(np.isfinite(t), t, 0.0)[..., None] * m
        n = (hit - c) / self.radius
        return t, n

    def implicit(self, x):
        return np.linalg.norm(x - np.asarray(self.center), axis=-1) - self.radius

    def corners(self):
        c = np.asarray(self.center, dtype=np.float64)
        return np.stack([c - self.radius, c + self.radius])

    def farthest(self, point):
        return np.linalg.norm(np.asarray(self.center) - point) + self.radius

    def area(self):
        return 4.0 * np.pi * self.radius**2

    def sample_surface(self, n, rng):
        w = rng.standard_normal((n, 3))
        w /= np.linalg.norm(w, axis=-1, keepdims=True)
        return np.asarray(self.center) + self.radius * w


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    color: tuple = (0.8, 0.8, 0.8)

    def intersect(self, o, m):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / m
            ta = (lo - o) * inv
            tb = (hi - o) * inv
        tmin = np.minimum(ta, tb)
        tmax = np.maximum(ta, tb)
        # rays parallel to a slab: inside -> unbounded, outside -> empty
        par = m == 0.0
        inside = (o >= lo) & (o <= hi)
        tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
        tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
        t_near = tmin.max(axis=-1)
        t_far = tmax.min(axis=-1)
        axis_near = tmin.argmax(axis=-1)
        axis_far = tmax.argmin(axis=-1)
        ok = (t_far >= t_near) & (t_far > T_EPS)
        use_near = t_near > T_EPS
        t = np.where(ok, np.where(use_near, t_near, t_far), np.inf)
        axis = np.where(use_near, axis_near, axis_far)
        n = np.zeros(np.shape(t) + (3,))
        sign = np.where(use_near, -1.0, 1.0) * np.sign(np.take_along_axis(m, axis[..., None], -1)[..., 0])
        np.put_along_axis(n, axis[..., None], sign[..., None], axis=-1)
        return t, n

    def implicit(self, x):
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        c = 0.5 * (lo + hi)
        h = 0.5 * (hi - lo)
        q = np.abs(x - c) - h
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def corners(self):
        return np.stack([np.asarray(self.lo, float), np.asarray(self.hi, float)])

    def farthest(self, point):
        lo, hi = self.corners()
        far = np.where(np.abs(lo - point) > np.abs(hi - point), lo, hi)
        return np.linalg.norm(far - point)

    def area(self):
        e = np.asarray(self.hi, float) - np.asarray(self.lo, float)
        return 2.0 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2])

    def sample_surface(self, n, rng):
        lo = np.asarray(self.lo, float)
        hi = np.asarray(self.hi, float)
        e = hi - lo
        face_areas = np.array([e[1] * e[2], e[0] * e[2], e[0] * e[1]] * 2)
        face = rng.choice(6, size=n, p=face_areas / face_areas.sum())
        pts = lo + rng.random((n, 3)) * e
        axis = face % 3
        pts[np.arange(n), axis] = np.where(face < 3, lo[axis], hi[axis])
        return pts


def _plane_basis(normal):
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    a = np.cross(n, helper)
    a /= np.linalg.norm(a)
    return n, a, np.cross(n, a)


@dataclass(frozen=True)
class Plane:
    """Two-sided square patch ``{x : n.x = offset}`` of half-size ``extent``
    centred on ``offset * n``."""

    normal: tuple
    offset: float
    extent: float
    color: tuple = (0.8, 0.8, 0.8)

    def intersect(self, o, m):
        n, a, b = _plane_basis(self.normal)
        denom = m @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.offset - o @ n) / denom
        t = np.where((np.abs(denom) > 1e-15) & (t > T_EPS), t, np.inf)
        hit = o + np.where(np.isfinite(t), t, 0.0)[..., None] * m
        rel = hit - self.offset * n
        inside = (np.abs(rel @ a) <= self.extent) & (np.abs(rel @ b) <= self.extent)
        t = np.where(inside, t, np.inf)
        facing = np.where(denom > 0, -1.0, 1.0)
        return t, facing[..., None] * n

    def implicit(self, x):
        n, _, _ = _plane_basis(self.normal)
        return x @ n - self.offset

    def corners(self):
        n, a, b = _plane_basis(self.normal)
        c = self.offset * n
        e = self.extent
        return np.stack([c + sa * e * a + sb * e * b for sa in (-1, 1) for sb in (-1, 1)])

    def farthest(self, point):
        return np.linalg.norm(self.corners() - point, axis=-1).max()

    def area(self):
        return 4.0 * self.extent**2

    def sample_surface(self, n, rng):
        nn, a, b = _plane_basis(self.normal)
        uv = (rng.random((n, 2)) * 2.0 - 1.0) * self.extent
        return self.offset * nn + uv[:, :1] * a + uv[:, 1:] * b


@dataclass(frozen=True)
class Scene:
    primitives: tuple
    bounding: BoundingSphere
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        for prim in self.primitives:
            if prim.farthest(self.bounding.center) >= self.bounding.radius:
                raise ValueError(f"primitive {prim} is not strictly inside the bounding sphere")

    def extent_radius(self) -> float:
        """Radius about the sphere centre enclosing every primitive."""
        if not self.primitives:
            return 0.0
        return max(p.farthest(self.bounding.center) for p in self.primitives)

    def sample_surface(self, n, rng, visible_only=True):
        """Area-weighted uniform samples of the union's outer surface.

        With ``visible_only`` points buried inside another primitive are
        rejected (and redrawn), so the cloud describes the union boundary.
        """
        areas = np.array([p.area() for p in self.primitives])
        out = []
        need = n
        while need > 0:
            counts = rng.multinomial(need * 2, areas / areas.sum())
            pts = np.concatenate([p.sample_surface(c, rng) for p, c in zip(self.primitives, counts)])
            solids = [p for p in self.primitives if not isinstance(p, Plane)]
            if visible_only and solids:
                sdf = np.stack([p.implicit(pts) for p in solids], axis=-1)
                # a point is buried if strictly inside some solid; planes have no inside
                keep = ~np.any(sdf < -1e-9, axis=-1)
                pts = pts[keep]
            pts = pts[rng.permutation(len(pts))][:need]
            out.append(pts)
            need -= len(pts)
        return np.concatenate(out)


@dataclass
class CastResult:
    t: np.ndarray
    points: np.ndarray
    normals: np.ndarray
    primitive: np.ndarray

    @property
    def hit(self):
        return np.isfinite(self.t)


def cast_rays(scene: Scene, origins, directions) -> CastResult:
    """Nearest positive hit of each ray against all primitives."""
    o = np.asarray(origins, dtype=np.float64)
    m = np.asarray(directions, dtype=np.float64)
    shape = np.broadcast_shapes(o.shape, m.shape)[:-1]
    o = np.broadcast_to(o, shape + (3,))
    m = np.broadcast_to(m, shape + (3,))
    best_t = np.full(shape, np.inf)
    best_n = np.zeros(shape + (3,))
    best_i = np.full(shape, -1, dtype=np.int64)
    for i, prim in enumerate(scene.primitives):
        t, n = prim.intersect(o, m)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_n = np.where(closer[..., None], n, best_n)
        best_i = np.where(closer, i, best_i)
    pts = o + np.where(np.isfinite(best_t), best_t, 0.0)[..., None] * m
    return CastResult(best_t, pts, best_n, best_i)


def cast_ray(scene: Scene, origin, direction):
    """Single ray; returns ``(t, point, normal)`` or ``None`` on a miss."""
    r = cast_rays(scene, np.asarray(origin, float)[None], np.asarray(direction, float)[None])
    if not r.hit[0]:
        return None
    return float(r.t[0]), r.points[0], r.normals[0]


# ---------------------------------------------------------------------------
# visibility oracle


def oracle_visibility_batch(scene: Scene, p, rays2, epsilon):
    """Vectorized oracle: 1 where the first hit of ``rays2`` lies within
    ``epsilon`` (along the ray) of ``p``."""
    p_in, _, m = rays_to_points(rays2, scene.bounding)
    d_tilde = np.linalg.norm(np.asarray(p, float) - p_in, axis=-1)
    res = cast_rays(scene, p_in, m)
    return (res.hit & (np.abs(d_tilde - res.t) <= epsilon)).astype(np.uint8)


def oracle_visibility(scene: Scene, ray1, p, ray2, epsilon) -> int:
    """Ground-truth dual-ray visibility by direct ray casting.

    ``ray1`` is only carried for symmetry with the learned classifier: the
    label depends on ``p`` (its hit point) and ``ray2``.
    """
    return int(oracle_visibility_batch(scene, np.asarray(p)[None], np.asarray(ray2, float)[None], epsilon)[0])


# ---------------------------------------------------------------------------
# catalog and trajectories


def default_bounding(diameter=DEFAULT_DIAMETER):
    return BoundingSphere(np.zeros(3), diameter)


def _catalog_unit(name):
    """Catalog primitives laid out for a bounding sphere of diameter 3."""
    red, green, blue, white = (0.9, 0.2, 0.2), (0.2, 0.8, 0.3), (0.2, 0.3, 0.9), (0.85, 0.85, 0.8)
    if name == "sphere":
        return [Sphere((0.0, 0.0, 0.0), 1.0, red)]
    if name == "two-spheres":
        return [Sphere((-0.55, -0.15, 0.0), 0.55, red), Sphere((0.6, 0.25, 0.1), 0.45, blue)]
    if name == "box":
        return [Box((-0.7, -0.7, -0.7), (0.7, 0.7, 0.7), green)]
    if name == "box+sphere":
        return [Box((-0.85, -0.5, -0.5), (0.15, 0.5, 0.5), green), Sphere((0.6, 0.1, 0.2), 0.45, red)]
    if name == "cornell":
        e = 0.8
        return [
            Plane((0, 0, 1), -e, e, white),
            Plane((0, 0, 1), e, e, white),
            Plane((0, 1, 0), e, e, white),
            Plane((1, 0, 0), -e, e, red),
            Plane((1, 0, 0), e, e, green),
            Box((-0.5, -0.1, -0.8), (-0.1, 0.4, 0.1), white),
            Box((0.1, -0.5, -0.8), (0.5, -0.1, -0.3), white),
        ]
    if name == "empty":
        return []
    raise KeyError(f"unknown scene {name!r}")


def _scaled(prim, k):
    if isinstance(prim, Sphere):
        return Sphere(tuple(k * c for c in prim.center), k * prim.radius, prim.color)
    if isinstance(prim, Box):
        return Box(tuple(k * c for c in prim.lo), tuple(k * c for c in prim.hi), prim.color)
    return Plane(prim.normal, k * prim.offset, k * prim.extent, prim.color)


def make_scene(name: str, diameter: float = DEFAULT_DIAMETER) -> Scene:
    """Built-in scenes centred at the origin, scaled to the sphere diameter."""
    k = diameter / 3.0
    prims = [_scaled(p, k) for p in _catalog_unit(name)]
    return Scene(prims, default_bounding(diameter), name)


CATALOG = ("sphere", "two-spheres", "box", "box+sphere", "cornell")


def scene_from_primitives(specs, diameter=DEFAULT_DIAMETER, center=(0.0, 0.0, 0.0)) -> Scene:
    """Build a scene from plain dicts, e.g. ``{"type": "sphere", "center":
    [0, 0, 0], "radius": 1}``."""
    prims = []
    for s in specs:
        s = dict(s)
        kind = s.pop("type")
        cls = {"sphere": Sphere, "box": Box, "plane": Plane}[kind]
        for key in ("center", "lo", "hi", "normal", "color"):
            if key in s:
                s[key] = tuple(float(x) for x in s[key])
        prims.append(cls(**s))
    return Scene(prims, BoundingSphere(np.asarray(center, float), diameter), "custom")


@dataclass
class Trajectory:
    cameras: list
    splits: list = field(default_factory=list)

    def split(self, tag):
        return [c for c, s in zip(self.cameras, self.splits) if s == tag]


def orbit_trajectory(
    radius=1.2 * DEFAULT_DIAMETER,
    train_elevations=(-20.0, 30.0),
    train_azimuths=10,
    test_elevations=(5.0,),
    test_azimuths=10,
    resolution=(64, 64),
    fov_deg=50.0,
    target=(0.0, 0.0, 0.0),
):
    """Cameras on circular orbits looking at ``target`` (z is up).

    Test azimuths are offset by half a step from the train azimuths so the
    two sets never share a pose.
    """
    H, W = resolution
    f = (W / 2) / np.tan(np.radians(fov_deg) / 2)
    target = np.asarray(target, float)
    cams, splits = [], []

    def ring(elev, count, offset, tag):
        for k in range(count):
            az = 2 * np.pi * (k + offset) / count
            el = np.radians(elev)
            eye = target + radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
            cams.append(Camera.look_at(eye, target, (0, 0, 1), f, W, H))
            splits.append(tag)

    for i, e in enumerate(train_elevations):
        ring(e, train_azimuths, 0.5 * i / len(train_elevations), "train")
    for e in test_elevations:
        ring(e, test_azimuths, 0.5 + 0.25 / max(len(train_elevations), 1), "test")
    return Trajectory(cams, splits)


# ---------------------------------------------------------------------------
# scans


def render_depth(scene: Scene, cam: Camera):
    """Z-depth raster (float64, 0 on misses) and hit primitive index."""
    u, v = pixel_grid(cam)
    m = pixel_directions(u, v, cam)
    res = cast_rays(scene, cam.origin, m)
    cos_axis = m @ cam.R[:, 2]
    depth = np.where(res.hit, res.t * cos_axis, 0.0)
    return depth, res.primitive


def render_colors(scene: Scene, primitive):
    colors = np.zeros(primitive.shape + (3,))
    for i, p in enumerate(scene.primitives):
        colors[primitive == i] = p.color
    return colors


def render_depth_scan(scene: Scene, cam: Camera, scan_id=0, noise_std=0.0, rng=None, with_color=False):
    """Render a :class:`~raydf.dataset.DepthScan` of ``scene``.

    Depths stay float64 in memory; files store float32.
    """
    from .dataset import DepthScan

    depth, prim = render_depth(scene, cam)
    if noise_std > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        hit = depth > 0
        depth = np.where(hit, np.maximum(depth + noise_std * rng.standard_normal(depth.shape), 1e-6), 0.0)
    color = render_colors(scene, prim) if with_color else None
    return DepthScan(cam, depth, scan_id, color)
