"""Closed-form ray geometry.

Rays are encoded by the spherical angles of their entry and exit points on a
fixed bounding sphere, ``(theta_in, phi_in, theta_out, phi_out)``, using the
convention ``x = sin(t)cos(p), y = sin(t)sin(p), z = cos(t)`` with
``theta in [0, pi]`` and ``phi in (-pi, pi]``.

Most functions come in two flavours: a vectorized one working on arrays of
rays (used by the data pipeline and the renderer) and a scalar one that
validates its input and raises the errors in :mod:`raydf.errors`.

Camera convention: ``[R|t]`` maps camera coordinates to world coordinates, so
the camera centre is ``t``. Pixel ``(u, v)`` is (row, column) and the
intrinsics pair the row with ``c_y`` and the column with ``c_x``::

    K = [[f, 0, c_y],
         [0, f, c_x],
         [0, 0,  1 ]]

i.e. the camera x axis runs down the rows, y along the columns and z is the
optical axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import (
    BehindCamera,
    DegenerateGradient,
    DegenerateRay,
    NegativeResult,
    NoIntersection,
    OriginInside,
    PointOutsideSphere,
    PoleSingularity,
)

# d(normalized input)/d(angle) for (theta_in, phi_in, theta_out, phi_out)
NORMALIZATION_SCALE = np.array([2.0 / np.pi, 1.0 / np.pi, 2.0 / np.pi, 1.0 / np.pi])

JACOBIAN_STEP = 1e-6
POLE_EPS = 1e-9
DEGENERATE_EPS = 1e-12


@dataclass(frozen=True)
class BoundingSphere:
    center: np.ndarray
    diameter: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        object.__setattr__(self, "center", c)
        if not self.diameter > 0:
            raise ValueError("bounding sphere diameter must be positive")

    @property
    def radius(self) -> float:
        return 0.5 * self.diameter

    def normalize_points(self, points):
        """Map world points into [-1, 1]^3 (centre, then divide by D/2)."""
        return (np.asarray(points, dtype=np.float64) - self.center) / self.radius


class Ray(NamedTuple):
    theta_in: float
    phi_in: float
    theta_out: float
    phi_out: float


@dataclass(frozen=True)
class Camera:
    R: np.ndarray
    t: np.ndarray
    f: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("camera rotation must have det(R) = 1")
        if not self.f > 0:
            raise ValueError("focal length must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the raster")

    @property
    def origin(self) -> np.ndarray:
        return self.t

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.f, 0.0, self.cy], [0.0, self.f, self.cx], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @classmethod
    def look_at(cls, eye, target, up, f, width, height, cx=None, cy=None):
        """Camera at ``eye`` whose optical axis points at ``target``.

        Rows run along ``-up`` (image "down"); columns complete a right-handed
        frame, which makes images appear mirrored left/right compared with the
        usual OpenCV layout.
        """
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        up = np.asarray(up, dtype=np.float64)
        down = -(up - np.dot(up, fwd) * fwd)
        n = np.linalg.norm(down)
        if n < 1e-9:
            raise ValueError("up vector parallel to viewing direction")
        down /= n
        col = np.cross(fwd, down)
        R = np.stack([down, col, fwd], axis=1)
        return cls(
            R=R,
            t=eye,
            f=float(f),
            cx=float(width / 2 if cx is None else cx),
            cy=float(height / 2 if cy is None else cy),
            width=int(width),
            height=int(height),
        )


@dataclass(frozen=True)
class RaySample:
    ray: Ray
    d: float
    p: np.ndarray
    d0: float


@dataclass(frozen=True)
class NormalResult:
    n: np.ndarray
    magnitude: float
    # magnitude / (R^2 sin(theta_m)); equals 1/|cos(incidence)| for an exact field
    stretch: float


# ---------------------------------------------------------------------------
# spherical helpers


def sph_to_unit(theta, phi):
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def unit_to_sph(v):
    """Angles of (not necessarily unit) vectors; phi folded into (-pi, pi]."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1)
    theta = np.arccos(np.clip(v[..., 2] / n, -1.0, 1.0))
    phi = np.arctan2(v[..., 1], v[..., 0])
    phi = np.where(phi <= -np.pi, phi + 2.0 * np.pi, phi)
    return theta, phi


def wrap_angle(a):
    """Fold angle differences into (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w <= -np.pi, w + 2.0 * np.pi, w)


# ---------------------------------------------------------------------------
# ray <-> sphere


def intersect_sphere(origins, directions, sphere: BoundingSphere):
    """Entry/exit parameters of rays ``o + s*m`` with the bounding sphere.

    Returns ``(s_in, s_out, ok)``; ``ok`` is False for misses, tangents and
    spheres lying entirely behind the origin. Origins inside the sphere get
    ``s_in < 0``.
    """
    o = np.asarray(origins, dtype=np.float64) - sphere.center
    m = np.asarray(directions, dtype=np.float64)
    b = np.sum(m * o, axis=-1)
    c = np.sum(o * o, axis=-1) - sphere.radius**2
    disc = b * b - c
    root = np.sqrt(np.maximum(disc, 0.0))
    s_in = -b - root
    s_out = -b + root
    ok = (disc > 0.0) & (s_out > 0.0)
    return s_in, s_out, ok


def parameterize_rays(origins, directions, sphere: BoundingSphere):
    """Vectorized two-sphere parameterization.

    Returns ``(rays[..., 4], d0, ok)`` where ``ok`` marks rays that hit the
    sphere from an origin outside or on it.
    """
    origins = np.asarray(origins, dtype=np.float64)
    m = np.asarray(directions, dtype=np.float64)
    s_in, s_out, ok = intersect_sphere(origins, m, sphere)
    ok = ok & (s_in >= 0.0)
    p_in = origins + s_in[..., None] * m - sphere.center
    p_out = origins + s_out[..., None] * m - sphere.center
    t_in, f_in = unit_to_sph(p_in)
    t_out, f_out = unit_to_sph(p_out)
    rays = np.stack([t_in, f_in, t_out, f_out], axis=-1)
    return rays, s_in, ok


def parameterize_ray(origin, direction, sphere: BoundingSphere) -> tuple[Ray, float]:
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    rel = origin - sphere.center
    if np.dot(rel, rel) < sphere.radius**2:
        raise OriginInside(f"origin {origin} lies inside the bounding sphere")
    s_in, _, ok = intersect_sphere(origin, direction, sphere)
    if not ok:
        raise NoIntersection("ray misses the bounding sphere")
    rays, d0, _ = parameterize_rays(origin, direction, sphere)
    return Ray(*map(float, rays)), float(d0)


def rays_to_points(rays, sphere: BoundingSphere):
    """Entry point, exit point and unit direction of encoded rays."""
    rays = np.asarray(rays, dtype=np.float64)
    p_in = sphere.center + sphere.radius * sph_to_unit(rays[..., 0], rays[..., 1])
    p_out = sphere.center + sphere.radius * sph_to_unit(rays[..., 2], rays[..., 3])
    chord = p_out - p_in
    length = np.linalg.norm(chord, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        m = chord / length
    return p_in, p_out, m


def ray_to_points(ray, sphere: BoundingSphere):
    p_in, p_out, _ = rays_to_points(np.asarray(ray, dtype=np.float64), sphere)
    chord = p_out - p_in
    n = np.linalg.norm(chord)
    if n < DEGENERATE_EPS:
        raise DegenerateRay("entry and exit points coincide")
    return p_in, p_out, chord / n


# ---------------------------------------------------------------------------
# cameras


def obliquity(u, v, cam: Camera):
    """sqrt((u-c_y)^2 + (v-c_x)^2 + f^2) / f: range per unit z-depth."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return np.sqrt((u - cam.cy) ** 2 + (v - cam.cx) ** 2 + cam.f**2) / cam.f


def depth_to_distance(raw_depth, u, v, cam: Camera, d0):
    """Convert z-depth at pixel (u, v) into distance from the sphere entry."""
    d = np.asarray(raw_depth, dtype=np.float64) * obliquity(u, v, cam) - np.asarray(d0)
    if np.any(d < 0):
        raise NegativeResult("surface lies in front of the sphere entry point")
    return float(d) if np.ndim(d) == 0 else d


def distance_to_depth(d, u, v, cam: Camera, d0):
    """Inverse of :func:`depth_to_distance`."""
    return (np.asarray(d, dtype=np.float64) + d0) / obliquity(u, v, cam)


def pixel_directions(u, v, cam: Camera):
    """Unit world directions ``R K^-1 (u, v, 1)`` normalized."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    local = np.stack([(u - cam.cy) / cam.f, (v - cam.cx) / cam.f, np.ones_like(u)], axis=-1)
    m0 = local @ cam.R.T
    return m0 / np.linalg.norm(m0, axis=-1, keepdims=True)


def pixel_grid(cam: Camera):
    u, v = np.meshgrid(np.arange(cam.height, dtype=np.float64),
                       np.arange(cam.width, dtype=np.float64), indexing="ij")
    return u, v


def pixel_rays(cam: Camera, sphere: BoundingSphere, u=None, v=None):
    """Parameterize pixel rays; defaults to the full raster.

    Returns ``(rays, d0, ok, m)`` with leading shape matching ``u``.
    """
    if u is None:
        u, v = pixel_grid(cam)
    m = pixel_directions(u, v, cam)
    rays, d0, ok = parameterize_rays(np.broadcast_to(cam.origin, m.shape), m, sphere)
    return rays, d0, ok, m


def pixel_ray(u, v, cam: Camera, sphere: BoundingSphere) -> tuple[Ray, float]:
    m = pixel_directions(u, v, cam)
    return parameterize_ray(cam.origin, m, sphere)


def reproject_points(points, cam: Camera):
    """Vectorized projection; returns ``(u, v, z)`` without validation."""
    pc = (np.asarray(points, dtype=np.float64) - cam.t) @ cam.R
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.f * pc[..., 0] / z + cam.cy
        v = cam.f * pc[..., 1] / z + cam.cx
    return u, v, z


def in_frame(u, v, cam: Camera):
    """True where the nearest pixel to (u, v) exists in the raster."""
    ui = np.rint(u)
    vi = np.rint(v)
    return (ui >= 0) & (ui < cam.height) & (vi >= 0) & (vi < cam.width)


def reproject(p, cam_k: Camera):
    """Project a world point into camera k.

    Returns ``(u, v, z, inside)``; ``inside`` flags whether the nearest pixel
    falls inside the raster (out-of-frame is not an error).
    """
    u, v, z = reproject_points(p, cam_k)
    if not z > 0:
        raise BehindCamera(f"point has depth {float(z)} in camera frame")
    return float(u), float(v), float(z), bool(in_frame(u, v, cam_k))


# ---------------------------------------------------------------------------
# multi-view sampling


def _backward_exit(points, w, sphere):
    """Distance from interior points back along -w to the sphere."""
    rel = points - sphere.center
    b = np.sum(w * rel, axis=-1)
    c = np.sum(rel * rel, axis=-1) - sphere.radius**2
    root = np.sqrt(b * b - c)
    return b + root, -b + root


def sample_multiview_batch(points, M, sphere: BoundingSphere, rng):
    """Draw ``M`` rays through each of ``points``.

    Directions are uniform on the unit sphere. Each ray enters the bounding
    sphere on the side opposite its direction and passes through the point.
    Returns raw-angle rays ``(B, M, 4)`` and distances entry->point ``(B, M)``.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rel = points - sphere.center
    if np.any(np.sum(rel * rel, axis=-1) >= sphere.radius**2):
        raise PointOutsideSphere("multi-view anchor point not strictly inside the sphere")
    B = points.shape[0]
    w = rng.standard_normal((B, M, 3))
    w /= np.linalg.norm(w, axis=-1, keepdims=True)
    P = np.broadcast_to(points[:, None, :], (B, M, 3))
    while True:
        back, fwd = _backward_exit(P, w, sphere)
        p_in = P - back[..., None] * w
        n_in = (p_in - sphere.center) / sphere.radius
        bad = np.abs(np.sum(w * n_in, axis=-1)) < 1e-6
        if not bad.any():
            break
        redraw = rng.standard_normal((int(bad.sum()), 3))
        w[bad] = redraw / np.linalg.norm(redraw, axis=-1, keepdims=True)
    p_out = P + fwd[..., None] * w
    t_in, f_in = unit_to_sph(p_in - sphere.center)
    t_out, f_out = unit_to_sph(p_out - sphere.center)
    rays = np.stack([t_in, f_in, t_out, f_out], axis=-1)
    return rays, back


def sample_multiview_rays(p, M, sphere: BoundingSphere, rng_seed):
    rng = np.random.default_rng(rng_seed)
    rays, dt = sample_multiview_batch(np.asarray(p, dtype=np.float64)[None], M, sphere, rng)
    return [(Ray(*map(float, r)), float(d)) for r, d in zip(rays[0], dt[0])]


def transformation_residual(s1: RaySample, s2: RaySample, sphere: BoundingSphere) -> float:
    p1, _, m1 = ray_to_points(s1.ray, sphere)
    p2, _, m2 = ray_to_points(s2.ray, sphere)
    return float(np.linalg.norm((p1 + s1.d * m1) - (p2 + s2.d * m2)))


# ---------------------------------------------------------------------------
# normals from the distance field gradient


def _direction_jacobian(origins, theta_m, phi_m, sphere, h=JACOBIAN_STEP):
    """Central differences of the normalized ray encoding and of d0 with
    respect to the viewing direction angles."""
    out = []
    for dt, dp in ((h, 0.0), (0.0, h)):
        rp, d0p, _ = parameterize_rays(origins, sph_to_unit(theta_m + dt, phi_m + dp), sphere)
        rm, d0m, _ = parameterize_rays(origins, sph_to_unit(theta_m - dt, phi_m - dp), sphere)
        diff = rp - rm
        diff[..., 1::2] = wrap_angle(diff[..., 1::2])
        out.append((diff * NORMALIZATION_SCALE / (2 * h), (d0p - d0m) / (2 * h)))
    (jr_t, jd_t), (jr_p, jd_p) = out
    return jr_t, jr_p, jd_t, jd_p


def derive_normals(rays, d_hat, grads, sphere: BoundingSphere, d0, entry_term=True):
    """Vectorized surface normals from distance-field input gradients.

    ``grads`` holds d(d_hat)/d(normalized ray) with d_hat the normalized
    distance (fraction of the diameter). With ``entry_term`` the variation of
    the entry offset d0 with the viewing direction is included in the radial
    derivative; without it the entry offset is held fixed.

    Returns ``(normals, magnitude, stretch, status)``; status 0 = ok,
    1 = direction at a coordinate pole, 2 = degenerate cross product. Failed
    rays get a zero normal.
    """
    rays = np.asarray(rays, dtype=np.float64).reshape(-1, 4)
    d_hat = np.asarray(d_hat, dtype=np.float64).reshape(-1)
    grads = np.asarray(grads, dtype=np.float64).reshape(-1, 4)
    d0 = np.asarray(d0, dtype=np.float64).reshape(-1)
    D = sphere.diameter

    p_in, _, m = rays_to_points(rays, sphere)
    origins = p_in - d0[:, None] * m
    theta, phi = unit_to_sph(m)
    st, ct = np.sin(theta), np.cos(theta)
    sp, cp = np.sin(phi), np.cos(phi)

    jr_t, jr_p, jd_t, jd_p = _direction_jacobian(origins, theta, phi, sphere)
    dd_t = np.sum(grads * jr_t, axis=-1)
    dd_p = np.sum(grads * jr_p, axis=-1)
    R = D * d_hat + d0
    R_t = D * dd_t + (jd_t if entry_term else 0.0)
    R_p = D * dd_p + (jd_p if entry_term else 0.0)

    u = np.stack([st * cp, st * sp, ct], axis=-1)
    u_t = np.stack([ct * cp, ct * sp, -st], axis=-1)
    u_p = np.stack([-st * sp, st * cp, np.zeros_like(st)], axis=-1)
    dphi = R_p[:, None] * u + R[:, None] * u_p
    dtheta = R_t[:, None] * u + R[:, None] * u_t
    cross = np.cross(dphi, dtheta)
    mag = np.linalg.norm(cross, axis=-1)

    status = np.zeros(len(rays), dtype=np.int8)
    status[mag < DEGENERATE_EPS] = 2
    status[st < POLE_EPS] = 1
    ok = status == 0
    normals = np.zeros_like(cross)
    normals[ok] = cross[ok] / mag[ok, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        stretch = np.where(ok, mag / (R * R * st), np.inf)
    return normals, mag, stretch, status


def derive_normal(ray, d_hat, grad, sphere: BoundingSphere, d0, entry_term=True) -> NormalResult:
    normals, mag, stretch, status = derive_normals(
        np.asarray(ray, dtype=np.float64)[None], [d_hat], np.asarray(grad)[None],
        sphere, [d0], entry_term=entry_term,
    )
    if status[0] == 1:
        raise PoleSingularity("viewing direction lies at a coordinate pole")
    if status[0] == 2:
        raise DegenerateGradient("normal cross product vanished")
    return NormalResult(n=normals[0], magnitude=float(mag[0]), stretch=float(stretch[0]))
