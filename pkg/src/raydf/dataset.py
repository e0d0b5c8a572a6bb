"""Posed depth scans -> normalized training records.

Two products come out of a set of scans:

* a :class:`SampleStore` of (ray, distance, hit point) records for the
  distance field, and
* :class:`PairSet` visibility pairs labelled by cross-scan reprojection for
  the classifier.

Binary formats (little-endian):

``RAYD`` scan file::

    magic "RAYD" | u32 version | R 9 x f64 (row-major) | t 3 x f64
    | f, cx, cy f64 | H, W u32 | H*W f32 depths (row-major)
    [| "COLR" | H*W*3 f32 colours]

``RAYS`` sample store::

    magic "RAYS" | u32 version | centre 3 x f64 | D f64 | u64 count
    | count x (4 x f32 ray, f32 d, 3 x f32 point, u32 scan, u32 pixel)
    [| "COLR" | count*3 f32 colours]

Points in the store are world coordinates (meters); distances are fractions
of the sphere diameter.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .binio import FORMAT_VERSION, read_header, take
from .errors import BadMagic, EmptyStore, InsufficientScans, NegativeResult, OutOfRange
from .geometry import (
    BoundingSphere,
    Camera,
    Ray,
    in_frame,
    obliquity,
    pixel_grid,
    pixel_rays,
    rays_to_points,
    reproject_points,
)

log = logging.getLogger(__name__)

SCAN_MAGIC = b"RAYD"
STORE_MAGIC = b"RAYS"
COLOR_TAG = b"COLR"

RECORD_DTYPE = np.dtype(
    [("ray", "<f4", (4,)), ("d", "<f4"), ("p", "<f4", (3,)), ("scan", "<u4"), ("pixel", "<u4")]
)


@dataclass
class DepthScan:
    camera: Camera
    depth: np.ndarray
    scan_id: int = 0
    color: np.ndarray | None = None

    def __post_init__(self):
        self.depth = np.asarray(self.depth)
        if self.depth.shape != self.camera.shape:
            raise ValueError(f"raster {self.depth.shape} does not match camera {self.camera.shape}")
        if np.any(self.depth < 0):
            raise ValueError("negative depth in scan")


# ---------------------------------------------------------------------------
# normalization


def normalize_rays(rays):
    rays = np.asarray(rays, dtype=np.float64)
    th = rays[..., 0::2]
    ph = rays[..., 1::2]
    if np.any((th < 0) | (th > np.pi)) or np.any((ph < -np.pi) | (ph > np.pi)):
        raise OutOfRange("ray angles outside theta in [0, pi], phi in [-pi, pi]")
    out = np.empty_like(rays)
    out[..., 0::2] = 2.0 * th / np.pi - 1.0
    out[..., 1::2] = ph / np.pi
    return out


def denormalize_rays(rays_n):
    rays_n = np.asarray(rays_n, dtype=np.float64)
    if np.any(np.abs(rays_n) > 1.0):
        raise OutOfRange("normalized ray outside [-1, 1]")
    out = np.empty_like(rays_n)
    out[..., 0::2] = (rays_n[..., 0::2] + 1.0) * (np.pi / 2.0)
    out[..., 1::2] = rays_n[..., 1::2] * np.pi
    return out


def normalize_ray(ray) -> tuple:
    return tuple(float(x) for x in normalize_rays(np.asarray(ray, dtype=np.float64)))


def denormalize_ray(ray_n) -> Ray:
    return Ray(*map(float, denormalize_rays(np.asarray(ray_n, dtype=np.float64))))


# ---------------------------------------------------------------------------
# per-scan geometry


@dataclass
class ScanGeometry:
    """Every pixel of a scan expressed as a ray with its surface distance."""

    scan: DepthScan
    rays: np.ndarray  # (H, W, 4) raw angles
    d0: np.ndarray
    p_in: np.ndarray
    m: np.ndarray
    dist: np.ndarray  # meters from entry, nan where invalid
    valid: np.ndarray

    @classmethod
    def build(cls, scan: DepthScan, sphere: BoundingSphere):
        cam = scan.camera
        rays, d0, ok, m = pixel_rays(cam, sphere)
        u, v = pixel_grid(cam)
        valid = ok & (scan.depth > 0)
        dist = np.where(valid, scan.depth * obliquity(u, v, cam) - d0, np.nan)
        if np.any(dist[valid] < 0):
            raise NegativeResult(f"scan {scan.scan_id}: surface in front of the sphere entry")
        p_in = cam.origin + d0[..., None] * m
        return cls(scan, rays, d0, p_in, m, dist, valid)

    @property
    def points(self):
        return self.p_in + np.nan_to_num(self.dist)[..., None] * self.m


# ---------------------------------------------------------------------------
# sample store


@dataclass
class SampleStore:
    sphere: BoundingSphere
    rays: np.ndarray  # normalized, (N, 4)
    dist: np.ndarray  # normalized by D, (N,)
    points: np.ndarray  # world, (N, 3)
    scan_ids: np.ndarray
    pixels: np.ndarray
    colors: np.ndarray | None = None

    def __len__(self):
        return len(self.dist)

    def as_float32(self) -> "SampleStore":
        """The store quantized exactly as it is written to disk."""
        return SampleStore(
            self.sphere,
            self.rays.astype(np.float32),
            self.dist.astype(np.float32),
            self.points.astype(np.float32),
            self.scan_ids.astype(np.uint32),
            self.pixels.astype(np.uint32),
            None if self.colors is None else self.colors.astype(np.float32),
        )


def _keep_count(n, sparsity):
    return min(n, max(1, int(np.floor(sparsity * n + 0.5)))) if n else 0


def convert_scans(scans, sphere: BoundingSphere, sparsity=1.0, rng_seed=0) -> SampleStore:
    """One record per valid pixel; with ``sparsity < 1`` a uniformly random
    subset of exactly ``round(sparsity * n)`` pixels is kept per scan."""
    if not scans:
        raise EmptyStore("no scans given")
    if not 0.0 < sparsity <= 1.0:
        raise ValueError("sparsity must lie in (0, 1]")
    parts = []
    for k, scan in enumerate(scans):
        g = ScanGeometry.build(scan, sphere)
        idx = np.flatnonzero(g.valid.ravel())
        if sparsity < 1.0:
            rng = np.random.default_rng([rng_seed, k])
            idx = np.sort(rng.permutation(idx)[: _keep_count(len(idx), sparsity)])
        rays = g.rays.reshape(-1, 4)[idx]
        dist = g.dist.ravel()[idx]
        pts = g.points.reshape(-1, 3)[idx]
        col = None if scan.color is None else scan.color.reshape(-1, 3)[idx]
        parts.append((rays, dist, pts, np.full(len(idx), scan.scan_id), idx, col))
    n = sum(len(p[1]) for p in parts)
    if n == 0:
        raise EmptyStore("no valid pixels in the given scans")
    has_color = all(p[5] is not None for p in parts)
    return SampleStore(
        sphere=sphere,
        rays=normalize_rays(np.concatenate([p[0] for p in parts])),
        dist=np.concatenate([p[1] for p in parts]) / sphere.diameter,
        points=np.concatenate([p[2] for p in parts]),
        scan_ids=np.concatenate([p[3] for p in parts]).astype(np.uint32),
        pixels=np.concatenate([p[4] for p in parts]).astype(np.uint32),
        colors=np.concatenate([p[5] for p in parts]) if has_color else None,
    )


# ---------------------------------------------------------------------------
# visibility pairs


@dataclass
class PairSet:
    ray1: np.ndarray  # normalized (N, 4)
    ray2: np.ndarray
    point1: np.ndarray  # normalized (N, 3)
    label: np.ndarray  # uint8
    points: np.ndarray = field(repr=False, default=None)  # world hit points of ray1
    src: np.ndarray = field(repr=False, default=None)  # (scan index, pixel)
    dst: np.ndarray = field(repr=False, default=None)

    def __len__(self):
        return len(self.label)

    @property
    def positive_fraction(self) -> float:
        return float(self.label.mean()) if len(self) else 0.0

    def subset(self, idx) -> "PairSet":
        pick = lambda a: None if a is None else a[idx]
        return PairSet(self.ray1[idx], self.ray2[idx], self.point1[idx], self.label[idx],
                       pick(self.points), pick(self.src), pick(self.dst))

    @staticmethod
    def concat(sets) -> "PairSet":
        cat = lambda name: np.concatenate([getattr(s, name) for s in sets])
        return PairSet(cat("ray1"), cat("ray2"), cat("point1"), cat("label"),
                       cat("points"), cat("src"), cat("dst"))


def label_reprojection(points, target: ScanGeometry, epsilon):
    """Reproject world points into a target scan and apply the closeness test.

    Returns ``(label, usable, pixel_index)``; unusable entries (behind the
    camera, out of frame, or landing on an empty pixel) carry label 0.
    """
    cam = target.scan.camera
    u, v, z = reproject_points(points, cam)
    usable = (z > 0) & in_frame(u, v, cam)
    ui = np.where(usable, np.rint(u), 0).astype(np.int64)
    vi = np.where(usable, np.rint(v), 0).astype(np.int64)
    usable &= target.valid[ui, vi]
    p_in_k = target.p_in[ui, vi]
    d_tilde = np.linalg.norm(points - p_in_k, axis=-1)
    d_k = target.dist[ui, vi]
    label = usable & (np.abs(d_tilde - d_k) <= epsilon)
    return label.astype(np.uint8), usable, ui * cam.width + vi


def build_visibility_pairs(scans, sphere: BoundingSphere, epsilon=0.010, budget=None,
                           rng_seed=0, allow_self=False, geometries=None) -> PairSet:
    """Cross-scan reprojection pairs with closeness labels.

    Every valid source pixel is reprojected into every other scan; pairs
    that fall out of frame or on an empty pixel are dropped. The result is
    shuffled and truncated to ``budget``.
    """
    if len(scans) < 2:
        raise InsufficientScans("visibility pairs need at least two scans")
    geos = geometries or [ScanGeometry.build(s, sphere) for s in scans]
    chunks = []
    for a, ga in enumerate(geos):
        src_idx = np.flatnonzero(ga.valid.ravel())
        pts = ga.points.reshape(-1, 3)[src_idx]
        rays_a = ga.rays.reshape(-1, 4)[src_idx]
        for b, gb in enumerate(geos):
            if b == a and not allow_self:
                continue
            label, usable, pix = label_reprojection(pts, gb, epsilon)
            if not usable.any():
                continue
            sel = np.flatnonzero(usable)
            chunks.append(PairSet(
                ray1=rays_a[sel],
                ray2=gb.rays.reshape(-1, 4)[pix[sel]],
                point1=pts[sel],
                label=label[sel],
                points=pts[sel],
                src=np.stack([np.full(len(sel), a), src_idx[sel]], axis=1),
                dst=np.stack([np.full(len(sel), b), pix[sel]], axis=1),
            ))
    if not chunks:
        raise EmptyStore("no usable visibility pairs")
    pairs = PairSet.concat(chunks)
    rng = np.random.default_rng(rng_seed)
    order = rng.permutation(len(pairs))
    if budget is not None:
        order = order[:budget]
    pairs = pairs.subset(order)
    pairs.ray1 = normalize_rays(pairs.ray1)
    pairs.ray2 = normalize_rays(pairs.ray2)
    pairs.point1 = sphere.normalize_points(pairs.point1)
    log.info("built %d visibility pairs, %.1f%% visible", len(pairs), 100 * pairs.positive_fraction)
    return pairs


# ---------------------------------------------------------------------------
# file formats


def pack_camera(cam: Camera) -> bytes:
    return struct.pack("<9d3d3d2I", *cam.R.ravel(), *cam.t, cam.f, cam.cx, cam.cy, cam.height, cam.width)


CAMERA_BLOCK = struct.calcsize("<9d3d3d2I")


def unpack_camera(buf: bytes) -> Camera:
    vals = struct.unpack("<9d3d3d2I", buf)
    return Camera(R=np.array(vals[:9]).reshape(3, 3), t=np.array(vals[9:12]), f=vals[12],
                  cx=vals[13], cy=vals[14], height=vals[15], width=vals[16])


def write_scan(path, scan: DepthScan):
    with open(path, "wb") as fh:
        fh.write(SCAN_MAGIC + struct.pack("<I", FORMAT_VERSION))
        fh.write(pack_camera(scan.camera))
        fh.write(np.ascontiguousarray(scan.depth, dtype="<f4").tobytes())
        if scan.color is not None:
            fh.write(COLOR_TAG + np.ascontiguousarray(scan.color, dtype="<f4").tobytes())


def read_scan(path, scan_id=None) -> DepthScan:
    data = Path(path).read_bytes()
    off = read_header(data, SCAN_MAGIC, path)
    buf, off = take(data, off, CAMERA_BLOCK, path)
    cam = unpack_camera(buf)
    n = cam.height * cam.width
    buf, off = take(data, off, 4 * n, path)
    depth = np.frombuffer(buf, dtype="<f4").reshape(cam.height, cam.width).copy()
    color = None
    if off < len(data):
        tag, off = take(data, off, 4, path)
        if tag != COLOR_TAG:
            raise BadMagic(f"{path}: unknown trailer {tag!r}")
        buf, off = take(data, off, 12 * n, path)
        color = np.frombuffer(buf, dtype="<f4").reshape(cam.height, cam.width, 3).copy()
    return DepthScan(cam, depth, 0 if scan_id is None else scan_id, color)


def write_store(path, store: SampleStore):
    rec = np.zeros(len(store), dtype=RECORD_DTYPE)
    rec["ray"] = store.rays
    rec["d"] = store.dist
    rec["p"] = store.points
    rec["scan"] = store.scan_ids
    rec["pixel"] = store.pixels
    with open(path, "wb") as fh:
        fh.write(STORE_MAGIC + struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<4dQ", *store.sphere.center, store.sphere.diameter, len(store)))
        fh.write(rec.tobytes())
        if store.colors is not None:
            fh.write(COLOR_TAG + np.ascontiguousarray(store.colors, dtype="<f4").tobytes())


def read_store(path) -> SampleStore:
    data = Path(path).read_bytes()
    off = read_header(data, STORE_MAGIC, path)
    buf, off = take(data, off, struct.calcsize("<4dQ"), path)
    cx, cy, cz, D, count = struct.unpack("<4dQ", buf)
    buf, off = take(data, off, count * RECORD_DTYPE.itemsize, path)
    rec = np.frombuffer(buf, dtype=RECORD_DTYPE)
    colors = None
    if off < len(data):
        tag, off = take(data, off, 4, path)
        if tag != COLOR_TAG:
            raise BadMagic(f"{path}: unknown trailer {tag!r}")
        buf, off = take(data, off, 12 * count, path)
        colors = np.frombuffer(buf, dtype="<f4").reshape(count, 3).copy()
    return SampleStore(
        sphere=BoundingSphere(np.array([cx, cy, cz]), D),
        rays=rec["ray"].copy(),
        dist=rec["d"].copy(),
        points=rec["p"].copy(),
        scan_ids=rec["scan"].copy(),
        pixels=rec["pixel"].copy(),
        colors=colors,
    )
