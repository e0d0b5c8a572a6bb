"""Rendering from a trained distance field, and evaluation reports.

Rendering queries the network exactly once per pixel whose ray meets the
bounding sphere; that single pass yields the distance and, through the input
gradient, the surface normal.

``RAYR`` raster file (little-endian)::

    magic "RAYR" | u32 version | camera block (as in RAYD) | u32 channels
    | H*W*channels f32 (row-major, channel fastest)

Channels written by :func:`write_rendered`: distance, depth, nx, ny, nz,
outlier, valid.
"""

from __future__ import annotations

import struct
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import nn
from .binio import FORMAT_VERSION, read_header, take
from .dataset import CAMERA_BLOCK, ScanGeometry, normalize_rays, pack_camera, unpack_camera
from .errors import EmptySet, ShapeMismatch
from .geometry import BoundingSphere, Camera, derive_normals, distance_to_depth, pixel_grid, pixel_rays
from .metrics import ade, binary_metrics, chamfer

RASTER_MAGIC = b"RAYR"
RASTER_CHANNELS = ("distance", "depth", "nx", "ny", "nz", "outlier", "valid")
RENDER_CHUNK = 16384


@dataclass
class RenderedView:
    camera: Camera
    distance: np.ndarray  # (H, W) meters from sphere entry, nan where invalid
    depth: np.ndarray  # (H, W) camera z-depth, 0 where invalid
    normals: np.ndarray  # (H, W, 3)
    outlier: np.ndarray  # (H, W) bool
    valid: np.ndarray  # (H, W) bool, ray meets the bounding sphere
    points: np.ndarray  # (H, W, 3) world surface points
    eval_count: int = 0
    seconds: float = 0.0

    def surface_points(self, mask=None, keep_outliers=False):
        """Points and normals of un-flagged pixels in row-major order."""
        sel = self.valid if mask is None else (self.valid & np.asarray(mask, bool))
        if not keep_outliers:
            sel = sel & ~self.outlier
        return self.points[sel], self.normals[sel]


def render_view(params: nn.MlpParams, cam: Camera, sphere: BoundingSphere, outlier_threshold=5.0,
                entry_term=True, chunk=RENDER_CHUNK) -> RenderedView:
    """Render distance, depth and normals for every pixel of ``cam``.

    A pixel is flagged as an outlier when its normal stretch (cross-product
    norm over ``R^2 sin(theta)``) exceeds ``outlier_threshold`` or the normal
    cannot be derived.
    """
    t0 = time.perf_counter()
    H, W = cam.shape
    rays, d0, ok, m = pixel_rays(cam, sphere)
    u, v = pixel_grid(cam)
    idx = np.flatnonzero(ok.ravel())
    rays_ok = rays.reshape(-1, 4)[idx]
    d0_ok = d0.ravel()[idx]
    x = normalize_rays(rays_ok).astype(params.layers[0].weight.dtype)

    d_hat = np.empty(len(idx))
    grads = np.empty((len(idx), 4))
    count = 0
    for s in range(0, len(idx), chunk):
        out, gx = nn.input_gradient(params, x[s:s + chunk])
        d_hat[s:s + chunk] = out[:, 0]
        grads[s:s + chunk] = gx
        count += len(out)
    d_hat = np.clip(d_hat, 0.0, 1.0)
    normals, _, stretch, status = derive_normals(rays_ok, d_hat, grads, sphere, d0_ok, entry_term=entry_term)

    dist = np.full(H * W, np.nan)
    dist[idx] = d_hat * sphere.diameter
    nrm = np.zeros((H * W, 3))
    nrm[idx] = normals
    outlier = np.zeros(H * W, bool)
    outlier[idx] = (status != 0) | ~(stretch <= outlier_threshold)
    dist = dist.reshape(H, W)
    depth = np.where(ok, distance_to_depth(np.nan_to_num(dist), u, v, cam, d0), 0.0)
    points = cam.origin + (d0 + np.nan_to_num(dist))[..., None] * m
    points[~ok] = 0.0
    return RenderedView(cam, dist, depth, nrm.reshape(H, W, 3), outlier.reshape(H, W), ok, points,
                        eval_count=count, seconds=time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricReport:
    ade: float  # centimeters
    cd_mean: float  # squared meters x 1e3
    cd_median: float
    accuracy: float  # percent
    f1: float

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text):
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        return cls(**{k: float(kv[k]) for k in cls.__dataclass_fields__})


def _fmt(v):
    return repr(float(v))


def classifier_metrics(params, pairs, threshold=0.5):
    """Accuracy and F1 (percent) of a visibility classifier on labelled pairs."""
    from .training.classifier import classifier_forward

    if len(pairs) == 0:
        raise EmptySet("no labelled pairs")
    scores = classifier_forward(params, pairs.ray1, pairs.ray2, pairs.point1)
    return binary_metrics(scores, pairs.label, threshold)


def heldout_ade(views, scans, sphere: BoundingSphere):
    """ADE (cm) of rendered views against the matching ground-truth scans,
    over pixels with a surface in the scan."""
    if len(views) != len(scans):
        raise ShapeMismatch("one rendered view per scan is required")
    preds, gts = [], []
    for view, scan in zip(views, scans):
        if view.distance.shape != scan.depth.shape:
            raise ShapeMismatch(f"view {view.distance.shape} vs scan {scan.depth.shape}")
        g = ScanGeometry.build(scan, sphere)
        preds.append(view.distance[g.valid])
        gts.append(g.dist[g.valid])
    return ade(preds, gts)


def reconstruct_points(views, scans=None):
    """Outlier-cleaned world points of the rendered views.

    With ``scans`` the points are restricted to pixels where the scan sees a
    surface (the object mask).
    """
    pts = []
    for i, view in enumerate(views):
        mask = None if scans is None else scans[i].depth > 0
        pts.append(view.surface_points(mask)[0])
    return np.concatenate(pts) if pts else np.zeros((0, 3))


def subsample(points, n, rng_seed=0):
    if len(points) <= n:
        return points
    idx = np.sort(np.random.default_rng(rng_seed).choice(len(points), n, replace=False))
    return points[idx]


def evaluate(params, scans, sphere: BoundingSphere, scene=None, classifier=None, pairs=None,
             n_points=10000, rng_seed=0, outlier_threshold=5.0, views=None) -> MetricReport:
    """Full metric report on held-out scans.

    Chamfer distance needs ``scene`` for the ground-truth surface samples;
    classifier scores need ``classifier`` and ``pairs``. Missing parts are
    reported as NaN.
    """
    if views is None:
        views = [render_view(params, s.camera, sphere, outlier_threshold) for s in scans]
    a = heldout_ade(views, scans, sphere)
    cd_mean = cd_median = float("nan")
    if scene is not None:
        pred = subsample(reconstruct_points(views, scans), n_points, rng_seed)
        gt = scene.sample_surface(n_points, np.random.default_rng([rng_seed, 1]))
        if len(pred):
            cd_mean, cd_median = (1e3 * c for c in chamfer(pred, gt))
    acc = f1 = float("nan")
    if classifier is not None and pairs is not None:
        acc, f1 = classifier_metrics(classifier, pairs)
    return MetricReport(a, cd_mean, cd_median, acc, f1)


# ---------------------------------------------------------------------------
# file output


def export_pointcloud(views, path, masks=None):
    """ASCII PLY with x y z nx ny nz per un-flagged pixel.

    Ordering is view index, then row-major pixel. Returns the point count.
    """
    if isinstance(views, RenderedView):
        views = [views]
    parts = [v.surface_points(None if masks is None else masks[i]) for i, v in enumerate(views)]
    pts = np.concatenate([p for p, _ in parts]) if parts else np.zeros((0, 3))
    nrm = np.concatenate([n for _, n in parts]) if parts else np.zeros((0, 3))
    if len(pts) == 0:
        raise EmptySet("no valid points to export")
    header = (
        "ply\nformat ascii 1.0\n"
        f"element vertex {len(pts)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property float nx\nproperty float ny\nproperty float nz\n"
        "end_header\n"
    )
    with open(path, "w") as fh:
        fh.write(header)
        np.savetxt(fh, np.hstack([pts, nrm]), fmt="%.9g")
    return len(pts)


def read_pointcloud(path):
    """Parse a PLY written by :func:`export_pointcloud` into ``(points, normals)``."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    end = lines.index("end_header")
    count = next(int(l.split()[2]) for l in lines[:end] if l.startswith("element vertex"))
    body = np.array([l.split() for l in lines[end + 1:end + 1 + count]], dtype=np.float64).reshape(count, 6)
    return body[:, :3], body[:, 3:]


def write_rendered(path, view: RenderedView):
    stack = np.stack([
        np.nan_to_num(view.distance), view.depth, *np.moveaxis(view.normals, -1, 0),
        view.outlier.astype(np.float64), view.valid.astype(np.float64),
    ], axis=-1)
    with open(path, "wb") as fh:
        fh.write(RASTER_MAGIC + struct.pack("<I", FORMAT_VERSION))
        fh.write(pack_camera(view.camera))
        fh.write(struct.pack("<I", stack.shape[-1]))
        fh.write(np.ascontiguousarray(stack, dtype="<f4").tobytes())


def read_raster(path):
    """Return ``(camera, array (H, W, channels))`` from a RAYR file."""
    data = Path(path).read_bytes()
    off = read_header(data, RASTER_MAGIC, path)
    buf, off = take(data, off, CAMERA_BLOCK, path)
    cam = unpack_camera(buf)
    buf, off = take(data, off, 4, path)
    (channels,) = struct.unpack("<I", buf)
    buf, off = take(data, off, 4 * cam.height * cam.width * channels, path)
    return cam, np.frombuffer(buf, dtype="<f4").reshape(cam.height, cam.width, channels).copy()


def read_rendered(path) -> RenderedView:
    cam, a = read_raster(path)
    if a.shape[-1] != len(RASTER_CHANNELS):
        raise ShapeMismatch(f"{path}: expected {len(RASTER_CHANNELS)} channels, found {a.shape[-1]}")
    a = a.astype(np.float64)
    valid = a[..., 6] > 0.5
    dist = np.where(valid, a[..., 0], np.nan)
    return RenderedView(cam, dist, a[..., 1], a[..., 2:5], a[..., 5] > 0.5, valid,
                        np.zeros(a.shape[:2] + (3,)), eval_count=int(valid.sum()))


def write_pgm(path, depth, valid=None):
    """16-bit PGM preview of a depth raster plus a ``.txt`` sidecar holding
    the linear mapping ``depth = near + (value - 1) * scale`` (0 = no data)."""
    depth = np.asarray(depth, dtype=np.float64)
    valid = depth > 0 if valid is None else np.asarray(valid, bool) & (depth > 0)
    near = float(depth[valid].min()) if valid.any() else 0.0
    far = float(depth[valid].max()) if valid.any() else 0.0
    scale = (far - near) / 65534.0 if far > near else 1.0
    img = np.zeros(depth.shape, dtype=">u2")
    img[valid] = np.rint((depth[valid] - near) / scale).astype(np.int64) + 1
    H, W = depth.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n65535\n".encode())
        fh.write(img.tobytes())
    Path(str(path) + ".txt").write_text(f"near={near!r}\nfar={far!r}\nscale={scale!r}\n")
