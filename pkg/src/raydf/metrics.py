"""Evaluation metrics: ADE, Chamfer distance and classifier scores."""

from __future__ import annotations

import numpy as np

from .errors import EmptyMask, EmptySet, ShapeMismatch


def ade(pred_views, gt_views, masks=None) -> float:
    """Absolute distance error in centimeters.

    Each argument is one raster (meters) or a list of them. The per-view mean
    over masked pixels is averaged across views.
    """
    if isinstance(pred_views, np.ndarray) and pred_views.ndim <= 2:
        pred_views, gt_views = [pred_views], [gt_views]
        masks = None if masks is None else [masks]
    if len(pred_views) != len(gt_views) or not pred_views:
        raise ShapeMismatch("prediction and ground-truth view counts differ")
    per_view = []
    for i, (p, g) in enumerate(zip(pred_views, gt_views)):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise ShapeMismatch(f"view {i}: prediction {p.shape} vs ground truth {g.shape}")
        m = np.ones(p.shape, bool) if masks is None else np.asarray(masks[i], bool)
        if not m.any():
            raise EmptyMask(f"view {i} has no valid pixels")
        per_view.append(np.abs(p[m] - g[m]).mean())
    return 100.0 * float(np.mean(per_view))


def _sq_dist(a, b):
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def nn_sq_dist_brute(queries, points, chunk=512):
    """Squared distance from every query to its nearest neighbour."""
    q = np.asarray(queries, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64)
    out = np.empty(len(q))
    for s in range(0, len(q), chunk):
        out[s:s + chunk] = _sq_dist(q[s:s + chunk], p).min(axis=1)
    return out


def nn_sq_dist_grid(queries, points, cell=None):
    """Same result as :func:`nn_sq_dist_brute`, using a uniform hash grid.

    Queries are processed one occupied cell at a time; the search ring grows
    until the best candidate is provably closer than anything outside it.
    """
    q = np.asarray(queries, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64)
    lo = np.minimum(q.min(axis=0), p.min(axis=0))
    if cell is None:
        span = np.maximum(p.max(axis=0) - p.min(axis=0), 1e-12)
        cell = float(np.prod(span) / max(len(p), 1)) ** (1.0 / 3.0) * 2.0
        cell = max(cell, float(span.max()) / 256.0)
    pc = np.floor((p - lo) / cell).astype(np.int64)
    qc = np.floor((q - lo) / cell).astype(np.int64)
    buckets = {}
    order = np.lexsort(pc.T[::-1])
    keys, starts = np.unique(pc[order], axis=0, return_index=True)
    ends = np.append(starts[1:], len(order))
    for k, s, e in zip(map(tuple, keys), starts, ends):
        buckets[k] = order[s:e]
    max_ring = int(np.max(np.abs(np.concatenate([pc, qc]) - np.concatenate([pc, qc]).min(axis=0)))) + 1

    out = np.full(len(q), np.inf)
    qkeys, qinv = np.unique(qc, axis=0, return_inverse=True)
    qinv = qinv.ravel()
    for ci, key in enumerate(qkeys):
        members = np.flatnonzero(qinv == ci)
        best = np.full(len(members), np.inf)
        searched = set()
        r = 0
        while True:
            cand = []
            rng_ = range(-r, r + 1)
            for dx in rng_:
                for dy in rng_:
                    for dz in rng_:
                        if max(abs(dx), abs(dy), abs(dz)) != r:
                            continue
                        nb = (key[0] + dx, key[1] + dy, key[2] + dz)
                        if nb in buckets and nb not in searched:
                            searched.add(nb)
                            cand.append(buckets[nb])
            if cand:
                idx = np.concatenate(cand)
                best = np.minimum(best, _sq_dist(q[members], p[idx]).min(axis=1))
            # everything outside the searched block is at least r*cell away
            if np.all(best <= (r * cell) ** 2) or r > max_ring:
                break
            r += 1
        out[members] = best
    return out


def chamfer(points_a, points_b, accelerator="grid"):
    """Symmetric squared Chamfer distance, ``(mean, median)``.

    Both statistics average the two directions (A->B and B->A).
    """
    a = np.asarray(points_a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(points_b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise EmptySet("chamfer distance needs two non-empty point sets")
    nn = nn_sq_dist_grid if accelerator == "grid" else nn_sq_dist_brute
    ab = nn(a, b)
    ba = nn(b, a)
    mean = 0.5 * (ab.mean() + ba.mean())
    median = 0.5 * (np.median(ab) + np.median(ba))
    return float(mean), float(median)


def binary_metrics(scores, labels, threshold=0.5):
    """Accuracy and F1 of the positive class, both in percent.

    F1 is 0 when there are no true positives.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.size == 0:
        raise EmptySet("no scores to evaluate")
    pred = scores >= threshold
    tp = np.sum(pred & labels)
    fp = np.sum(pred & ~labels)
    fn = np.sum(~pred & labels)
    acc = 100.0 * np.mean(pred == labels)
    f1 = 0.0 if tp == 0 else 100.0 * 2 * tp / (2 * tp + fp + fn)
    return float(acc), float(f1)
