"""Ray-surface distance field training under multi-view consistency.

For every primary training ray with hit point ``p`` we draw ``M`` extra rays
through ``p``, score each (primary, extra) pair with the frozen visibility
classifier and fit all ``M + 1`` predictions with the visibility-weighted
loss::

    loss = (|d_hat - d| + sum_m v_m |d_hat_m - d_tilde_m|) / (sum_m v_m + 1)

averaged over the batch. ``M = 0`` reduces this to plain L1 regression on the
training rays.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import nn
from ..dataset import SampleStore, normalize_rays
from ..errors import MissingClassifier, NonFiniteLoss
from ..geometry import BoundingSphere, sample_multiview_batch

log = logging.getLogger(__name__)


@dataclass
class DistanceConfig:
    epochs: int = 10
    batch_size: int = 8192
    lr_init: float = 1e-5
    lr_final: float = 1e-8
    M: int = 20
    loss: str = "l1"
    noise_var: float = 0.0
    threshold: float | None = None
    radiance: bool = False
    radiance_weight: float = 1.0
    radiance_hidden: int = 256
    layers: int = 5
    hidden: int = 256
    omega0: float = 30.0
    seed: int = 0

    def __post_init__(self):
        if self.M < 0:
            raise ValueError("M must be non-negative")
        if self.noise_var < 0:
            raise ValueError("noise variance must be non-negative")
        if self.loss not in ("l1", "l2"):
            raise ValueError(f"unknown loss norm {self.loss!r}")


@dataclass
class MultiViewBatch:
    rays: np.ndarray  # (B, 4) normalized primary rays
    dist: np.ndarray  # (B,) normalized targets
    points: np.ndarray  # (B, 3) world hit points
    mv_rays: np.ndarray  # (B, M, 4) normalized
    mv_dist: np.ndarray  # (B, M) normalized entry->point distances
    visibility: np.ndarray  # (B, M) in [0, 1]
    colors: np.ndarray | None = None

    @property
    def M(self):
        return self.mv_rays.shape[1]

    def all_rays(self):
        """Primary rays followed by the flattened multi-view rays."""
        return np.concatenate([self.rays, self.mv_rays.reshape(-1, 4)], axis=0)


def build_multiview_batch(rays, dist, points, scorer, M, sphere: BoundingSphere, noise_var=0.0,
                          rng_seed=0, threshold=None, colors=None) -> MultiViewBatch:
    """Assemble one batch of primary rays with their scored multi-view rays.

    ``scorer(ray1, ray2, point1)`` takes normalized inputs and returns
    visibility scores; it may be a trained classifier or an oracle.
    """
    rays = np.asarray(rays)
    B = len(rays)
    if M == 0:
        empty = np.zeros((B, 0))
        return MultiViewBatch(rays, np.asarray(dist), points, np.zeros((B, 0, 4)), empty, empty, colors)
    if scorer is None:
        raise MissingClassifier("multi-view rays need a visibility scorer")
    rng = np.random.default_rng(rng_seed)
    mv_raw, d_tilde = sample_multiview_batch(points, M, sphere, rng)
    mv_rays = normalize_rays(mv_raw)
    ray1 = np.repeat(rays, M, axis=0)
    pts = np.repeat(sphere.normalize_points(points), M, axis=0)
    v = np.asarray(scorer(ray1, mv_rays.reshape(-1, 4), pts), dtype=np.float64).reshape(B, M)
    if noise_var > 0:
        v = np.clip(v + np.sqrt(noise_var) * rng.standard_normal(v.shape), 0.0, 1.0)
    if threshold is not None:
        v = (v >= threshold).astype(np.float64)
    return MultiViewBatch(rays, np.asarray(dist), points, mv_rays, d_tilde / sphere.diameter, v, colors)


def multiview_loss(d_hat, d, d_hat_mv, d_tilde, v, norm="l1"):
    """Visibility-weighted consistency loss and its exact gradients.

    Shapes: ``d_hat, d`` (B,), ``d_hat_mv, d_tilde, v`` (B, M). Returns
    ``(loss, grad_primary, grad_multiview)``.
    """
    d_hat = np.asarray(d_hat, dtype=np.float64)
    d_hat_mv = np.asarray(d_hat_mv, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    B = len(d_hat)
    e0 = d_hat - np.asarray(d, dtype=np.float64)
    em = d_hat_mv - np.asarray(d_tilde, dtype=np.float64)
    denom = v.sum(axis=1) + 1.0
    if norm == "l1":
        per = (np.abs(e0) + (np.abs(em) * v).sum(axis=1)) / denom
        g0 = np.sign(e0) / denom / B
        gm = v * np.sign(em) / denom[:, None] / B
    else:
        per = (e0 * e0 + (em * em * v).sum(axis=1)) / denom
        g0 = 2.0 * e0 / denom / B
        gm = 2.0 * v * em / denom[:, None] / B
    return float(per.mean()), g0, gm


def _radiance_loss(c_hat, c_hat_mv, c, v):
    """Mean-squared colour error with the same visibility weighting."""
    B = len(c)
    e0 = c_hat - c
    em = c_hat_mv - c[:, None, :]
    denom = v.sum(axis=1) + 1.0
    per = ((e0 * e0).mean(axis=-1) + ((em * em).mean(axis=-1) * v).sum(axis=1)) / denom
    g0 = (2.0 / 3.0) * e0 / denom[:, None] / B
    gm = (2.0 / 3.0) * em * v[..., None] / denom[:, None, None] / B
    return float(per.mean()), g0, gm


def init_distance_net(config: DistanceConfig, rng_seed=None) -> nn.MlpParams:
    sizes = [4] + [config.hidden] * (config.layers - 1) + [1]
    return nn.init_siren(sizes, config.omega0, config.seed if rng_seed is None else rng_seed)


def init_radiance_branch(config: DistanceConfig, rng_seed=None) -> nn.MlpParams:
    seed = [config.seed if rng_seed is None else rng_seed, 7]
    params = nn.init_siren([config.hidden, config.radiance_hidden, 3], config.omega0, seed,
                           final_activation="sigmoid")
    # the branch input is a sine feature, not a raw coordinate
    bound = np.sqrt(6.0 / config.hidden) / config.omega0
    rng = np.random.default_rng(seed + [1])
    params.layers[0].weight[:] = rng.uniform(-bound, bound, params.layers[0].weight.shape)
    params.layers[0].bias[:] = rng.uniform(-bound, bound, params.layers[0].bias.shape)
    return params


def predict_distance(params: nn.MlpParams, rays_n, chunk=65536):
    """Normalized distance predictions clamped to [0, 1]."""
    rays_n = np.asarray(rays_n).reshape(-1, 4)
    out = np.empty(len(rays_n), dtype=np.float64)
    for s in range(0, len(rays_n), chunk):
        out[s:s + chunk] = nn.forward(params, rays_n[s:s + chunk])[:, 0]
    return np.clip(out, 0.0, 1.0)


@dataclass
class DistanceResult:
    params: nn.MlpParams
    radiance: nn.MlpParams | None
    loss_curve: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)
    state: nn.AdamState | None = None


def train_distance(store: SampleStore, scorer, config: DistanceConfig, checkpoint_dir=None,
                   log_path=None, on_epoch=None) -> DistanceResult:
    """Train the distance field (and optional radiance branch).

    ``scorer`` is required when ``config.M > 0``. ``on_epoch(epoch, params)``
    is called after every epoch, e.g. for held-out evaluation.
    """
    if len(store) == 0:
        raise ValueError("empty sample store")
    if config.M > 0 and scorer is None:
        raise MissingClassifier("M > 0 requires a trained visibility classifier")
    if config.radiance and store.colors is None:
        raise ValueError("radiance branch requested but the store carries no colours")
    sphere = store.sphere
    D = sphere.diameter
    params = init_distance_net(config)
    state = nn.AdamState.zeros_like(params)
    rad = rad_state = None
    if config.radiance:
        rad = init_radiance_branch(config)
        rad_state = nn.AdamState.zeros_like(rad)

    rays = store.rays.astype(np.float32)
    dist = store.dist.astype(np.float64)
    points = store.points.astype(np.float64)
    n = len(store)
    steps_per_epoch = int(np.ceil(n / config.batch_size))
    schedule = nn.LrSchedule.cosine(config.lr_init, config.lr_final, config.epochs * steps_per_epoch)
    log_fh = open(log_path, "w") if log_path else None
    loss_curve, epoch_losses = [], []
    running_abs = 0.0
    running_n = 0
    step = 0
    last_hidden = len(params.layers) - 2
    try:
        for epoch in range(config.epochs):
            perm = np.random.default_rng([config.seed, 201, epoch]).permutation(n)
            total = 0.0
            for b in range(steps_per_epoch):
                idx = perm[b * config.batch_size:(b + 1) * config.batch_size]
                B = len(idx)
                batch = build_multiview_batch(
                    rays[idx], dist[idx], points[idx], scorer, config.M, sphere,
                    noise_var=config.noise_var, rng_seed=[config.seed, 202, epoch, b],
                    threshold=config.threshold,
                    colors=None if store.colors is None else store.colors[idx].astype(np.float64),
                )
                x = batch.all_rays().astype(np.float32)
                out, cache = nn.forward_cache(params, x)
                pred = out[:, 0].astype(np.float64)
                loss, g0, gm = multiview_loss(pred[:B], batch.dist, pred[B:].reshape(B, -1),
                                              batch.mv_dist, batch.visibility, config.loss)
                upstream = np.concatenate([g0, gm.ravel()])[:, None].astype(np.float32)
                extra = None
                if rad is not None:
                    feats = cache[-1][0]
                    c_out, c_cache = nn.forward_cache(rad, feats)
                    c_out = c_out.astype(np.float64)
                    c_loss, c0, cm = _radiance_loss(c_out[:B], c_out[B:].reshape(B, -1, 3),
                                                    batch.colors, batch.visibility)
                    c_up = (config.radiance_weight * np.concatenate([c0, cm.reshape(-1, 3)])).astype(np.float32)
                    rad_grads, feat_grad = nn.backward(rad, feats, c_up, cache=c_cache)
                    extra = {last_hidden: feat_grad}
                    loss = loss + config.radiance_weight * c_loss
                if not np.isfinite(loss):
                    raise NonFiniteLoss(f"non-finite loss at batch {step}", batch_index=step)
                grads, _ = nn.backward(params, x, upstream, cache=cache, extra=extra)
                lr = nn.lr_at(schedule, step)
                nn.adam_step(params, grads, state, lr)
                if rad is not None:
                    nn.adam_step(rad, rad_grads, rad_state, lr)
                running_abs += float(np.abs(pred[:B] - batch.dist).sum())
                running_n += B
                running_ade = 100.0 * D * running_abs / running_n
                loss_curve.append(loss)
                total += loss * B
                if log_fh:
                    log_fh.write(f"{step} {lr:.6e} {loss:.8f} {running_ade:.6f}\n")
                step += 1
            epoch_losses.append(total / n)
            log.info("distance epoch %d: loss %.6f", epoch, epoch_losses[-1])
            if checkpoint_dir is not None:
                nn.write_checkpoint(Path(checkpoint_dir) / f"distance_epoch{epoch:03d}.rayw", params, state)
                if rad is not None:
                    nn.write_checkpoint(Path(checkpoint_dir) / f"radiance_epoch{epoch:03d}.rayw", rad, rad_state)
            if on_epoch is not None:
                on_epoch(epoch, params)
    finally:
        if log_fh:
            log_fh.close()
    return DistanceResult(params, rad, loss_curve, epoch_losses, state)
