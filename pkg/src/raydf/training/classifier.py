"""Dual-ray visibility classifier and its training loop.

The network scores whether two rays meet at the same surface point::

    h(r1, r2, p) = trunk([ (g(r1) + g(r2)) / 2  ,  k(p) ])

``g`` and ``k`` are single SIREN layers; averaging the two ray features makes
the score exactly invariant to the order of the rays.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import nn
from ..dataset import PairSet
from ..errors import NonFiniteLoss, SingleClassData, ShapeMismatch
from ..metrics import binary_metrics

log = logging.getLogger(__name__)


@dataclass
class ClassifierConfig:
    epochs: int = 5
    batch_size: int = 2048
    lr_max: float = 1e-4
    lr_div: float = 25.0
    budget: int | None = None
    epsilon: float = 0.010
    hidden: int = 128
    trunk_layers: int = 4
    omega0: float = 30.0
    holdout: float = 0.1
    pos_weight: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch size must be positive")
        if not self.epsilon > 0:
            raise ValueError("closeness threshold must be positive")


@dataclass
class ClassifierParams:
    g: nn.MlpParams
    k: nn.MlpParams
    trunk: nn.MlpParams

    @property
    def layers(self):
        return self.g.layers + self.k.layers + self.trunk.layers

    def arrays(self):
        return self.g.arrays() + self.k.arrays() + self.trunk.arrays()

    def astype(self, dtype):
        return ClassifierParams(self.g.astype(dtype), self.k.astype(dtype), self.trunk.astype(dtype))

    @classmethod
    def from_layers(cls, layers):
        return cls(nn.MlpParams(layers[:1]), nn.MlpParams(layers[1:2]), nn.MlpParams(layers[2:]))


def init_classifier(hidden=128, trunk_layers=4, omega0=30.0, rng_seed=0) -> ClassifierParams:
    ss = np.random.SeedSequence(rng_seed).spawn(3)
    g = nn.init_siren([4, hidden], omega0, ss[0], final_activation="sine")
    k = nn.init_siren([3, hidden], omega0, ss[1], final_activation="sine")
    sizes = [2 * hidden] + [hidden] * (trunk_layers - 1) + [1]
    trunk = nn.init_siren(sizes, omega0, ss[2], final_activation="sigmoid")
    # the trunk consumes sine features, so its first layer uses the hidden bound
    bound = np.sqrt(6.0 / sizes[0]) / omega0
    rng = np.random.default_rng(ss[2].spawn(1)[0])
    first = trunk.layers[0]
    first.weight[:] = rng.uniform(-bound, bound, first.weight.shape)
    first.bias[:] = rng.uniform(-bound, bound, first.bias.shape)
    return ClassifierParams(g, k, trunk)


def _as2d(a, width):
    a = np.asarray(a)
    if a.ndim == 1:
        a = a[None]
    if a.shape[-1] != width:
        raise ShapeMismatch(f"expected trailing dimension {width}, got {a.shape}")
    return a


def _forward(params: ClassifierParams, ray1, ray2, point1):
    dtype = params.g.layers[0].weight.dtype
    ray1 = _as2d(ray1, 4).astype(dtype, copy=False)
    ray2 = _as2d(ray2, 4).astype(dtype, copy=False)
    point1 = _as2d(point1, 3).astype(dtype, copy=False)
    if not len(ray1) == len(ray2) == len(point1):
        raise ShapeMismatch("ray and point batches differ in length")
    g1, c1 = nn.forward_cache(params.g, ray1)
    g2, c2 = nn.forward_cache(params.g, ray2)
    kp, ck = nn.forward_cache(params.k, point1)
    pooled = (g1 + g2) * dtype.type(0.5)
    score, ct = nn.forward_cache(params.trunk, np.concatenate([pooled, kp], axis=1))
    return score[:, 0], (ray1, ray2, point1, c1, c2, ck, ct)


def classifier_forward(params: ClassifierParams, ray1, ray2, point1):
    """Visibility scores in (0, 1) for batches of normalized rays and points."""
    return _forward(params, ray1, ray2, point1)[0]


def classifier_backward(params: ClassifierParams, cache, upstream):
    ray1, ray2, point1, c1, c2, ck, ct = cache
    trunk_grads, gin = nn.backward(params.trunk, None, upstream[:, None], cache=ct)
    H = params.g.layers[0].weight.shape[1]
    gpool = gin[:, :H] * gin.dtype.type(0.5)
    g1_grads, _ = nn.backward(params.g, ray1, gpool, cache=c1)
    g2_grads, _ = nn.backward(params.g, ray2, gpool, cache=c2)
    k_grads, _ = nn.backward(params.k, point1, gin[:, H:], cache=ck)
    g_grads = [(a[0] + b[0], a[1] + b[1]) for a, b in zip(g1_grads, g2_grads)]
    return g_grads + k_grads + trunk_grads


def write_classifier(path, params: ClassifierParams, state=None):
    nn.write_checkpoint(path, params.layers, state)


def read_classifier(path):
    layers, state = nn.parse_layers(Path(path).read_bytes(), path)
    return ClassifierParams.from_layers(layers), state


def make_scorer(params: ClassifierParams):
    """Adapter with the scorer signature used by Stage 2."""
    return lambda ray1, ray2, point1: classifier_forward(params, ray1, ray2, point1)


@dataclass
class ClassifierResult:
    params: ClassifierParams
    accuracy: float
    f1: float
    loss_curve: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)


def train_classifier(pairs: PairSet, config: ClassifierConfig, checkpoint_dir=None) -> ClassifierResult:
    """Fit the classifier with binary cross-entropy and a one-cycle schedule.

    A random ``config.holdout`` fraction of the pairs is kept aside for the
    reported accuracy and F1.
    """
    labels = pairs.label.astype(np.float32)
    if len(labels) == 0 or labels.min() == labels.max():
        raise SingleClassData("visibility pairs must contain both labels")
    rng = np.random.default_rng([config.seed, 101])
    order = rng.permutation(len(pairs))
    n_hold = int(round(config.holdout * len(pairs)))
    hold, train = order[:n_hold], order[n_hold:]
    if len(np.unique(labels[train])) < 2:
        raise SingleClassData("training split holds a single label")

    params = init_classifier(config.hidden, config.trunk_layers, config.omega0, config.seed)
    state = nn.AdamState.zeros_like(params)
    steps_per_epoch = int(np.ceil(len(train) / config.batch_size))
    schedule = nn.LrSchedule.cyclic(config.lr_max, config.epochs * steps_per_epoch, config.lr_div)
    loss_curve, epoch_losses = [], []
    step = 0
    for epoch in range(config.epochs):
        perm = train[np.random.default_rng([config.seed, 102, epoch]).permutation(len(train))]
        total = 0.0
        for b in range(steps_per_epoch):
            idx = perm[b * config.batch_size:(b + 1) * config.batch_size]
            score, cache = _forward(params, pairs.ray1[idx], pairs.ray2[idx], pairs.point1[idx])
            loss, grad = nn.bce_loss(score, labels[idx])
            if config.pos_weight is not None:
                w = np.where(labels[idx] > 0, config.pos_weight, 1.0).astype(np.float32)
                grad = grad * w  # reported loss stays unweighted
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"classifier loss diverged at batch {step}", batch_index=step)
            grads = classifier_backward(params, cache, grad)
            nn.adam_step(params, grads, state, nn.lr_at(schedule, step))
            loss_curve.append(loss)
            total += loss * len(idx)
            step += 1
        epoch_losses.append(total / len(train))
        log.info("classifier epoch %d: loss %.5f", epoch, epoch_losses[-1])
        if checkpoint_dir is not None:
            write_classifier(Path(checkpoint_dir) / f"classifier_epoch{epoch:03d}.rayw", params, state)
    if n_hold:
        scores = classifier_forward(params, pairs.ray1[hold], pairs.ray2[hold], pairs.point1[hold])
        acc, f1 = binary_metrics(scores, pairs.label[hold])
    else:
        acc, f1 = float("nan"), float("nan")
    return ClassifierResult(params, acc, f1, loss_curve, epoch_losses)
