"""Gram matrices, the global texture loss, and the segmentation-guided loss.

The texture loss compares Gram matrices of deep features between an
estimated and a target image, layer by layer. The guided variant applies
binary class masks to both images in pixel space, runs ordinary feature
extraction on each masked pair, and sums the per-mask losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, GeometryError, ValidationError
from .extractor import DEFAULT_LOSS_TAPS

# label used for the mask covering pixels outside the ranked classes
OTHERS_LABEL = -1


@dataclass
class GramMatrix:
    """Channel correlation matrix of one feature map.

    `matrix` is an n x n Tensor (n = channel count); `m` records the number
    of spatial positions of the source features, needed by loss coefficients.
    """

    layer: str
    matrix: T.Tensor
    m: int

    @property
    def n(self):
        return self.matrix.shape[0]


@dataclass(frozen=True)
class LossConfig:
    """Tap layers and per-layer weights for the texture loss."""

    taps: tuple = DEFAULT_LOSS_TAPS
    weights: tuple = None

    def __post_init__(self):
        taps = tuple(self.taps)
        if not taps:
            raise ContractError("loss config needs at least one tap layer")
        weights = self.weights
        if weights is None:
            weights = (1.0,) * len(taps)
        weights = tuple(float(w) for w in weights)
        if len(weights) != len(taps):
            raise ContractError(f"{len(weights)} weights for {len(taps)} tap layers")
        if any(w < 0 for w in weights):
            raise ContractError("tap weights must be non-negative")
        object.__setattr__(self, "taps", taps)
        object.__setattr__(self, "weights", weights)


@dataclass(frozen=True)
class MaskSet:
    """Binary spatial masks, one per texture region, plus replica flags.

    Non-replica masks must partition the frame; replicas are verbatim copies
    kept so the guided loss can follow the seven-mask protocol exactly.
    """

    masks: tuple
    labels: tuple
    replicas: tuple = None

    def __post_init__(self):
        masks = tuple(np.asarray(m) for m in self.masks)
        if not masks:
            raise ContractError("mask set must contain at least one mask")
        shape = masks[0].shape
        for m in masks:
            if m.ndim != 2 or m.shape != shape:
                raise DimensionError(f"masks must share one HxW shape, got {m.shape} vs {shape}")
            vals = np.unique(m)
            if not np.isin(vals, (0, 1)).all():
                raise ValidationError("mask values must be 0 or 1")
        labels = tuple(int(v) for v in self.labels)
        if len(labels) != len(masks):
            raise ContractError(f"{len(labels)} labels for {len(masks)} masks")
        replicas = self.replicas
        if replicas is None:
            replicas = (False,) * len(masks)
        replicas = tuple(bool(r) for r in replicas)
        if len(replicas) != len(masks):
            raise ContractError(f"{len(replicas)} replica flags for {len(masks)} masks")
        object.__setattr__(self, "masks", masks)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "replicas", replicas)

    def __len__(self):
        return len(self.masks)

    @property
    def shape(self):
        return self.masks[0].shape

    def distinct_indices(self):
        return [i for i, rep in enumerate(self.replicas) if not rep]

    def partition_ok(self):
        """True when the non-replica masks cover every pixel exactly once."""
        total = np.zeros(self.shape, dtype=np.int64)
        for i in self.distinct_indices():
            total += self.masks[i].astype(np.int64)
        return bool((total == 1).all())


def gram(features, layer=""):
    """Gram matrix G = F @ F.T of a feature map [C,H,W] or [1,C,H,W].

    F is the C x (H*W) row-major flattening; the result stays differentiable
    with respect to the features.
    """
    if features.ndim == 4:
        if features.shape[0] != 1:
            raise DimensionError(f"gram expects a single feature map, got batch {features.shape[0]}")
        c, h, w = features.shape[1:]
    elif features.ndim == 3:
        c, h, w = features.shape
    else:
        raise DimensionError(f"gram expects [C,H,W] or [1,C,H,W], got {features.shape}")
    if h * w == 0 or c == 0:
        raise GeometryError(f"empty feature map {features.shape}")
    f2 = T.reshape(features, (c, h * w))
    matrix = T.matmul(f2, T.transpose_last(f2))
    return GramMatrix(layer=layer, matrix=matrix, m=h * w)


def _as_batched(tap):
    if tap.ndim == 3:
        return T.reshape(tap, (1,) + tuple(tap.shape))
    if tap.ndim == 4:
        return tap
    raise ContractError(f"tap must be [C,H,W] or [B,C,H,W], got {tap.shape}")


def texture_loss(taps_est, taps_target, config=None):
    """Weighted sum over layers of the squared Gram difference.

    Per layer with N channels and M = H*W positions, the term is
    weight * (1 / (4*N^2*M^2)) * sum over all N x N entries of (G - A)^2.
    Batched taps contribute the batch mean of their per-sample losses.
    """
    taps_est = list(taps_est)
    taps_target = list(taps_target)
    if len(taps_est) != len(taps_target):
        raise ContractError(f"layer mismatch: {len(taps_est)} vs {len(taps_target)} taps")
    if not taps_est:
        raise ContractError("texture loss needs at least one tap layer")
    if config is None:
        weights = (1.0,) * len(taps_est)
    else:
        weights = config.weights
        if len(weights) != len(taps_est):
            raise ContractError(f"config has {len(weights)} weights for {len(taps_est)} taps")
    total = None
    for est, target, weight in zip(taps_est, taps_target, weights):
        est = _as_batched(est)
        target = _as_batched(target)
        if tuple(est.shape) != tuple(target.shape):
            raise ContractError(
                f"layer mismatch: estimated tap {tuple(est.shape)} vs target {tuple(target.shape)}"
            )
        b, n, h, w = est.shape
        m = h * w
        fe = T.reshape(est, (b, n, m))
        ft = T.reshape(target, (b, n, m))
        ge = T.matmul(fe, T.transpose_last(fe))
        gt = T.matmul(ft, T.transpose_last(ft))
        diff = T.sub(ge, gt)
        coeff = weight / (4.0 * (n * n) * (m * m)) / b
        term = T.mul(T.sum_all(T.mul(diff, diff)), coeff)
        total = term if total is None else T.add(total, term)
    return total


def apply_masks(image, masks):
    """Multiply the image by each mask (broadcast over channels)."""
    if image.ndim != 4:
        raise DimensionError(f"apply_masks expects [B,C,H,W], got {image.shape}")
    h, w = image.shape[2:]
    if masks.shape != (h, w):
        raise DimensionError(f"mask shape {masks.shape} does not match image spatial {h}x{w}")
    out = []
    for m in masks.masks:
        m4 = np.broadcast_to(m.astype(image.data.dtype), image.shape)
        out.append(T.mul(image, T.Tensor(m4)))
    return out


def semantic_texture_loss(est_image, target_image, masks, ext, config=None, count_replicas=True):
    """Guided texture loss: mask both images per class, sum per-mask losses.

    Masking happens in pixel space; each masked pair then goes through
    ordinary feature extraction. Replica masks are counted verbatim by
    default (the seven-mask protocol); pass count_replicas=False to fold
    duplicates.
    """
    if tuple(est_image.shape) != tuple(target_image.shape):
        raise ContractError(
            f"image shape mismatch: {tuple(est_image.shape)} vs {tuple(target_image.shape)}"
        )
    if not masks.partition_ok():
        raise ValidationError("mask set does not partition the frame")
    config = config or LossConfig()
    masked_est = apply_masks(est_image, masks)
    masked_target = apply_masks(target_image, masks)
    total = None
    for k in range(len(masks)):
        if not count_replicas and masks.replicas[k]:
            continue
        taps_e = ext.forward_with_taps(masked_est[k], config.taps)
        taps_t = ext.forward_with_taps(masked_target[k], config.taps)
        term = texture_loss(taps_e, taps_t, config)
        total = term if total is None else T.add(total, term)
    return total


def mse_loss(est, target):
    """Mean squared elementwise difference."""
    diff = T.sub(est, target)
    return T.mean_all(T.mul(diff, diff))
