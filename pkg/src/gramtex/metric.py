"""Gram-based perceptual distance and the 2AFC evaluation harness.

The distance normalizes each spatial position's channel vector to unit
length, averages the resulting correlation matrix over positions, and sums
squared matrix differences across tap layers. Whole images are compared by
tiling 64x64 patches; judged triplets come from a JSONL manifest.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ContractError, DataError, DimensionError, FormatError, SizeError, ValidationError
from .imaging import center_crop, read_image

PATCH_SIZE = 64


def default_metric_taps(spec):
    """Deepest conv of each pooling stage strictly after the first pool and
    at or before the penultimate pool."""
    n_pools = sum(1 for layer in spec.layers if layer.kind == "maxpool")
    if n_pools < 3:
        raise ContractError(
            f"default metric taps need at least 3 pooling stages, spec has {n_pools}"
        )
    last_per_stage = {}
    pools_seen = 0
    for layer in spec.layers:
        if layer.kind == "maxpool":
            pools_seen += 1
        elif layer.kind == "conv" and 1 <= pools_seen <= n_pools - 2:
            last_per_stage[pools_seen] = layer.name
    return tuple(last_per_stage[k] for k in sorted(last_per_stage))


@dataclass(frozen=True)
class MetricConfig:
    """Extractor plus tap layers; taps default to the exclusion-rule set."""

    extractor: object
    taps: tuple = None

    def __post_init__(self):
        taps = self.taps
        if taps is None:
            taps = default_metric_taps(self.extractor.spec)
        taps = tuple(taps)
        if not taps:
            raise ContractError("metric config needs at least one tap layer")
        known = set(self.extractor.spec.conv_names())
        for t in taps:
            if t not in known:
                raise ContractError(f"unknown tap layer {t!r}")
        object.__setattr__(self, "taps", taps)


@dataclass
class NormalizedGram:
    """Position-averaged channel correlation matrix of unit-normalized features."""

    layer: str
    matrix: np.ndarray
    m: int

    @property
    def c(self):
        return self.matrix.shape[0]


def normalize_features(features):
    """Scale each spatial position's channel vector to unit Euclidean norm.

    All-zero vectors stay all-zero. Accepts [C,H,W] or [1,C,H,W] tensors or
    arrays; returns the same container kind.
    """
    is_tensor = isinstance(features, T.Tensor)
    arr = features.data if is_tensor else np.asarray(features)
    squeeze = False
    if arr.ndim == 3:
        arr = arr[None]
        squeeze = True
    if arr.ndim != 4:
        raise DimensionError(f"normalize_features expects [C,H,W] or [1,C,H,W], got {arr.shape}")
    norms = np.sqrt((arr * arr).sum(axis=1, keepdims=True))
    out = arr / np.where(norms == 0, 1, norms)
    if squeeze:
        out = out[0]
    return T.Tensor(out) if is_tensor else out


def normalized_gram(features, layer=""):
    """(1/M) * Fhat @ Fhat.T over unit-normalized features."""
    arr = features.data if isinstance(features, T.Tensor) else np.asarray(features)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise DimensionError(f"normalized_gram expects one feature map, got batch {arr.shape[0]}")
        arr = arr[0]
    if arr.ndim != 3:
        raise DimensionError(f"normalized_gram expects [C,H,W], got {arr.shape}")
    c, h, w = arr.shape
    m = h * w
    fhat = normalize_features(arr).reshape(c, m)
    return NormalizedGram(layer=layer, matrix=(fhat @ fhat.T) / m, m=m)


def feature_distance(feats_a, feats_b, layers=None):
    """Distance between two aligned lists of raw feature maps."""
    feats_a = list(feats_a)
    feats_b = list(feats_b)
    if len(feats_a) != len(feats_b):
        raise DimensionError(f"{len(feats_a)} vs {len(feats_b)} feature layers")
    names = layers or [""] * len(feats_a)
    total = 0.0
    for fa, fb, name in zip(feats_a, feats_b, names):
        ga = normalized_gram(fa, name)
        gb = normalized_gram(fb, name)
        if ga.matrix.shape != gb.matrix.shape:
            raise DimensionError(
                f"channel mismatch at layer {name!r}: {ga.matrix.shape} vs {gb.matrix.shape}"
            )
        diff = ga.matrix - gb.matrix
        total += float((diff * diff).sum()) / (ga.c * ga.c)
    return total


def gram_distance(x, x0, config):
    """Perceptual distance between two equally sized images in [0,1]."""
    if tuple(x.shape) != tuple(x0.shape):
        raise DimensionError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x0.shape)}")
    taps_x = config.extractor.forward_with_taps(x, config.taps)
    taps_x0 = config.extractor.forward_with_taps(x0, config.taps)
    return feature_distance(taps_x, taps_x0, config.taps)


def tile_patches(image):
    """Center-crop to the largest 64-divisible square, split row-major."""
    arr = image.data if isinstance(image, T.Tensor) else np.asarray(image)
    if arr.ndim != 4:
        raise DimensionError(f"tile_patches expects [1,3,H,W], got {arr.shape}")
    h, w = arr.shape[2:]
    if min(h, w) < PATCH_SIZE:
        raise SizeError(f"image {h}x{w} is smaller than {PATCH_SIZE} in one extent")
    v = (min(h, w) // PATCH_SIZE) * PATCH_SIZE
    cropped = center_crop(arr, v)
    n = v // PATCH_SIZE
    patches = []
    for row in range(n):
        for col in range(n):
            patch = cropped[
                :,
                :,
                row * PATCH_SIZE : (row + 1) * PATCH_SIZE,
                col * PATCH_SIZE : (col + 1) * PATCH_SIZE,
            ]
            patches.append(T.Tensor(patch.copy()) if isinstance(image, T.Tensor) else patch.copy())
    return patches


def image_distance(a, b, config):
    """Mean gram_distance over aligned 64x64 patch pairs."""
    if tuple(a.shape) != tuple(b.shape):
        raise DimensionError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    pa = tile_patches(a)
    pb = tile_patches(b)
    return float(np.mean([gram_distance(x, y, config) for x, y in zip(pa, pb)]))


# --------------------------------------------------------------- 2AFC


@dataclass(frozen=True)
class Triplet:
    """One judged comparison: which of p0/p1 is closer to ref.

    `h` is the fraction of human judges preferring p1.
    """

    ref: str
    p0: str
    p1: str
    h: float
    subtype: str = None

    def __post_init__(self):
        if not 0.0 <= self.h <= 1.0:
            raise ValidationError(f"judge fraction must be in [0,1], got {self.h}")


@dataclass
class EvalReport:
    rows: list  # dicts: index, choice, credit, subtype
    score: float
    subtype_scores: dict = field(default_factory=dict)
    count: int = 0


def load_manifest(path):
    """Parse a JSONL manifest; patch paths resolve relative to its directory."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    base = path.parent
    triplets = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: bad JSON: {exc}") from exc
        try:
            ref, p0, p1 = obj["ref"], obj["p0"], obj["p1"]
            judge = float(obj["judge"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}:{lineno}: missing or bad field: {exc}") from exc
        triplets.append(
            Triplet(
                ref=str(base / ref),
                p0=str(base / p0),
                p1=str(base / p1),
                h=judge,
                subtype=obj.get("subtype"),
            )
        )
    return triplets


def worker_count():
    """Thread cap from GRAMTEX_THREADS; 0 or unset means auto."""
    raw = os.environ.get("GRAMTEX_THREADS", "").strip()
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ValidationError(f"GRAMTEX_THREADS must be an integer, got {raw!r}") from None
        if n > 0:
            return n
    return min(8, os.cpu_count() or 1)


def _load_patch(path, what, index):
    try:
        buf = read_image(path)
    except (FormatError, OSError) as exc:
        raise DataError(f"triplet {index}: cannot read {what} patch {path}: {exc}") from exc
    if buf.width != PATCH_SIZE or buf.height != PATCH_SIZE:
        raise DataError(
            f"triplet {index}: {what} patch {path} is {buf.height}x{buf.width}, "
            f"need {PATCH_SIZE}x{PATCH_SIZE}"
        )
    return buf.to_tensor()


def _judge_triplet(args):
    index, triplet, config = args
    ref = _load_patch(triplet.ref, "ref", index)
    p0 = _load_patch(triplet.p0, "p0", index)
    p1 = _load_patch(triplet.p1, "p1", index)
    d0 = gram_distance(ref, p0, config)
    d1 = gram_distance(ref, p1, config)
    if d1 < d0:
        choice, credit = "p1", triplet.h
    elif d0 < d1:
        choice, credit = "p0", 1.0 - triplet.h
    else:
        choice, credit = "tie", 0.5
    return {"index": index, "choice": choice, "credit": credit, "subtype": triplet.subtype}


def eval_2afc(manifest, config, workers=None):
    """Score every triplet; the aggregate is the mean credit in manifest order."""
    triplets = load_manifest(manifest) if isinstance(manifest, (str, Path)) else list(manifest)
    if not triplets:
        raise DataError("manifest contains no triplets")
    jobs = [(i, t, config) for i, t in enumerate(triplets)]
    workers = worker_count() if workers is None else max(1, int(workers))
    if workers == 1 or len(jobs) == 1:
        rows = [_judge_triplet(job) for job in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_judge_triplet, jobs))
    credits = [row["credit"] for row in rows]
    score = float(np.mean(credits))
    subtype_scores = {}
    for row in rows:
        if row["subtype"] is not None:
            subtype_scores.setdefault(row["subtype"], []).append(row["credit"])
    subtype_scores = {k: float(np.mean(v)) for k, v in sorted(subtype_scores.items())}
    return EvalReport(rows=rows, score=score, subtype_scores=subtype_scores, count=len(rows))


def write_report_csv(path, report):
    lines = ["index,subtype,choice,credit"]
    for row in report.rows:
        subtype = row["subtype"] if row["subtype"] is not None else ""
        lines.append(f"{row['index']},{subtype},{row['choice']},{row['credit']!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_report_json(path, report):
    payload = {
        "score": report.score,
        "count": report.count,
        "subtype_scores": report.subtype_scores,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
