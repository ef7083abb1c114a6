"""Image and label-map I/O, bicubic resampling, cropping, mask building.

Images move between 8-bit RGB buffers (PNG / binary PPM on disk) and
[1,3,H,W] float tensors in [0,1]. Label maps are 8-bit grayscale PNGs whose
pixel value is the class id; build_mask_set turns one into the seven-mask
partition used by the guided texture loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import tensor as T
from .errors import ContractError, FormatError, GeometryError, SizeError
from .texture import OTHERS_LABEL, MaskSet

MASK_COUNT = 7
RANKED_CLASSES = 6


@dataclass
class ImageBuffer:
    """8-bit RGB image, samples row-major as [H, W, 3] uint8."""

    samples: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.samples)
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
            raise ContractError(f"ImageBuffer needs uint8 [H,W,3] samples, got {arr.shape} {arr.dtype}")
        self.samples = arr

    @property
    def width(self):
        return self.samples.shape[1]

    @property
    def height(self):
        return self.samples.shape[0]

    def to_tensor(self, dtype=np.float32):
        """[1,3,H,W] tensor with values in [0,1]."""
        arr = self.samples.astype(dtype) / dtype(255)
        return T.Tensor(arr.transpose(2, 0, 1)[None], dtype=dtype)

    @classmethod
    def from_tensor(cls, t):
        """Quantize a [1,3,H,W] or [3,H,W] tensor in [0,1]; round half up."""
        arr = t.data if isinstance(t, T.Tensor) else np.asarray(t)
        if arr.ndim == 4:
            if arr.shape[0] != 1:
                raise ContractError(f"expected a single image, got batch {arr.shape[0]}")
            arr = arr[0]
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise ContractError(f"expected [1,3,H,W] or [3,H,W], got {arr.shape}")
        clipped = np.clip(arr, 0.0, 1.0)
        u8 = np.floor(clipped * 255.0 + 0.5).astype(np.uint8)
        return cls(u8.transpose(1, 2, 0))


@dataclass
class LabelMap:
    """Per-pixel class ids (0-255) as a [H, W] uint8 array."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2 or arr.dtype != np.uint8:
            raise ContractError(f"LabelMap needs uint8 [H,W] data, got {arr.shape} {arr.dtype}")
        if arr.size == 0:
            raise ContractError("LabelMap must be non-empty")
        self.data = arr

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[0]


def _open_image(path):
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from exc
    return img


def read_image(path):
    """Read a PNG or binary PPM as RGB; grayscale replicates to 3 channels."""
    img = _open_image(path)
    if img.mode == "L":
        arr = np.asarray(img, dtype=np.uint8)
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    else:
        if img.mode != "RGB":
            img = img.convert("RGB")
        arr = np.asarray(img, dtype=np.uint8)
    return ImageBuffer(arr)


def write_image(path, buffer):
    path = str(path)
    img = Image.fromarray(buffer.samples, mode="RGB")
    if path.lower().endswith(".png"):
        img.save(path, format="PNG")
    elif path.lower().endswith(".ppm"):
        img.save(path, format="PPM")
    else:
        raise FormatError(f"unsupported image extension for {path} (use .png or .ppm)")


def read_label_map(path):
    """Read an 8-bit grayscale PNG as a LabelMap (pixel value = class id)."""
    img = _open_image(path)
    if img.mode != "L":
        raise FormatError(f"label map {path} must be 8-bit grayscale, got mode {img.mode}")
    return LabelMap(np.asarray(img, dtype=np.uint8))


def write_label_map(path, labels):
    Image.fromarray(labels.data, mode="L").save(str(path), format="PNG")


# ------------------------------------------------------------- resampling


def _cubic_kernel(t):
    """Keys cubic convolution kernel with a = -0.5 (Catmull-Rom)."""
    a = -0.5
    t = np.abs(t)
    out = np.zeros_like(t)
    near = t <= 1.0
    far = (t > 1.0) & (t < 2.0)
    out[near] = (a + 2.0) * t[near] ** 3 - (a + 3.0) * t[near] ** 2 + 1.0
    out[far] = a * (t[far] ** 3 - 5.0 * t[far] ** 2 + 8.0 * t[far] - 4.0)
    return out


def _resample_matrix(n_in, n_out):
    """[n_out, n_in] weight matrix: half-pixel-centered, edge-clamped."""
    w = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(src).astype(np.int64)
    for offset in range(-1, 3):
        idx = np.clip(base + offset, 0, n_in - 1)
        weight = _cubic_kernel(src - (base + offset))
        np.add.at(w, (np.arange(n_out), idx), weight)
    return w


def bicubic_resize(image, out_h, out_w):
    """Separable bicubic resampling of a [B,C,H,W] image (any factor).

    Built as one weight matrix per axis, applied by matmul; not part of any
    gradient tape (results are constants).
    """
    is_tensor = isinstance(image, T.Tensor)
    arr = image.data if is_tensor else np.asarray(image)
    if arr.ndim != 4:
        raise ContractError(f"bicubic_resize expects [B,C,H,W], got {arr.shape}")
    if out_h < 1 or out_w < 1:
        raise GeometryError(f"output extents must be >= 1, got {out_h}x{out_w}")
    h, w = arr.shape[2:]
    if h < 1 or w < 1:
        raise GeometryError(f"empty input image {arr.shape}")
    wh = _resample_matrix(h, int(out_h)).astype(arr.dtype)
    ww = _resample_matrix(w, int(out_w)).astype(arr.dtype)
    out = wh[None, None] @ arr @ ww.T[None, None]
    return T.Tensor(out) if is_tensor else out


def bicubic_upsample(image, s):
    arr = image.data if isinstance(image, T.Tensor) else np.asarray(image)
    return bicubic_resize(image, arr.shape[2] * s, arr.shape[3] * s)


def bicubic_downsample(image, s):
    arr = image.data if isinstance(image, T.Tensor) else np.asarray(image)
    h, w = arr.shape[2:]
    if h % s or w % s:
        raise GeometryError(f"extents {h}x{w} not divisible by downsampling factor {s}")
    return bicubic_resize(image, h // s, w // s)


def center_crop(image, size):
    """Centered size x size window over the trailing two axes; floor offsets."""
    is_tensor = isinstance(image, T.Tensor)
    arr = image.data if is_tensor else np.asarray(image)
    if arr.ndim < 2:
        raise ContractError(f"center_crop needs at least 2 axes, got {arr.shape}")
    h, w = arr.shape[-2], arr.shape[-1]
    size = int(size)
    if size < 1:
        raise ContractError(f"crop size must be positive, got {size}")
    if size > h or size > w:
        raise SizeError(f"crop {size}x{size} exceeds image {h}x{w}")
    oy = (h - size) // 2
    ox = (w - size) // 2
    out = arr[..., oy : oy + size, ox : ox + size]
    return T.Tensor(out.copy()) if is_tensor else out.copy()


# ------------------------------------------------------------------ masks


def build_mask_set(labels):
    """Seven-mask partition of a label map.

    Classes are ranked by pixel count (ties to the smaller id); the top six
    become individual masks, remaining pixels become an "others" mask, and
    flagged replicas of "others" pad the set to exactly seven masks.
    """
    data = labels.data
    ids, counts = np.unique(data, return_counts=True)
    order = np.lexsort((ids, -counts))
    ranked = ids[order]
    top = ranked[:RANKED_CLASSES]
    masks = [(data == cid).astype(np.uint8) for cid in top]
    mask_labels = [int(cid) for cid in top]
    replicas = [False] * len(masks)
    others = np.isin(data, ranked[RANKED_CLASSES:]).astype(np.uint8)
    if others.any():
        masks.append(others)
        mask_labels.append(OTHERS_LABEL)
        replicas.append(False)
    while len(masks) < MASK_COUNT:
        masks.append(others.copy())
        mask_labels.append(OTHERS_LABEL)
        replicas.append(True)
    return MaskSet(tuple(masks), tuple(mask_labels), tuple(replicas))
