"""VGG-19-style feature extraction with named layer taps.

A NetworkSpec is an ordered list of conv / relu / maxpool layers; an
Extractor binds parameters (plus per-channel input normalization) to a spec
and can run a forward pass that captures the post-relu activations of named
conv layers. Parameters travel in the TWF1 container, so a saved extractor
reloads bit-identically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, GeometryError, ValidationError
from .twf import read_tensors, write_tensors

KINDS = ("conv", "relu", "maxpool")

# conv taps used by the texture losses unless callers override them
DEFAULT_LOSS_TAPS = ("conv2_2", "conv3_4", "conv4_4", "conv5_2")


@dataclass(frozen=True)
class LayerSpec:
    """One layer: convs are 3x3, stride 1, pad 1; pools are 2x2, stride 2."""

    name: str
    kind: str
    in_channels: int = 0
    out_channels: int = 0


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple

    def __post_init__(self):
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ContractError("layer names must be unique")
        prev_out = None
        for layer in self.layers:
            if layer.kind not in KINDS:
                raise ContractError(f"layer {layer.name!r} has unknown kind {layer.kind!r}")
            if layer.kind == "conv":
                if layer.in_channels < 1 or layer.out_channels < 1:
                    raise ContractError(f"conv {layer.name!r} needs positive channel counts")
                if prev_out is not None and layer.in_channels != prev_out:
                    raise ContractError(
                        f"conv {layer.name!r} expects {layer.in_channels} input channels "
                        f"but the previous conv produces {prev_out}"
                    )
                prev_out = layer.out_channels

    def conv_layers(self):
        return [layer for layer in self.layers if layer.kind == "conv"]

    def conv_names(self):
        return [layer.name for layer in self.conv_layers()]

    @property
    def input_channels(self):
        convs = self.conv_layers()
        if not convs:
            raise ContractError("network spec has no conv layers")
        return convs[0].in_channels

    def channels_at(self, conv_name):
        """Output channel count of the named conv layer."""
        for layer in self.layers:
            if layer.name == conv_name and layer.kind == "conv":
                return layer.out_channels
        raise ContractError(f"unknown conv layer {conv_name!r}")

    def pools_before(self, conv_name):
        """Number of pooling stages crossed before the named conv runs."""
        count = 0
        for layer in self.layers:
            if layer.name == conv_name:
                return count
            if layer.kind == "maxpool":
                count += 1
        raise ContractError(f"unknown layer {conv_name!r}")


def vgg19_spec():
    """The 16-conv VGG-19 feature trunk with 5 pooling stages."""
    layers = []
    in_ch = 3
    blocks = ((64, 64), (128, 128), (256,) * 4, (512,) * 4, (512,) * 4)
    for b, widths in enumerate(blocks, start=1):
        for i, width in enumerate(widths, start=1):
            layers.append(LayerSpec(f"conv{b}_{i}", "conv", in_ch, width))
            layers.append(LayerSpec(f"relu{b}_{i}", "relu"))
            in_ch = width
        layers.append(LayerSpec(f"pool{b}", "maxpool"))
    return NetworkSpec(tuple(layers))


class Extractor:
    """A NetworkSpec with bound parameters and input normalization.

    Parameters are frozen (no gradients are ever taken w.r.t. them); the
    forward pass stays differentiable w.r.t. the input image. Instances are
    read-only after construction and safe to share across threads.
    """

    def __init__(self, spec, params, mean, std):
        self.spec = spec
        self.mean = np.asarray(mean, dtype=np.float32).reshape(-1)
        self.std = np.asarray(std, dtype=np.float32).reshape(-1)
        c_in = spec.input_channels
        if self.mean.shape[0] != c_in or self.std.shape[0] != c_in:
            raise ValidationError(
                f"input.mean/input.std must have {c_in} values, "
                f"got {self.mean.shape[0]}/{self.std.shape[0]}"
            )
        if np.any(self.std == 0):
            raise ValidationError("input.std contains zero entries")
        self.params = {}
        for layer in spec.conv_layers():
            if layer.name not in params:
                raise ValidationError(f"missing parameters for layer {layer.name!r}")
            w, b = params[layer.name]
            w = w if isinstance(w, T.Tensor) else T.Tensor(w, dtype=np.float32)
            b = b if isinstance(b, T.Tensor) else T.Tensor(b, dtype=np.float32)
            want_w = (layer.out_channels, layer.in_channels, 3, 3)
            if tuple(w.shape) != want_w:
                raise ValidationError(
                    f"mismatched tensor {layer.name + '.weight'!r}: "
                    f"got {tuple(w.shape)}, spec needs {want_w}"
                )
            if tuple(b.shape) != (layer.out_channels,):
                raise ValidationError(
                    f"mismatched tensor {layer.name + '.bias'!r}: "
                    f"got {tuple(b.shape)}, spec needs {(layer.out_channels,)}"
                )
            self.params[layer.name] = (w, b)

    @classmethod
    def random(cls, spec=None, seed=0):
        """He-initialized weights, zero biases, zero mean / unit std."""
        spec = spec or vgg19_spec()
        rng = np.random.default_rng(seed)
        params = {}
        for layer in spec.conv_layers():
            fan_in = layer.in_channels * 9
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(layer.out_channels, layer.in_channels, 3, 3))
            params[layer.name] = (w.astype(np.float32), np.zeros(layer.out_channels, dtype=np.float32))
        c = spec.input_channels
        return cls(spec, params, np.zeros(c), np.ones(c))

    @classmethod
    def from_weight_file(cls, path, spec=None):
        """Load from a TWF1 file, shape-checking every tensor against the network spec."""
        spec = spec or vgg19_spec()
        tensors = read_tensors(path)
        for required in ("input.mean", "input.std"):
            if required not in tensors:
                raise ValidationError(f"missing tensor {required!r}")
        params = {}
        for layer in spec.conv_layers():
            wname, bname = f"{layer.name}.weight", f"{layer.name}.bias"
            if wname not in tensors:
                raise ValidationError(f"missing tensor {wname!r}")
            if bname not in tensors:
                raise ValidationError(f"missing tensor {bname!r}")
            params[layer.name] = (tensors[wname], tensors[bname])
        return cls(spec, params, tensors["input.mean"], tensors["input.std"])

    def save(self, path):
        tensors = {"input.mean": self.mean, "input.std": self.std}
        for name in self.spec.conv_names():
            w, b = self.params[name]
            tensors[f"{name}.weight"] = w.data
            tensors[f"{name}.bias"] = b.data
        write_tensors(path, tensors)

    def astype(self, dtype):
        """Copy of this extractor with parameters cast to `dtype`."""
        params = {
            name: (w.data.astype(dtype), b.data.astype(dtype))
            for name, (w, b) in self.params.items()
        }
        out = Extractor.__new__(Extractor)
        out.spec = self.spec
        out.mean = self.mean
        out.std = self.std
        out.params = {
            name: (T.Tensor(w), T.Tensor(b)) for name, (w, b) in params.items()
        }
        return out

    def forward_with_taps(self, image, taps, normalize=True):
        """Run the trunk, returning the post-relu activation of each tap.

        `image` is a Tensor [B,C,H,W] (values nominally in [0,1]); results
        come back in `taps` order and stay differentiable w.r.t. the image.
        Propagation stops as soon as the deepest tap has been captured.
        """
        taps = list(taps)
        if not taps:
            raise ContractError("need at least one tap layer")
        conv_names = set(self.spec.conv_names())
        for name in taps:
            if name not in conv_names:
                raise ContractError(f"unknown tap layer {name!r}")
        if not isinstance(image, T.Tensor) or image.ndim != 4:
            shape = getattr(image, "shape", None)
            raise DimensionError(f"extractor input must be a Tensor [B,C,H,W], got {shape}")
        if image.shape[1] != self.spec.input_channels:
            raise DimensionError(
                f"extractor input has {image.shape[1]} channels (axis 1), "
                f"spec needs {self.spec.input_channels}"
            )

        wanted = set(taps)
        captured = {}
        h = image
        if normalize:
            dt = image.data.dtype
            inv = 1.0 / self.std.astype(dt)
            h = T.scale_shift_channels(h, inv, -self.mean.astype(dt) * inv)
        last_conv = None
        for layer in self.spec.layers:
            try:
                if layer.kind == "conv":
                    w, b = self.params[layer.name]
                    if w.data.dtype != h.data.dtype:
                        w = T.Tensor(w.data.astype(h.data.dtype))
                        b = T.Tensor(b.data.astype(h.data.dtype))
                    h = T.conv2d(h, w, b, stride=1, pad=1)
                    last_conv = layer.name
                elif layer.kind == "relu":
                    h = T.relu(h)
                    if last_conv in wanted:
                        captured[last_conv] = h
                        if len(captured) == len(wanted):
                            break
                else:
                    h = T.max_pool2(h)
            except GeometryError as exc:
                raise GeometryError(f"layer {layer.name!r}: {exc}") from exc
        missing = wanted - set(captured)
        if missing:
            # a tapped conv exists but no relu follows it, so nothing was captured
            raise ContractError(f"taps {sorted(missing)} have no post-relu activation in this network")
        return [captured[name] for name in taps]
