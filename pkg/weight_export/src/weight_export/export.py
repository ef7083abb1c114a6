"""Convert VGG-19 trunk weights from torch state dicts into TWF1 files.

The engine consumes weight files holding conv{block}_{index}.weight/.bias
tensors plus input.mean/input.std for [0,1]-space normalization. An
ExportRecipe pins the source naming scheme (torchvision's
features.<n>.weight layout) and the normalization to embed; export()
writes the file and make_fixture() writes a seeded input together with
the torch-side tap activations so the engine's forward pass can be
verified numerically against the source framework.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import twf1


class ExportError(Exception):
    pass


class RecipeError(ExportError):
    pass


class ValidationError(ExportError):
    pass


# conv widths per pooling block of the VGG-19 trunk
VGG19_WIDTHS = ((64, 64), (128, 128), (256, 256, 256, 256), (512, 512, 512, 512), (512, 512, 512, 512))

FIXTURE_TAPS = ("conv2_2", "conv3_4", "conv4_4", "conv5_2")


def trunk_layers():
    """(name, in_channels, out_channels) for every conv, in forward order."""
    layers = []
    in_ch = 3
    for block, widths in enumerate(VGG19_WIDTHS, start=1):
        for index, out_ch in enumerate(widths, start=1):
            layers.append((f"conv{block}_{index}", in_ch, out_ch))
            in_ch = out_ch
    return layers


@dataclass(frozen=True)
class ExportRecipe:
    source: str
    mapping: dict  # source module prefix -> engine conv name
    mean: tuple
    std: tuple
    fixture_taps: tuple = FIXTURE_TAPS

    def __post_init__(self):
        expected = sorted(name for name, _, _ in trunk_layers())
        mapped = sorted(self.mapping.values())
        if mapped != expected:
            missing = set(expected) - set(mapped)
            extra = [m for m in mapped if m not in expected or mapped.count(m) > 1]
            raise RecipeError(f"mapping must cover every conv exactly once; missing {sorted(missing)}, bad {extra}")
        if len(self.mean) != 3 or len(self.std) != 3:
            raise RecipeError("mean/std must each hold 3 channel values")
        unknown = [t for t in self.fixture_taps if t not in self.mapping.values()]
        if unknown:
            raise RecipeError(f"fixture taps {unknown} are not trunk convs")

    def source_prefix(self, conv_name):
        for src, target in self.mapping.items():
            if target == conv_name:
                return src
        raise RecipeError(f"no source mapping for {conv_name!r}")


# torchvision.models.vgg19().features indices of the 16 convs
_TORCHVISION_CONV_INDICES = (0, 2, 5, 7, 10, 12, 14, 16, 19, 21, 23, 25, 28, 30, 32, 34)

VGG19_TORCHVISION = ExportRecipe(
    source="torchvision.models.vgg19",
    mapping={
        f"features.{idx}": name
        for idx, (name, _, _) in zip(_TORCHVISION_CONV_INDICES, trunk_layers())
    },
    mean=(0.485, 0.456, 0.406),
    std=(0.229, 0.224, 0.225),
)


def _as_f32(value, name, shape):
    arr = np.asarray(value.detach().cpu().numpy() if torch.is_tensor(value) else value, dtype=np.float32)
    if tuple(arr.shape) != shape:
        raise ValidationError(f"{name} has shape {tuple(arr.shape)}, expected {shape}")
    return arr


def export(state_dict, out_path, recipe=VGG19_TORCHVISION):
    """Write the recipe's trunk tensors plus normalization to out_path.

    state_dict uses the source framework's naming (extra keys such as
    classifier weights are ignored). Returns the tensor dict that was
    written.
    """
    tensors = {}
    for name, in_ch, out_ch in trunk_layers():
        prefix = recipe.source_prefix(name)
        wkey, bkey = f"{prefix}.weight", f"{prefix}.bias"
        if wkey not in state_dict or bkey not in state_dict:
            raise RecipeError(f"state dict has no {wkey}/{bkey} for {name}")
        tensors[f"{name}.weight"] = _as_f32(state_dict[wkey], wkey, (out_ch, in_ch, 3, 3))
        tensors[f"{name}.bias"] = _as_f32(state_dict[bkey], bkey, (out_ch,))
    tensors["input.mean"] = np.asarray(recipe.mean, dtype=np.float32)
    tensors["input.std"] = np.asarray(recipe.std, dtype=np.float32)
    twf1.write(out_path, tensors)
    return tensors


def _torch_tap_activations(state_dict, recipe, image):
    """Source-framework forward: normalize, conv/relu per block, pool between.

    image is a [1,3,H,W] float32 array in [0,1]; returns post-relu
    activations for the recipe's fixture taps as numpy arrays.
    """
    wanted = set(recipe.fixture_taps)
    captured = {}
    with torch.no_grad():
        h = torch.from_numpy(np.ascontiguousarray(image))
        mean = torch.tensor(recipe.mean, dtype=h.dtype).view(1, 3, 1, 1)
        std = torch.tensor(recipe.std, dtype=h.dtype).view(1, 3, 1, 1)
        h = (h - mean) / std
        names = iter(trunk_layers())
        for block, widths in enumerate(VGG19_WIDTHS, start=1):
            for _ in widths:
                name, _, _ = next(names)
                prefix = recipe.source_prefix(name)
                weight = torch.as_tensor(state_dict[f"{prefix}.weight"], dtype=h.dtype)
                bias = torch.as_tensor(state_dict[f"{prefix}.bias"], dtype=h.dtype)
                h = F.relu(F.conv2d(h, weight, bias, padding=1))
                if name in wanted:
                    captured[name] = h.numpy().copy()
                    if len(captured) == len(wanted):
                        return captured
            h = F.max_pool2d(h, 2)
    return captured


def make_fixture(out_path, state_dict, recipe=VGG19_TORCHVISION, seed=0, size=64):
    """Write a seeded [1,3,size,size] input and the torch-side tap activations.

    Tensors are named "input" and "tap.<conv name>"; the engine's forward on
    "input" through an exported weight file should match every tap closely.
    """
    rng = np.random.default_rng(seed)
    image = rng.uniform(0.0, 1.0, size=(1, 3, size, size)).astype(np.float32)
    taps = _torch_tap_activations(state_dict, recipe, image)
    tensors = {"input": image}
    for name in recipe.fixture_taps:
        tensors[f"tap.{name}"] = taps[name]
    twf1.write(out_path, tensors)
    return tensors


def random_state_dict(seed=0):
    """Seeded random trunk in torchvision's key layout, for offline testing.

    Weights use variance-preserving scaling (std = sqrt(2/fan_in)) so
    activations stay near unit magnitude through all 16 convs, keeping an
    absolute comparison against another implementation meaningful.
    """
    gen = torch.Generator().manual_seed(seed)
    state = {}
    for name, in_ch, out_ch in trunk_layers():
        prefix = VGG19_TORCHVISION.source_prefix(name)
        fan_in = in_ch * 9
        state[f"{prefix}.weight"] = torch.randn(out_ch, in_ch, 3, 3, generator=gen) * (2.0 / fan_in) ** 0.5
        state[f"{prefix}.bias"] = torch.randn(out_ch, generator=gen) * 0.01
    return state


def load_state_dict(path):
    """Load a torch checkpoint, unwrapping a nested state_dict entry if present."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(payload, dict) and "state_dict" in payload and not any(
        k.endswith(".weight") for k in payload
    ):
        payload = payload["state_dict"]
    return payload
