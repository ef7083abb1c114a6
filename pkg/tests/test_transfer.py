import numpy as np
import pytest

from gramtex import tensor as T
from gramtex.errors import ConfigError, ContractError
from gramtex.extractor import Extractor, LayerSpec, NetworkSpec
from gramtex.imaging import bicubic_resize
from gramtex.texture import LossConfig, MaskSet
from gramtex.transfer import (
    TransferConfig,
    moving_average_ok,
    optimize_image,
    sr_refine,
    write_trace_csv,
)


def small_extractor(seed=0):
    spec = NetworkSpec(
        (
            LayerSpec("conv1_1", "conv", 3, 6),
            LayerSpec("relu1_1", "relu"),
            LayerSpec("pool1", "maxpool"),
            LayerSpec("conv2_1", "conv", 6, 8),
            LayerSpec("relu2_1", "relu"),
        )
    )
    return Extractor.random(spec, seed=seed)


def loss_cfg():
    return LossConfig(taps=("conv1_1", "conv2_1"))


def smooth_image(seed, size=16):
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(size=(1, 3, size // 4, size // 4))
    img = np.clip(bicubic_resize(coarse, size, size), 0.0, 1.0)
    return T.Tensor(img.astype(np.float32))


def textured_image(seed, size=16):
    return T.Tensor(np.random.default_rng(seed).uniform(size=(1, 3, size, size)).astype(np.float32))


def test_config_validation():
    with pytest.raises(ConfigError):
        TransferConfig(steps=0)
    with pytest.raises(ConfigError):
        TransferConfig(steps=5, lr=0.0)
    with pytest.raises(ConfigError):
        TransferConfig(steps=5, init_mode="noise")
    with pytest.raises(ConfigError):
        TransferConfig(steps=5, init_mode="bicubic-up:3")
    TransferConfig(steps=5, init_mode="bicubic-up:4")
    TransferConfig(steps=5, init_mode="white")


def test_init_equals_style_is_stationary():
    ext = small_extractor(1)
    style = smooth_image(2)
    cfg = TransferConfig(steps=10, loss_config=loss_cfg())
    report = optimize_image(style.copy(), style, ext, cfg)
    assert report.trace == [0.0] * 10
    assert report.final_loss == 0.0
    assert np.array_equal(report.image.data, style.data)
    assert len(report.trace) == cfg.steps


def test_loss_decreases_on_degraded_init():
    ext = small_extractor(3)
    style = textured_image(4)
    cfg = TransferConfig(steps=60, lr=0.02, loss_config=loss_cfg(), init_mode="bicubic-up:4")
    report = optimize_image(None, style, ext, cfg)
    assert len(report.trace) == 60
    assert report.final_loss < report.trace[0]
    assert report.final_loss < 0.5 * report.trace[0]
    assert report.duration > 0


def test_clamping_keeps_pixels_in_range():
    ext = small_extractor(5)
    style = smooth_image(6)
    cfg = TransferConfig(steps=15, lr=0.1, loss_config=loss_cfg(), init_mode="white")
    report = optimize_image(None, style, ext, cfg)
    assert report.image.data.min() >= 0.0 and report.image.data.max() <= 1.0
    unclamped = TransferConfig(
        steps=15, lr=0.1, loss_config=loss_cfg(), init_mode="white", clamp=False
    )
    optimize_image(None, style, ext, unclamped)  # must run without the clamp


def test_single_all_ones_mask_matches_unmasked_trace():
    ext = small_extractor(7)
    style = smooth_image(8)
    init = smooth_image(9)
    masks = MaskSet((np.ones(style.shape[2:]),), (-1,))
    plain = optimize_image(
        init.copy(), style, ext, TransferConfig(steps=10, loss_config=loss_cfg())
    )
    masked = optimize_image(
        init.copy(), style, ext, TransferConfig(steps=10, loss_config=loss_cfg(), masks=masks)
    )
    for a, b in zip(plain.trace, masked.trace):
        assert a == pytest.approx(b, rel=1e-6)


def test_white_init_ends_higher_than_bicubic_init():
    ext = small_extractor(10)
    style = smooth_image(11)
    budget = dict(steps=40, lr=0.02, loss_config=loss_cfg())
    white = optimize_image(None, style, ext, TransferConfig(init_mode="white", **budget))
    bicubic = optimize_image(None, style, ext, TransferConfig(init_mode="bicubic-up:4", **budget))
    assert bicubic.final_loss < white.final_loss


def test_runs_are_deterministic():
    ext = small_extractor(12)
    style = smooth_image(13)
    cfg = TransferConfig(steps=8, loss_config=loss_cfg(), init_mode="bicubic-up:4")
    a = optimize_image(None, style, ext, cfg)
    b = optimize_image(None, style, ext, cfg)
    assert a.trace == b.trace
    assert np.array_equal(a.image.data, b.image.data)


def test_given_image_mode_requires_init():
    ext = small_extractor(14)
    style = smooth_image(15)
    with pytest.raises(ContractError):
        optimize_image(None, style, ext, TransferConfig(steps=3, loss_config=loss_cfg()))
    with pytest.raises(ContractError):
        optimize_image(
            smooth_image(16, size=8), style, ext, TransferConfig(steps=3, loss_config=loss_cfg())
        )


def test_sr_refine_shapes_and_improvement():
    ext = small_extractor(17)
    hr = textured_image(18, size=16)
    lr_img = T.Tensor(bicubic_resize(hr.data, 4, 4))
    cfg = TransferConfig(steps=40, lr=0.02, loss_config=loss_cfg())
    report = sr_refine(lr_img, hr, 4, ext, cfg)
    assert tuple(report.image.shape) == tuple(hr.shape)
    assert report.final_loss < report.trace[0]
    with pytest.raises(ContractError):
        sr_refine(lr_img, hr, 8, ext, cfg)


def test_moving_average_check():
    assert moving_average_ok([5.0, 4.0, 3.0, 2.0, 1.0], window=2)
    assert moving_average_ok([1.0, 1.0, 1.0], window=2)
    assert not moving_average_ok([1.0, 1.0, 5.0, 5.0], window=2)
    assert moving_average_ok([3.0, 2.0], window=25)  # shorter than one window
    # small bumps inside the tolerance are allowed
    assert moving_average_ok([1.0, 1.005, 1.0, 0.9], window=1, tol=0.01)


def test_trace_csv_format(tmp_path):
    path = tmp_path / "trace.csv"
    write_trace_csv(path, [0.5, 0.25, 0.125])
    lines = path.read_text().splitlines()
    assert lines[0] == "step,loss"
    assert lines[1] == "1,0.5"
    assert len(lines) == 4
