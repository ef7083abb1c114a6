import numpy as np
import pytest

from gramtex import tensor as T
from gramtex.errors import ContractError, DimensionError, GeometryError, ValidationError
from gramtex.extractor import Extractor, LayerSpec, NetworkSpec
from gramtex.texture import (
    LossConfig,
    MaskSet,
    OTHERS_LABEL,
    apply_masks,
    gram,
    mse_loss,
    semantic_texture_loss,
    texture_loss,
)

from test_tensor import fd_grad


# ---------------------------------------------------------------- oracles


def gram_oracle(f):
    """Triple-loop Gram computation over a [C,H,W] array."""
    c = f.shape[0]
    flat = f.reshape(c, -1)
    m = flat.shape[1]
    g = np.zeros((c, c), dtype=np.float64)
    for i in range(c):
        for j in range(c):
            acc = 0.0
            for k in range(m):
                acc += flat[i, k] * flat[j, k]
            g[i, j] = acc
    return g


def texture_loss_oracle(taps_est, taps_target, weights=None):
    """Whole-formula re-computation, independent of the tensor module."""
    total = 0.0
    for idx, (fe, ft) in enumerate(zip(taps_est, taps_target)):
        c = fe.shape[0]
        m = fe.reshape(c, -1).shape[1]
        g = gram_oracle(fe)
        a = gram_oracle(ft)
        acc = 0.0
        for i in range(c):
            for j in range(c):
                acc += (g[i, j] - a[i, j]) ** 2
        w = 1.0 if weights is None else weights[idx]
        total += w * acc / (4.0 * c * c * m * m)
    return total


def small_extractor(seed, dtype=np.float64):
    spec = NetworkSpec(
        (
            LayerSpec("conv1_1", "conv", 3, 4),
            LayerSpec("relu1_1", "relu"),
            LayerSpec("conv1_2", "conv", 4, 6),
            LayerSpec("relu1_2", "relu"),
        )
    )
    return Extractor.random(spec, seed=seed).astype(dtype)


# ------------------------------------------------------------------ gram


def test_gram_identity_example():
    # two channels, two positions: F = [[1,0],[0,1]]
    f = T.Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(2, 2, 1))
    g = gram(f, layer="x")
    assert g.layer == "x"
    assert g.n == 2 and g.m == 2
    assert np.array_equal(g.matrix.data, np.eye(2))


def test_gram_matches_triple_loop_oracle():
    rng = np.random.default_rng(41)
    f = rng.normal(size=(4, 5, 5))
    got = gram(T.Tensor(f)).matrix.data
    want = gram_oracle(f)
    assert np.allclose(got, want, rtol=1e-12, atol=1e-14)


def test_gram_spatial_permutation_invariance():
    rng = np.random.default_rng(43)
    f = rng.normal(size=(6, 8, 8))
    base = gram(T.Tensor(f)).matrix.data
    scale = np.abs(base).max()
    for _ in range(10):
        perm = rng.permutation(64)
        fp = f.reshape(6, 64)[:, perm].reshape(6, 8, 8)
        gp = gram(T.Tensor(fp)).matrix.data
        assert np.abs(gp - base).max() <= 1e-10 * scale


def test_gram_symmetry_and_psd():
    rng = np.random.default_rng(47)
    for _ in range(5):
        f = rng.normal(size=(5, 4, 6))
        g = gram(T.Tensor(f)).matrix.data
        assert np.abs(g - g.T).max() == 0.0
        assert np.linalg.eigvalsh(g).min() >= -1e-8


def test_gram_accepts_leading_unit_batch():
    rng = np.random.default_rng(53)
    f = rng.normal(size=(3, 4, 4))
    a = gram(T.Tensor(f)).matrix.data
    b = gram(T.Tensor(f[None])).matrix.data
    assert np.array_equal(a, b)
    with pytest.raises(DimensionError):
        gram(T.Tensor(np.zeros((2, 3, 4, 4))))


def test_gram_empty_extent_is_geometry_error():
    with pytest.raises(GeometryError):
        gram(T.Tensor(np.zeros((3, 0, 5))))


def test_gram_gradient_matches_finite_differences():
    rng = np.random.default_rng(59)
    f = T.Tensor(rng.normal(size=(3, 3, 2)), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_all(T.mul(gram(f).matrix, gram(f).matrix))
    tape.backward(loss)
    fd = fd_grad(lambda: (gram_oracle(f.data) ** 2).sum(), f.data)
    assert np.allclose(f.grad, fd, rtol=1e-5, atol=1e-7)


# ---------------------------------------------------------- texture loss


def test_texture_loss_zero_on_equal_taps():
    rng = np.random.default_rng(61)
    taps = [T.Tensor(rng.normal(size=(4, 6, 6))), T.Tensor(rng.normal(size=(8, 3, 3)))]
    same = [T.Tensor(t.data.copy()) for t in taps]
    assert texture_loss(taps, same).item() == 0.0


def test_texture_loss_frozen_identity_vs_zero_case():
    # N=2 channels, M=2 positions, G = I, A = 0 -> 2 / (4*4*4) = 0.03125
    est = T.Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(2, 2, 1))
    target = T.Tensor(np.zeros((2, 2, 1)))
    assert texture_loss([est], [target]).item() == 0.03125


def test_texture_loss_matches_whole_formula_oracle():
    rng = np.random.default_rng(67)
    for _ in range(5):
        fe = [rng.normal(size=(3, 4, 5)), rng.normal(size=(6, 2, 3))]
        ft = [rng.normal(size=(3, 4, 5)), rng.normal(size=(6, 2, 3))]
        got = texture_loss([T.Tensor(a) for a in fe], [T.Tensor(a) for a in ft]).item()
        want = texture_loss_oracle(fe, ft)
        assert abs(got - want) <= 1e-12 * max(1.0, abs(want))


def test_texture_loss_layer_weights():
    rng = np.random.default_rng(71)
    fe = [rng.normal(size=(3, 4, 4)), rng.normal(size=(5, 2, 2))]
    ft = [rng.normal(size=(3, 4, 4)), rng.normal(size=(5, 2, 2))]
    est = [T.Tensor(a) for a in fe]
    tgt = [T.Tensor(a) for a in ft]
    cfg = LossConfig(taps=("a", "b"), weights=(2.0, 0.5))
    got = texture_loss(est, tgt, cfg).item()
    want = texture_loss_oracle(fe, ft, weights=(2.0, 0.5))
    assert abs(got - want) <= 1e-12 * abs(want)


def test_texture_loss_batch_is_mean_of_samples():
    rng = np.random.default_rng(73)
    fe = rng.normal(size=(2, 3, 4, 4))
    ft = rng.normal(size=(2, 3, 4, 4))
    batched = texture_loss([T.Tensor(fe)], [T.Tensor(ft)]).item()
    singles = [
        texture_loss([T.Tensor(fe[i])], [T.Tensor(ft[i])]).item() for i in range(2)
    ]
    assert abs(batched - np.mean(singles)) <= 1e-12 * abs(batched)


def test_texture_loss_zero_iff_grams_equal():
    rng = np.random.default_rng(79)
    f = rng.normal(size=(3, 1, 2))
    # negating every feature keeps every Gram entry bit-identical
    assert texture_loss([T.Tensor(f)], [T.Tensor(-f)]).item() == 0.0
    bumped = f.copy()
    bumped[0, 0, 0] += 0.5
    assert texture_loss([T.Tensor(f)], [T.Tensor(bumped)]).item() > 0.0


def test_texture_loss_layer_mismatch_is_contract_error():
    a = [T.Tensor(np.zeros((2, 2, 2)))]
    b = [T.Tensor(np.zeros((2, 2, 2))), T.Tensor(np.zeros((2, 2, 2)))]
    with pytest.raises(ContractError):
        texture_loss(a, b)
    with pytest.raises(ContractError):
        texture_loss(a, [T.Tensor(np.zeros((3, 2, 2)))])
    with pytest.raises(ContractError):
        texture_loss([], [])


def test_loss_config_validation():
    with pytest.raises(ContractError):
        LossConfig(taps=())
    with pytest.raises(ContractError):
        LossConfig(taps=("a",), weights=(1.0, 2.0))
    with pytest.raises(ContractError):
        LossConfig(taps=("a",), weights=(-1.0,))
    cfg = LossConfig(taps=("a", "b"))
    assert cfg.weights == (1.0, 1.0)


def test_texture_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(83)
    fe = T.Tensor(rng.normal(size=(3, 3, 3)), requires_grad=True)
    ft = rng.normal(size=(3, 3, 3))
    with T.Tape() as tape:
        loss = texture_loss([fe], [T.Tensor(ft)])
    tape.backward(loss)
    fd = fd_grad(lambda: texture_loss_oracle([fe.data], [ft]), fe.data)
    assert np.allclose(fe.grad, fd, rtol=1e-5, atol=1e-9)


# ---------------------------------------------------------------- masks


def test_apply_masks_all_ones_identity():
    rng = np.random.default_rng(89)
    img = T.Tensor(rng.uniform(size=(1, 3, 4, 4)))
    masks = MaskSet((np.ones((4, 4)),), (OTHERS_LABEL,))
    (out,) = apply_masks(img, masks)
    assert np.array_equal(out.data, img.data)


def test_apply_masks_halves_sum_to_image():
    rng = np.random.default_rng(97)
    img = T.Tensor(rng.uniform(size=(1, 3, 4, 6)))
    left = np.zeros((4, 6))
    left[:, :3] = 1
    masks = MaskSet((left, 1 - left), (0, 1))
    a, b = apply_masks(img, masks)
    assert np.array_equal(a.data + b.data, img.data)


def test_apply_masks_left_column_example():
    img = T.Tensor(np.tile(np.array([[1.0, 2.0], [3.0, 4.0]]), (1, 3, 1, 1)))
    mask = np.array([[1, 0], [1, 0]])
    masks = MaskSet((mask,), (0,))
    (out,) = apply_masks(img, masks)
    for c in range(3):
        assert np.array_equal(out.data[0, c], [[1.0, 0.0], [3.0, 0.0]])


def test_apply_masks_shape_mismatch():
    img = T.Tensor(np.zeros((1, 3, 4, 4)))
    masks = MaskSet((np.ones((5, 4)),), (0,))
    with pytest.raises(DimensionError):
        apply_masks(img, masks)


def test_mask_set_validation():
    with pytest.raises(ValidationError):
        MaskSet((np.full((2, 2), 0.5),), (0,))
    with pytest.raises(DimensionError):
        MaskSet((np.ones((2, 2)), np.ones((3, 3))), (0, 1))
    with pytest.raises(ContractError):
        MaskSet((), ())
    ms = MaskSet((np.ones((2, 2)), np.ones((2, 2))), (0, 0), (False, True))
    assert ms.partition_ok()  # the replica does not break the partition
    assert ms.distinct_indices() == [0]
    assert not MaskSet((np.ones((2, 2)),) * 2, (0, 1)).partition_ok()


# ------------------------------------------------------ semantic variant


def test_semantic_loss_zero_on_equal_images():
    ex = small_extractor(101)
    rng = np.random.default_rng(103)
    img = rng.uniform(size=(1, 3, 8, 8))
    masks = MaskSet((np.ones((8, 8)),), (OTHERS_LABEL,))
    loss = semantic_texture_loss(
        T.Tensor(img), T.Tensor(img.copy()), masks, ex, LossConfig(taps=("conv1_2",))
    )
    assert loss.item() == 0.0


def test_semantic_loss_single_mask_degenerates_to_plain_loss():
    ex = small_extractor(107)
    rng = np.random.default_rng(109)
    est = T.Tensor(rng.uniform(size=(1, 3, 8, 8)))
    tgt = T.Tensor(rng.uniform(size=(1, 3, 8, 8)))
    cfg = LossConfig(taps=("conv1_1", "conv1_2"))
    masks = MaskSet((np.ones((8, 8)),), (OTHERS_LABEL,))
    guided = semantic_texture_loss(est, tgt, masks, ex, cfg).item()
    plain = texture_loss(
        ex.forward_with_taps(est, cfg.taps), ex.forward_with_taps(tgt, cfg.taps), cfg
    ).item()
    assert abs(guided - plain) <= 1e-12 * max(1.0, abs(plain))


def test_semantic_loss_decomposes_over_two_masks():
    ex = small_extractor(113)
    rng = np.random.default_rng(127)
    est = T.Tensor(rng.uniform(size=(1, 3, 8, 8)))
    tgt = T.Tensor(rng.uniform(size=(1, 3, 8, 8)))
    cfg = LossConfig(taps=("conv1_2",))
    top = np.zeros((8, 8))
    top[:4] = 1
    masks = MaskSet((top, 1 - top), (0, 1))
    guided = semantic_texture_loss(est, tgt, masks, ex, cfg).item()
    parts = 0.0
    for m in masks.masks:
        one = MaskSet((m,), (0,))
        me = apply_masks(est, one)[0]
        mt = apply_masks(tgt, one)[0]
        parts += texture_loss(
            ex.forward_with_taps(me, cfg.taps), ex.forward_with_taps(mt, cfg.taps), cfg
        ).item()
    assert abs(guided - parts) <= 1e-12 * max(1.0, abs(parts))


def test_semantic_loss_counts_replicas_by_default():
    ex = small_extractor(131)
    rng = np.random.default_rng(137)
    est = T.Tensor(rng.uniform(size=(1, 3, 8, 8)))
    tgt = T.Tensor(rng.uniform(size=(1, 3, 8, 8)))
    cfg = LossConfig(taps=("conv1_1",))
    ones = np.ones((8, 8))
    doubled = MaskSet((ones, ones), (OTHERS_LABEL, OTHERS_LABEL), (False, True))
    single = MaskSet((ones,), (OTHERS_LABEL,))
    twice = semantic_texture_loss(est, tgt, doubled, ex, cfg).item()
    once = semantic_texture_loss(est, tgt, single, ex, cfg).item()
    deduped = semantic_texture_loss(est, tgt, doubled, ex, cfg, count_replicas=False).item()
    assert abs(twice - 2 * once) <= 1e-12 * abs(twice)
    assert deduped == once


def test_semantic_loss_rejects_broken_partition():
    ex = small_extractor(139)
    img = T.Tensor(np.zeros((1, 3, 8, 8)))
    overlapping = MaskSet((np.ones((8, 8)), np.ones((8, 8))), (0, 1))
    with pytest.raises(ValidationError):
        semantic_texture_loss(img, img, overlapping, ex, LossConfig(taps=("conv1_1",)))


def test_semantic_loss_image_shape_mismatch():
    ex = small_extractor(149)
    masks = MaskSet((np.ones((8, 8)),), (0,))
    with pytest.raises(ContractError):
        semantic_texture_loss(
            T.Tensor(np.zeros((1, 3, 8, 8))),
            T.Tensor(np.zeros((1, 3, 8, 10))),
            masks,
            ex,
            LossConfig(taps=("conv1_1",)),
        )


# ------------------------------------------------------------------ mse


def test_mse_loss_examples_and_oracle():
    rng = np.random.default_rng(151)
    a = rng.uniform(size=(1, 3, 5, 5))
    assert mse_loss(T.Tensor(a), T.Tensor(a.copy())).item() == 0.0
    assert mse_loss(T.Tensor(a + 1.0), T.Tensor(a)).item() == pytest.approx(1.0, abs=1e-12)
    b = rng.uniform(size=(1, 3, 5, 5))
    want = ((a - b) ** 2).sum() / a.size
    assert abs(mse_loss(T.Tensor(a), T.Tensor(b)).item() - want) <= 1e-12 * want
    with pytest.raises(DimensionError):
        mse_loss(T.Tensor(np.zeros((1, 3, 4, 4))), T.Tensor(np.zeros((1, 3, 4, 5))))


def test_mse_loss_gradient():
    rng = np.random.default_rng(157)
    est = T.Tensor(rng.uniform(size=(2, 3, 4)), requires_grad=True)
    tgt = T.Tensor(rng.uniform(size=(2, 3, 4)))
    with T.Tape() as tape:
        loss = mse_loss(est, tgt)
    tape.backward(loss)
    assert np.allclose(est.grad, 2 * (est.data - tgt.data) / est.size)
