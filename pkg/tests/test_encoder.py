import dataclasses

import numpy as np
import pytest

from lfx import encoder as E
from lfx import tensor as T
from lfx.adapter import AdapterMode, AdapterParams
from lfx.encoder import EncoderConfig
from lfx.errors import DivergedLoss, IndivisibleDims, LfxError, ShapeMismatch
from lfx.gradcheck import grad_check
from lfx.lightfield import select_views
from lfx.synthetic import DISPARITIES, NUM_CLASSES, make_synthetic_task
from lfx.tensor import Tensor
from lfx.training import train_toy

SMALL = EncoderConfig(patch_size=4, stage_channels=(4, 8, 8), adapter_placement=(True, True, True), K=3)


def random_views(rng, config, b=1, size=16):
    return rng.random((b, config.K, size, size, config.in_channels))


# --- building blocks ---------------------------------------------------------

def loop_patchify(img, ps):
    h, w, c = img.shape
    rows = []
    for gy in range(h // ps):
        for gx in range(w // ps):
            vec = []
            for y in range(ps):
                for x in range(ps):
                    for ch in range(c):
                        vec.append(img[gy * ps + y, gx * ps + x, ch])
            rows.append(vec)
    return np.array(rows)


def test_patchify_loop_oracle(rng):
    img = rng.random((8, 12, 2))
    np.testing.assert_array_equal(E.patchify(img, 4)[0], loop_patchify(img, 4))


def test_patch_embed_identity():
    img = np.arange(16, dtype=float).reshape(1, 4, 4, 1)
    tokens = E.patch_embed(img, 2, Tensor(np.eye(4))).data
    np.testing.assert_array_equal(tokens[0], [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]])


def test_patch_embed_token_count(rng):
    tokens = E.patch_embed(rng.random((2, 32, 32, 1)), 8, Tensor(rng.normal(size=(6, 64))))
    assert tokens.shape == (2, 16, 6)


def test_patch_embed_errors(rng):
    with pytest.raises(IndivisibleDims):
        E.patchify(rng.random((1, 10, 8, 1)), 4)
    with pytest.raises(ShapeMismatch):
        E.patch_embed(rng.random((1, 8, 8, 1)), 4, Tensor(np.zeros((3, 15))))


def test_merge_and_upsample_indices():
    cells = E.merge_indices(4, 4)
    assert [c[0] for c in cells] == [0, 1, 4, 5]
    assert cells[3].tolist() == [5, 7, 13, 15]
    assert E.upsample_indices((2, 2), 2).tolist() == [0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]
    with pytest.raises(IndivisibleDims):
        E.merge_indices(3, 4)


def test_patch_merge_loop_oracle(rng):
    x = rng.normal(size=(1, 16, 2))
    w, b = rng.normal(size=(3, 8)), rng.normal(size=3)
    out = E.patch_merge(Tensor(x), (4, 4), Tensor(w), Tensor(b)).data
    for oy in range(2):
        for ox in range(2):
            members = [(2 * oy + dy) * 4 + 2 * ox + dx for dy in (0, 1) for dx in (0, 1)]
            vec = np.concatenate([x[0, m] for m in members])
            np.testing.assert_allclose(out[0, oy * 2 + ox], w @ vec + b, atol=1e-13)


# --- forward -----------------------------------------------------------------

def test_token_grids_quarter_per_stage(rng):
    config = EncoderConfig(K=2)
    result = E.forward(rng.random((1, 2, 32, 32, 1)), config, E.init_encoder(config))
    assert result.grids == [(8, 8), (4, 4), (2, 2), (1, 1)]
    assert [f.shape[1] for f in result.fused] == [64, 16, 4, 1]
    assert result.features.shape == (1, 64, sum(config.stage_channels))
    assert result.logits.shape == (1, 64, 5)


def test_grid_too_small_for_stages(rng):
    config = EncoderConfig(K=1)
    with pytest.raises(IndivisibleDims):
        E.forward(rng.random((1, 1, 16, 16, 1)), config, E.init_encoder(config))


def test_wrong_view_count(rng):
    with pytest.raises(ShapeMismatch):
        E.forward(rng.random((1, 2, 16, 16, 1)), SMALL, E.init_encoder(SMALL))


def test_fused_is_sum_of_views(rng):
    params = E.init_encoder(SMALL, adapter_init="random")
    result = E.forward(random_views(rng, SMALL, b=2), SMALL, params)
    for s, stage in enumerate(result.per_view):
        brute = np.zeros_like(stage[0].data)
        for v in stage:
            brute = brute + v.data
        assert np.abs(result.fused[s].data - brute).max() < 1e-12


def test_identical_views_identical_streams(rng):
    img = rng.random((16, 16, 1))
    views = np.broadcast_to(img, (1, 3, 16, 16, 1)).copy()
    result = E.forward(views, SMALL, E.init_encoder(SMALL, adapter_init="random"))
    for stage in result.per_view:
        for v in stage[1:]:
            assert v.data.tobytes() == stage[0].data.tobytes()


def test_duplicated_view_duplicates_stream(rng):
    a, b = rng.random((16, 16, 1)), rng.random((16, 16, 1))
    views = np.stack([a, b, a])[None]
    result = E.forward(views, SMALL, E.init_encoder(SMALL, adapter_init="random"))
    for stage in result.per_view:
        assert stage[2].data.tobytes() == stage[0].data.tobytes()
        assert not np.array_equal(stage[1].data, stage[0].data)


def test_zero_head_gives_uniform_logits(rng):
    params = E.init_encoder(SMALL, adapter_init="random")
    params.head_w.data[:] = 0.0
    params.head_b.data[:] = 0.25
    logits = E.forward(random_views(rng, SMALL), SMALL, params).logits.data
    assert (logits == 0.25).all()


def test_placement_off_ignores_adapter_params(rng):
    views = random_views(rng, SMALL)
    off = SMALL.without_adapter()
    bare = E.forward(views, off, E.init_encoder(off))
    loaded = E.init_encoder(SMALL, adapter_init="random")  # adapters exist but are not placed
    result = E.forward(views, off, loaded)
    assert result.logits.data.tobytes() == bare.logits.data.tobytes()
    E.loss(result, np.zeros((1, 16), dtype=int), off).backward()
    assert all(t.grad is None or not t.grad.any() for t in loaded.adapter_tensors())


def test_identity_adapters_leave_features_unchanged(rng):
    views = random_views(rng, SMALL)
    with_adapter = E.forward(views, SMALL, E.init_encoder(SMALL))
    bare = E.forward(views, SMALL.without_adapter(), E.init_encoder(SMALL.without_adapter()))
    assert with_adapter.features.data.tobytes() == bare.features.data.tobytes()


def test_forward_is_deterministic(rng):
    views = random_views(rng, SMALL)
    a, b = E.init_encoder(SMALL), E.init_encoder(SMALL)
    assert a.backbone_hash() == b.backbone_hash()
    assert E.forward(views, SMALL, a).logits.data.tobytes() == E.forward(views, SMALL, b).logits.data.tobytes()
    other = E.init_encoder(dataclasses.replace(SMALL, seed=1))
    assert other.backbone_hash() != a.backbone_hash()


def test_backbone_is_frozen():
    params = E.init_encoder(SMALL)
    assert not any(t.requires_grad for t in params.backbone.values())
    assert all(t.requires_grad for t in params.trainable())


def test_hard_mode_builds_one_set_per_view():
    config = dataclasses.replace(SMALL, adapter_mode=AdapterMode.HARD_PER_VIEW)
    params = E.init_encoder(config)
    assert all(isinstance(entry, list) and len(entry) == 3 for entry in params.adapters)
    shared = E.init_encoder(SMALL)
    assert len(params.adapter_tensors()) == 3 * len(shared.adapter_tensors())
    assert isinstance(shared.adapters[0], AdapterParams)


def test_config_validation():
    with pytest.raises(LfxError):
        EncoderConfig(stage_channels=(8, 4), adapter_placement=(True, True))
    with pytest.raises(LfxError):
        EncoderConfig(stage_channels=(8,) * 5, adapter_placement=(True,) * 5)
    with pytest.raises(LfxError):
        EncoderConfig(stage_channels=(8, 8), adapter_placement=(True,))
    with pytest.raises(LfxError):
        EncoderConfig(head="depth")


def test_saliency_head(rng):
    config = dataclasses.replace(SMALL, head=E.SALIENCY)
    params = E.init_encoder(config, adapter_init="random")
    result = E.forward(random_views(rng, config), config, params)
    assert result.logits.shape == (1, 16, 1)
    prob = E.predict(result, config)
    assert prob.shape == (1, 4, 4) and ((prob > 0) & (prob < 1)).all()
    assert np.isfinite(E.loss(result, np.ones((1, 4, 4)), config).item())


# --- gradients ---------------------------------------------------------------

# hidden width 16 dominates the parameter count, so keep everything else tiny
GRAD = EncoderConfig(patch_size=2, stage_channels=(2, 4), adapter_placement=(True, True), K=2)


def encoder_gradcheck(config, views, targets, tol=1e-4):
    params = E.init_encoder(config, adapter_init="random")
    return grad_check(lambda: E.loss(E.forward(views, config, params), targets, config),
                      params.trainable(), h=1e-5, tol=tol)


@pytest.mark.parametrize("mode", list(AdapterMode))
def test_encoder_gradients(mode):
    rng = np.random.default_rng(int(mode.value))
    config = dataclasses.replace(GRAD, seed=mode.value, adapter_mode=mode)
    views = rng.random((1, 2, 8, 8, 1))
    report = encoder_gradcheck(config, views, rng.integers(0, 5, size=(1, 16)))
    assert report.passed, str(report)


def test_four_stage_gradients(rng):
    config = EncoderConfig(patch_size=2, stage_channels=(2, 2, 2, 2), adapter_placement=(False, False, False, True),
                           K=2, seed=3)
    report = encoder_gradcheck(config, rng.random((1, 2, 16, 16, 1)), rng.integers(0, 5, size=(1, 64)))
    assert report.passed, str(report)


def test_saliency_gradients(rng):
    config = dataclasses.replace(GRAD, head=E.SALIENCY)
    report = encoder_gradcheck(config, rng.random((1, 2, 8, 8, 1)), rng.integers(0, 2, size=(1, 16)))
    assert report.passed, str(report)


# --- synthetic task ----------------------------------------------------------

def test_synthetic_task_is_deterministic():
    a, b = make_synthetic_task(5), make_synthetic_task(5)
    assert a.lightfield == b.lightfield
    assert np.array_equal(a.labels, b.labels)
    assert make_synthetic_task(6).lightfield != a.lightfield


@pytest.mark.parametrize("seed", range(5))
def test_synthetic_labels(seed):
    scene = make_synthetic_task(seed)
    assert scene.labels.shape == (8, 8)
    assert scene.labels.min() >= 0 and scene.labels.max() < NUM_CLASSES
    assert 2 <= len(scene.rects) <= 4
    assert len({r.disparity for r in scene.rects}) == len(scene.rects)
    np.testing.assert_array_equal(scene.labels, scene.center_labels[2::4, 2::4])
    for r in scene.rects:
        assert r.label == 1 + DISPARITIES.index(r.disparity)


@pytest.mark.parametrize("seed", range(3))
def test_synthetic_rasterizer_oracle(seed):
    scene = make_synthetic_task(seed)
    data = scene.lightfield.data
    a = data.shape[0]
    c = (a - 1) // 2
    center = data[c, c]
    for v in range(a):
        for u in range(a):
            for y in range(32):
                for x in range(32):
                    top = None
                    for r in scene.rects:
                        if r.contains(y, x, r.disparity * (v - c), r.disparity * (u - c)):
                            top = r
                    if top is not None:
                        ty = y - top.y0 - top.disparity * (v - c)
                        tx = x - top.x0 - top.disparity * (u - c)
                        assert data[v, u, y, x, 0] == np.float32(top.texture[ty, tx, 0])
                    elif not any(r.contains(y, x) for r in scene.rects):
                        assert data[v, u, y, x, 0] == center[y, x, 0]


def test_views_from_lightfield():
    scene = make_synthetic_task(0)
    sel = select_views(scene.lightfield, "nearest", 3)
    views = E.views_from_lightfield(scene.lightfield, sel)
    assert views.shape == (3, 32, 32, 1) and views.dtype == np.float64


# --- training ----------------------------------------------------------------

TINY = EncoderConfig(stage_channels=(4, 4, 8), adapter_placement=(True, True, True), K=3)


def test_zero_learning_rate_keeps_loss_flat():
    report = train_toy(0, TINY, steps=5, lr=0.0, n_train=2, n_eval=1)
    assert len(set(report.losses)) == 1
    assert report.final_loss == report.losses[0]


def test_backbone_unchanged_after_training():
    report = train_toy(1, TINY, steps=100, lr=0.05, n_train=2, n_eval=1)
    assert report.backbone_unchanged
    assert report.final_loss < report.losses[0]


def test_training_is_reproducible():
    a = train_toy(2, TINY, steps=4, lr=0.05, n_train=2, n_eval=1)
    b = train_toy(2, TINY, steps=4, lr=0.05, n_train=2, n_eval=1)
    assert a.to_csv() == b.to_csv()
    assert set(a.metrics) == {"eval_loss", "acc", "macc", "miou"}
    lines = a.to_csv().splitlines()
    assert lines[0] == "step,loss" and lines[-1].startswith("metrics,final_loss=")


def test_corners_strategy_fixes_view_count():
    report = train_toy(0, TINY, steps=1, lr=0.0, strategy="corners", n_train=1, n_eval=1)
    assert report.config.K == 3
    assert [str(c) for c in report.view_coords] == ["0,0", "4,4", "2,2"]


def test_focal_stack_training():
    config = dataclasses.replace(TINY, representation="focal")
    report = train_toy(0, config, steps=3, lr=0.05, n_train=1, n_eval=1)
    assert np.isfinite(report.final_loss)


def test_saliency_training():
    config = dataclasses.replace(TINY, head=E.SALIENCY)
    report = train_toy(0, config, steps=3, lr=0.05, n_train=1, n_eval=1)
    assert set(report.metrics) == {"eval_loss", "mae"}


def test_divergence_is_reported():
    with pytest.raises(DivergedLoss), np.errstate(all="ignore"):
        train_toy(0, TINY, steps=50, lr=1e6, n_train=1, n_eval=1)


def test_training_argument_checks():
    with pytest.raises(LfxError):
        train_toy(0, TINY, steps=0)
    with pytest.raises(LfxError):
        train_toy(0, TINY, steps=1, lr=float("nan"))
