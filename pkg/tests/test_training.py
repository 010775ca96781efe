import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fireyolo.dataset import BoxLabel, generate_synthetic, make_batches
from fireyolo.detector import ModelConfig, build_model
from fireyolo.inference import InferenceConfig
from fireyolo.tensor import Tape, Tensor, backward
from fireyolo.training import (
    HISTORY_COLUMNS,
    DivergenceError,
    LossConfig,
    MissingGradientError,
    OptimizerConfig,
    assign_targets,
    bce_with_logits,
    compute_loss,
    iou_box_loss,
    sgd_step,
    train,
    train_step,
)

from conftest import central_difference, max_rel_error

LN2 = math.log(2.0)


def naive_bce(x, y, w=1.0, p=1.0):
    s = 1 / (1 + np.exp(-x))
    return -w * (p * y * np.log(s) + (1 - y) * np.log(1 - s))


def bce(x, y, **kw):
    return bce_with_logits(Tensor(np.asarray(x, dtype=np.float64)), np.asarray(y, dtype=np.float64), **kw).data


# --- BCE ----------------------------------------------------------------------


def test_bce_examples():
    assert abs(float(bce([0.0], [1.0])) - LN2) < 1e-6
    assert abs(float(bce([0.0], [1.0], pos_weight=2.0)) - 2 * LN2) < 1e-6
    assert abs(float(bce([0.0, 0.0], [1.0, 0.0], reduction="sum")) - 2 * LN2) < 1e-12
    assert abs(float(bce([0.0, 0.0], [1.0, 0.0], reduction="mean")) - LN2) < 1e-12
    np.testing.assert_allclose(bce([0.0, 0.0], [1.0, 0.0], reduction="none"), [LN2, LN2])


def test_bce_stable_at_extremes():
    vals = bce([100.0, -100.0, 100.0, -100.0], [1.0, 1.0, 0.0, 0.0], reduction="none")
    assert np.all(np.isfinite(vals))
    np.testing.assert_allclose(vals, [0.0, 100.0, 100.0, 0.0], atol=1e-12)


@given(st.floats(-10, 10), st.floats(0, 1), st.floats(0.1, 5), st.floats(0.1, 5))
def test_bce_matches_naive(x, y, w, p):
    got = float(bce([x], [y], w_n=w, pos_weight=p, reduction="sum"))
    assert abs(got - naive_bce(x, y, w, p)) < 1e-6


@given(st.floats(-20, 20), st.floats(0.1, 5), st.floats(0.01, 5))
def test_pos_weight_monotone(x, p, dp):
    assert float(bce([x], [1.0], pos_weight=p + dp)) > float(bce([x], [1.0], pos_weight=p))
    assert float(bce([x], [0.0], pos_weight=p + dp)) == float(bce([x], [0.0], pos_weight=p))


def test_bce_gradient(rng):
    x = rng.normal(size=(3, 4))
    y = rng.random((3, 4))
    for red in ("mean", "sum"):
        t = Tensor(x.copy(), requires_grad=True, dtype=np.float64)
        tape = Tape()
        backward(bce_with_logits(t, y, 1.5, 2.0, red, tape=tape), tape)
        arr = x.copy()
        num = central_difference(lambda: float(bce_with_logits(Tensor(arr, dtype=np.float64), y, 1.5, 2.0, red).data),
                                 [arr])[0]
        assert max_rel_error(t.grad, num) < 1e-6


def test_bce_errors():
    with pytest.raises(ValueError, match="shape"):
        bce([0.0, 1.0], [1.0])
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        bce([0.0], [1.5])
    with pytest.raises(ValueError, match="reduction"):
        bce([0.0], [1.0], reduction="max")


# --- box loss -----------------------------------------------------------------


def test_iou_box_loss_examples():
    assert iou_box_loss((5, 5, 4, 4), (5, 5, 4, 4)) == 0.0
    assert iou_box_loss((0, 0, 2, 2), (10, 10, 2, 2)) == 1.0
    # corners (0,0,2,2) vs (1,1,3,3) have IoU 1/7
    assert abs(iou_box_loss((1, 1, 2, 2), (2, 2, 2, 2)) - 6 / 7) < 1e-12
    with pytest.raises(ValueError):
        iou_box_loss((1, 1, 0, 2), (1, 1, 1, 1))


# --- target assignment --------------------------------------------------------


def _cfg(size=416):
    return ModelConfig.preset("n", input_size=size)


def test_assign_exact_anchor_positive():
    cfg = _cfg()
    aw, ah = cfg.anchors[0][1]
    lab = BoxLabel(0, 0.5, 0.5, aw / 416, ah / 416)
    a = assign_targets([[lab]], cfg)
    assert any(tuple(m[[0, 3]]) == (0, 1) for m in a.matches[0])


def test_assign_fallback_single_anchor():
    anchors = [[[1, 1], [1.2, 1.2], [1.5, 1.5]], [[2, 2], [2.5, 2.5], [3, 3]], [[3.2, 3.2], [3.5, 3.5], [4, 4]]]
    cfg = ModelConfig(0.33, 0.25, input_size=416, anchors=anchors)
    a = assign_targets([[BoxLabel(0, 0.5, 0.5, 400 / 416, 400 / 416)]], cfg)
    assert a.num_positives == 1
    assert len(a.matches[2]) == 1 and a.matches[2][0][3] == 2


def test_assign_center_cell():
    cfg = _cfg()
    a = assign_targets([[BoxLabel(0, 0.5, 0.5, 0.3, 0.3)]], cfg)
    assert a.grid_sizes[2] == 13
    assert all((m[1], m[2]) == (6, 6) for m in a.matches[2])
    for s, g in enumerate(a.grid_sizes):
        assert a.obj_targets[s].shape == (1, 3, g, g)
        assert a.obj_targets[s].sum() == len(a.matches[s])


def test_assign_errors():
    cfg = _cfg()
    with pytest.raises(ValueError, match="class"):
        assign_targets([[BoxLabel(3, 0.5, 0.5, 0.1, 0.1)]], cfg)


# --- compound loss ------------------------------------------------------------


def _maps(cfg, n, fill=None, rng=None):
    shapes = [(n, 3 * cfg.outputs_per_anchor, cfg.input_size // s, cfg.input_size // s) for s in cfg.strides]
    if fill is not None:
        return [Tensor(np.full(s, fill), dtype=np.float64) for s in shapes]
    return [Tensor(rng.normal(size=s), dtype=np.float64) for s in shapes]


def test_loss_no_gt_saturated():
    cfg = _cfg(64)
    a = assign_targets([[]], cfg)
    loss = compute_loss(_maps(cfg, 1, -100.0), a)
    assert loss.box == 0.0 and loss.cls == 0.0
    assert loss.obj < 1e-10


def test_loss_perfect_prediction():
    cfg = _cfg(64)
    lab = BoxLabel(0, 4 / 64, 4 / 64, cfg.anchors[0][0][0] / 64, cfg.anchors[0][0][1] / 64)
    a = assign_targets([[lab]], cfg, LossConfig(anchor_ratio_threshold=1.0001))
    assert a.num_positives == 1
    maps = _maps(cfg, 1, -100.0)
    raw = maps[0].data.reshape(1, 3, 6, 8, 8)
    raw[0, 0, 0:4, 0, 0] = 0.0  # decodes to center (4, 4) and the anchor size
    raw[0, 0, 4:, 0, 0] = 100.0
    loss = compute_loss(maps, a)
    assert loss.obj < 1e-10 and loss.cls < 1e-10 and loss.box < 1e-12


def test_loss_total_is_weighted_sum(rng):
    cfg = _cfg(64)
    labels = generate_synthetic(2, 64, seed=1)
    a = assign_targets([im.labels for im in labels], cfg)
    lc = LossConfig(lambda_obj=0.7, lambda_cls=0.3, lambda_box=2.0)
    loss = compute_loss(_maps(cfg, 2, rng=rng), a, lc)
    assert abs(loss.total_value - (0.7 * loss.obj + 0.3 * loss.cls + 2.0 * loss.box)) < 1e-9


def test_loss_box_weight_zero_ignores_boxes(rng):
    cfg = _cfg(64)
    a = assign_targets([im.labels for im in generate_synthetic(2, 64, seed=2)], cfg)
    lc = LossConfig(lambda_box=0.0)
    maps = _maps(cfg, 2, rng=rng)
    before = compute_loss(maps, a, lc).total_value
    for m in maps:
        m.data.reshape(2, 3, 6, *m.shape[2:])[:, :, 0:4] += rng.normal(size=(2, 3, 4, *m.shape[2:]))
    assert compute_loss(maps, a, lc).total_value == before


@pytest.mark.parametrize("reduction", ["mean", "sum"])
def test_loss_gradient_wrt_maps(rng, reduction):
    cfg = _cfg(64)
    a = assign_targets([im.labels for im in generate_synthetic(2, 64, seed=3)], cfg)
    lc = LossConfig(reduction=reduction, pos_weight=1.5)
    arrays = [m.data for m in _maps(cfg, 2, rng=rng)]
    tensors = [Tensor(x.copy(), requires_grad=True, dtype=np.float64) for x in arrays]
    tape = Tape()
    backward(compute_loss(tensors, a, lc, tape).total, tape)
    # finite differences on a sample of coordinates, including every positive cell
    for s, (arr, t) in enumerate(zip(arrays, tensors)):
        view = arr.reshape(2, 3, 6, *arr.shape[2:])
        coords = [(b, an, c, gy, gx) for b, gx, gy, an, _ in a.matches[s] for c in range(6)]
        coords += [tuple(rng.integers(0, d) for d in view.shape) for _ in range(10)]
        for idx in coords:
            old = view[idx]
            view[idx] = old + 1e-4
            hi = compute_loss([Tensor(x, dtype=np.float64) for x in arrays], a, lc).total_value
            view[idx] = old - 1e-4
            lo = compute_loss([Tensor(x, dtype=np.float64) for x in arrays], a, lc).total_value
            view[idx] = old
            num = (hi - lo) / 2e-4
            ana = t.grad.reshape(view.shape)[idx]
            assert abs(ana - num) <= 1e-4 * max(abs(ana), abs(num), 1e-6) + 1e-9, (s, idx, ana, num)


def test_loss_shape_mismatch(rng):
    cfg = _cfg(64)
    a = assign_targets([[BoxLabel(0, 0.5, 0.5, 0.2, 0.2)]], cfg)
    with pytest.raises(ValueError, match="does not match"):
        compute_loss(_maps(cfg, 2, rng=rng), a)
    with pytest.raises(ValueError):
        compute_loss(_maps(cfg, 1, rng=rng), a, LossConfig(reduction="none"))


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(pos_weight=0.0)
    with pytest.raises(ValueError):
        LossConfig(lambda_obj=0, lambda_cls=0, lambda_box=0)
    with pytest.raises(ValueError):
        OptimizerConfig(learning_rate=0.0)
    assert OptimizerConfig().learning_rate == 0.001


# --- SGD ----------------------------------------------------------------------


def _param(value, grad):
    p = Tensor(np.array([value], dtype=np.float32), requires_grad=True, name="w")
    p.grad = None if grad is None else np.array([grad], dtype=np.float32)
    return p


def test_sgd_printed_example():
    p = _param(1.0, 2.0)
    sgd_step([p], 0.001)
    assert p.data[0] == np.float32(0.998)
    assert p.grad is None


def test_sgd_zero_cases():
    p = _param(1.0, 0.0)
    sgd_step([p], 0.001)
    assert p.data[0] == 1.0
    q = _param(1.0, 5.0)
    sgd_step({"q": q}, 0.0)
    assert q.data[0] == 1.0


def test_sgd_missing_gradient():
    with pytest.raises(MissingGradientError, match="w"):
        sgd_step([_param(1.0, 1.0), _param(2.0, None)], 0.1)


@given(st.floats(-10, 10), st.floats(-10, 10), st.sampled_from([0.5, 0.25, 0.125, 2.0 ** -10]))
def test_sgd_linearity(w, g, lr):
    one = Tensor(np.array([w]), requires_grad=True, dtype=np.float64)
    one.grad = np.array([g])
    sgd_step([one], lr)
    two = Tensor(np.array([w]), requires_grad=True, dtype=np.float64)
    for _ in range(2):
        two.grad = np.array([g])
        sgd_step([two], lr / 2)
    assert abs(one.data[0] - two.data[0]) <= 1e-12 * max(1.0, abs(w))


# --- training loop ------------------------------------------------------------


def _tiny():
    return ModelConfig.preset("n", input_size=64)


def test_overfit_single_image():
    image = generate_synthetic(1, 64, seed=11)
    model = build_model(_tiny(), seed=0)
    lc = LossConfig(reduction="sum", lambda_box=5.0)
    batch = next(make_batches(image, 1, None))
    first = train_step(model, batch, lc, 0.001).total_value
    for _ in range(199):
        last = train_step(model, batch, lc, 0.001).total_value
    assert last < first


def test_train_history_deterministic(tmp_path):
    data = generate_synthetic(8, 64, seed=4)
    opt = OptimizerConfig(0.001, 2, 4)
    lc = LossConfig(reduction="sum", lambda_box=5.0)
    fast = InferenceConfig(0.01, 0.6, 100)
    h1 = train(build_model(_tiny(), 0), data[:4], data[4:], opt, lc, seed=1, out_dir=tmp_path / "a", eval_config=fast)
    h2 = train(build_model(_tiny(), 0), data[:4], data[4:], opt, lc, seed=1, out_dir=tmp_path / "b", eval_config=fast)
    strip = lambda h: [{k: v for k, v in vars(r).items() if k != "epoch_seconds"} for r in h.records]
    assert strip(h1) == strip(h2)
    assert len(h1.records) == 2
    for name in ("best.ckpt", "last.ckpt", "history.csv"):
        assert (tmp_path / "a" / name).exists()
    header = (tmp_path / "a" / "history.csv").read_text().splitlines()[0]
    assert header.split(",") == HISTORY_COLUMNS
    assert (tmp_path / "a" / "last.ckpt").read_bytes() == (tmp_path / "b" / "last.ckpt").read_bytes()


def test_train_input_errors():
    data = generate_synthetic(3, 64, seed=4)
    model = build_model(_tiny())
    with pytest.raises(ValueError, match="empty"):
        train(model, [], data, OptimizerConfig(0.001, 1, 1))
    with pytest.raises(ValueError, match="exceeds"):
        train(model, data[:2], data, OptimizerConfig(0.001, 1, 4))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_reported():
    data = generate_synthetic(2, 64, seed=4)
    model = build_model(_tiny())
    model.params["head.0.bias"].data[:] = np.nan
    with pytest.raises(DivergenceError) as info:
        train(model, data[:1], data[1:], OptimizerConfig(0.001, 1, 1))
    assert info.value.epoch == 0 and info.value.batch == 0
