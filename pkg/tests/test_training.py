import numpy as np
import pytest
from helpers import rand
from oracles import brute_force_assignment

from plainseg.decoder import MaskClassOutput
from plainseg.model import build_model, preset
from plainseg.tensor import Tensor, finite_difference_check
from plainseg.training import (AdamW, GTSegmentation, build_lr_schedule, clip_grad_norm, compute_loss,
                               hungarian_match, lr_at, mask_class_loss, match, param_group, train_step,
                               uses_weight_decay)

# ---------------------------------------------------------------- matcher


def test_matcher_two_by_two():
    rows, cols = hungarian_match(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert dict(zip(cols.tolist(), rows.tolist())) == {0: 0, 1: 1}
    assert np.array([[1.0, 2.0], [2.0, 1.0]])[rows, cols].sum() == 2.0


@pytest.mark.parametrize("n", range(1, 7))
def test_matcher_equals_exhaustive_search(n):
    rng = np.random.default_rng(n)
    for _ in range(10):
        q = n + int(rng.integers(0, 3))
        cost = rng.standard_normal((q, n))
        rows, cols = hungarian_match(cost)
        best, _ = brute_force_assignment(cost)
        assert np.isclose(cost[rows, cols].sum(), best)
        assert len(set(rows.tolist())) == n


def test_matcher_rejects_more_gt_than_queries():
    with pytest.raises(ValueError):
        hungarian_match(np.zeros((2, 3)))


def test_perfect_query_is_matched():
    mask = np.zeros((4, 4))
    mask[:2] = 1
    gt = GTSegmentation(np.array([2]), mask[None])
    cls = np.zeros((3, 4))
    cls[0, 2] = 20.0
    masks = np.zeros((3, 4, 4))
    masks[0] = np.where(mask > 0, 20.0, -20.0)
    (rows, cols), = match(cls[None], masks[None], [gt])
    assert rows.tolist() == [0] and cols.tolist() == [0]


def test_gt_from_label_map():
    lab = np.array([[0, 0, 3], [255, 3, 3]])
    gt = GTSegmentation.from_label_map(lab, 4)
    assert gt.classes.tolist() == [0, 3]
    assert gt.masks[1].tolist() == [[0, 0, 1], [0, 1, 1]]
    assert len(GTSegmentation.from_label_map(np.full((2, 2), 255), 4)) == 0


# ---------------------------------------------------------------- loss


def perfect_output(gts, Q=3, K=3, n_pred=2, hw=(4, 4)):
    cls = np.full((len(gts), Q, K + 1), -20.0)
    cls[:, :, K] = 20.0
    masks = np.full((len(gts), Q) + hw, -20.0)
    for b, gt in enumerate(gts):
        for g in range(len(gt)):
            cls[b, g] = -20.0
            cls[b, g, gt.classes[g]] = 20.0
            masks[b, g] = np.where(gt.masks[g] > 0, 20.0, -20.0)
    out = MaskClassOutput([Tensor(cls) for _ in range(n_pred)], [Tensor(masks) for _ in range(n_pred)])
    return out


def two_region_gt():
    lab = np.zeros((4, 4), dtype=int)
    lab[:, 2:] = 1
    return GTSegmentation.from_label_map(lab, 3)


def test_perfect_prediction_loss_is_near_zero(f64):
    gts = [two_region_gt()]
    loss = mask_class_loss(perfect_output(gts), gts, 3)
    assert 0 <= loss.item() < 0.01


def test_dice_of_identical_masks_is_zero(f64):
    gts = [two_region_gt()]
    out = perfect_output(gts, n_pred=1)
    out.mask_logits[0].data[...] = np.where(out.mask_logits[0].data > 0, 1e3, -1e3)
    out.class_logits[0].data[...] *= 1e2
    assert mask_class_loss(out, gts, 3).item() < 1e-12


def test_empty_gt_gives_class_only_loss(f64):
    gts = [GTSegmentation(np.zeros(0, np.int64), np.zeros((0, 4, 4)))]
    out = perfect_output(gts, n_pred=1)
    assert mask_class_loss(out, gts, 3).item() < 1e-6
    out.class_logits[0].data[...] = 0.0
    # uniform over K+1 classes for every query -> CE = log(4) with weight-normalised mean
    assert np.isclose(mask_class_loss(out, gts, 3).item(), 2.0 * np.log(4), atol=1e-6)


def test_loss_gradient_matches_fd(f64, rng):
    gts = [two_region_gt(), GTSegmentation.from_label_map(rng.integers(0, 3, (4, 4)), 3)]
    for _ in range(2):
        cls, masks = rand(rng, 2, 4, 4), rand(rng, 2, 4, 4, 4)
        out = MaskClassOutput([cls], [masks])
        asg = [match(cls.data, masks.data, gts)]
        err = finite_difference_check(lambda c, m: mask_class_loss(MaskClassOutput([c], [m]), gts, 3, asg), [cls, masks])
        assert err < 1e-5


def test_loss_invariant_to_query_permutation(f64, rng):
    gts = [two_region_gt()]
    cls, masks = rng.standard_normal((1, 4, 4)), rng.standard_normal((1, 4, 4, 4))
    perm = rng.permutation(4)
    a = mask_class_loss(MaskClassOutput([Tensor(cls)], [Tensor(masks)]), gts, 3).item()
    b = mask_class_loss(MaskClassOutput([Tensor(cls[:, perm])], [Tensor(masks[:, perm])]), gts, 3).item()
    assert np.isclose(a, b)


def test_loss_sums_over_predictions(f64):
    gts = [two_region_gt()]
    one = mask_class_loss(perfect_output(gts, n_pred=1), gts, 3).item()
    assert np.isclose(mask_class_loss(perfect_output(gts, n_pred=3), gts, 3).item(), 3 * one)


# ---------------------------------------------------------------- learning rates


def test_lr_schedule_reference_values():
    s = build_lr_schedule(3e-5, 0.9, 10, 12)
    assert s.lr("head") == pytest.approx(3e-4, rel=1e-12)
    assert s.lr("layer12") == pytest.approx(3e-5)
    assert s.lr("layer1") == pytest.approx(9.4143e-6, rel=1e-4)
    assert s.lr("embed") == pytest.approx(8.4729e-6, rel=1e-4)
    lrs = [s.lr("embed")] + [s.lr(f"layer{i}") for i in range(1, 13)]
    assert all(a < b for a, b in zip(lrs, lrs[1:]))


def test_literal_variant_reverses_direction():
    s = build_lr_schedule(3e-5, 0.9, 10, 12, literal=True)
    assert s.lr("layer1") > s.lr("layer12")
    assert s.lr("layer12") == pytest.approx(3e-5 * 0.9**12)


def test_no_decay_gives_equal_encoder_lrs():
    s = build_lr_schedule(1e-4, 1.0, 10, 4)
    assert {s.lr(g) for g in s.multipliers if g != "head"} == {1e-4}


@pytest.mark.parametrize("r,s", [(0.0, 10), (1.1, 10), (0.9, 1.0), (0.9, 0.5)])
def test_invalid_schedule(r, s):
    with pytest.raises(ValueError):
        build_lr_schedule(1e-4, r, s, 12)


def test_lr_at_endpoints():
    s = build_lr_schedule(3e-5, 0.9, 10, 12, warmup_iters=100, total_iters=1000)
    assert all(v == 0 for v in lr_at(0, s).values())
    assert lr_at(100, s)["head"] == pytest.approx(3e-4)
    assert lr_at(50, s)["layer12"] == pytest.approx(1.5e-5)
    assert lr_at(550, s)["head"] == pytest.approx(1.5e-4)
    assert all(v == 0 for v in lr_at(1000, s).values())
    with pytest.raises(ValueError):
        lr_at(1001, s)


def test_param_groups():
    assert param_group("encoder.blocks.0.attn.q_proj.weight", 12) == "layer1"
    assert param_group("encoder.blocks.11.fc1.weight", 12) == "layer12"
    assert param_group("encoder.patch_embed.weight", 12) == "embed"
    assert param_group("encoder.pos_embed", 12) == "embed"
    assert param_group("head.decoder.query_feat", 12) == "head"


def test_no_decay_list():
    w, b = Tensor(np.ones((2, 2))), Tensor(np.ones(2))
    assert uses_weight_decay("head.linear1.weight", w)
    assert not uses_weight_decay("head.linear1.bias", b)
    assert not uses_weight_decay("encoder.blocks.0.rel_bias.table", w)
    assert not uses_weight_decay("head.decoder.query_embed", w)


def test_every_model_param_has_a_group():
    model = build_model(preset("tiny"))
    groups = {param_group(n, 4) for n, _ in model.named_parameters()}
    assert groups == {"embed", "head"} | {f"layer{i}" for i in range(1, 5)}


# ---------------------------------------------------------------- optimiser


def test_clip_unit_norm_to_hundredth():
    a, b = Tensor(np.zeros(2)), Tensor(np.zeros(1))
    a.grad, b.grad = np.array([0.6, 0.0]), np.array([0.8])
    assert clip_grad_norm([a, b], 0.01) == pytest.approx(1.0)
    np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.006, 0, 0.008], rtol=1e-5)


def test_clip_leaves_small_grads():
    a = Tensor(np.zeros(2))
    a.grad = np.array([1e-3, 0.0])
    clip_grad_norm([a], 0.01)
    assert a.grad[0] == 1e-3


def test_adamw_first_step(f64):
    w = Tensor(np.array([[1.0]]))
    w.grad = np.array([[1.0]])
    AdamW([("w", w)], weight_decay=0.05).step(0.1)
    assert w.data[0, 0] == pytest.approx(1.0 * (1 - 0.1 * 0.05) - 0.1, abs=1e-6)


def test_adamw_without_decay_is_adam(f64):
    w = Tensor(np.array([[2.0]]))
    w.grad = np.array([[-3.0]])
    AdamW([("w", w)], weight_decay=0.0).step(0.1)
    assert w.data[0, 0] == pytest.approx(2.1, abs=1e-6)


def test_adamw_skips_decay_on_bias(f64):
    b = Tensor(np.array([1.0]))
    b.grad = np.array([1.0])
    AdamW([("x.bias", b)], weight_decay=0.5).step(0.1)
    assert b.data[0] == pytest.approx(0.9, abs=1e-6)


# ---------------------------------------------------------------- train steps


def one_image(seed=0):
    from plainseg.data import SyntheticShapesSpec, in_memory_split

    return in_memory_split(SyntheticShapesSpec(num_images=1, shapes_min=2, shapes_max=3, seed=seed))


def test_overfit_one_image():
    X, Y = one_image()
    model = build_model(preset("tiny"))
    opt = AdamW(model.named_parameters(), depth=4)
    sched = build_lr_schedule(1e-3, 0.9, 2.0, 4, warmup_iters=0, total_iters=50)
    losses = [train_step(model, opt, X, Y, sched, it, grad_clip=None) for it in range(50)]
    assert losses[-1] < 0.2 * losses[0], (losses[0], losses[-1])


def test_same_seed_same_trace():
    X, Y = one_image()

    def trace():
        model = build_model(preset("tiny"), seed=3)
        opt = AdamW(model.named_parameters(), depth=4)
        sched = build_lr_schedule(1e-4, 0.9, 10, 4, warmup_iters=1, total_iters=3)
        return [train_step(model, opt, X, Y, sched, it) for it in range(3)]

    assert trace() == trace()


def test_zero_lr_leaves_parameters():
    X, Y = one_image()
    model = build_model(preset("tiny"))
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    opt = AdamW(model.named_parameters(), depth=4)
    # iteration 0 of a warmup schedule has lr 0 everywhere
    train_step(model, opt, X, Y, build_lr_schedule(1e-3, 0.9, 10, 4, warmup_iters=10, total_iters=20), 0)
    assert all(np.array_equal(before[n], p.data) for n, p in model.named_parameters())


@pytest.mark.parametrize("variant", ["linear", "simple-upsample", "plainseg-hier"])
def test_other_variants_produce_finite_loss(variant):
    X, Y = one_image()
    over = dict(variant=variant)
    if variant == "plainseg-hier":
        over["decoder_layers"] = 3
    model = build_model(preset("tiny", **over))
    assert np.isfinite(compute_loss(model, X, Y).item())
