"""Mask-classification loss, layer-wise lr decay with a head scale, AdamW, and the train loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import ops
from .decoder import MaskClassOutput
from .tensor import Tape, Tensor, getitem, log_softmax, mean, sigmoid, softplus
from .tensor import sum as tsum

CLASS_WEIGHT, BCE_WEIGHT, DICE_WEIGHT = 2.0, 5.0, 5.0
NO_OBJECT_WEIGHT = 0.1


@dataclass
class GTSegmentation:
    """Per-image ground truth: class ids [G] and binary masks [G, h, w]."""

    classes: np.ndarray
    masks: np.ndarray

    @classmethod
    def from_label_map(cls, label: np.ndarray, num_classes: int, size: tuple | None = None,
                       ignore_index: int = 255) -> "GTSegmentation":
        """One mask per class present; nearest-centre sampling when ``size`` is smaller."""
        lab = np.asarray(label)
        if size is not None and tuple(size) != lab.shape:
            H, W = lab.shape
            ys = np.minimum(((np.arange(size[0]) + 0.5) * H / size[0]).astype(int), H - 1)
            xs = np.minimum(((np.arange(size[1]) + 0.5) * W / size[1]).astype(int), W - 1)
            lab = lab[ys][:, xs]
        present = [c for c in np.unique(lab) if c != ignore_index and c < num_classes]
        masks = np.stack([(lab == c) for c in present]).astype(np.float64) if present else np.zeros((0,) + lab.shape)
        return cls(np.asarray(present, dtype=np.int64), masks)

    def __len__(self):
        return len(self.classes)


# ---------------------------------------------------------------- matching


def _softplus_np(x):
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def match_cost(class_logits: np.ndarray, mask_logits: np.ndarray, gt: GTSegmentation,
               weights=(CLASS_WEIGHT, BCE_WEIGHT, DICE_WEIGHT)) -> np.ndarray:
    """[Q, G] cost = w_cls*(-p(c_gt)) + w_bce*BCE + w_dice*Dice for one image."""
    cls = np.asarray(class_logits, dtype=np.float64)
    e = np.exp(cls - cls.max(-1, keepdims=True))
    prob = e / e.sum(-1, keepdims=True)
    x = np.asarray(mask_logits, dtype=np.float64).reshape(cls.shape[0], -1)
    t = gt.masks.reshape(len(gt), -1)
    hw = x.shape[1]
    bce = (_softplus_np(-x) @ t.T + _softplus_np(x) @ (1 - t).T) / hw
    p = ops.sigmoid_np(x)
    dice = 1 - (2 * p @ t.T + 1) / (p.sum(-1)[:, None] + t.sum(-1)[None, :] + 1)
    return weights[0] * -prob[:, gt.classes] + weights[1] * bce + weights[2] * dice


def hungarian_match(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-cost one-to-one assignment of rows (queries) to columns (GT)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.shape[1] > cost.shape[0]:
        raise ValueError(f"{cost.shape[1]} ground-truth masks exceed {cost.shape[0]} queries")
    rows, cols = linear_sum_assignment(cost)
    order = np.argsort(cols)
    return rows[order], cols[order]


def match(class_logits, mask_logits, gts: list) -> list:
    """Per-image (query_idx, gt_idx) for one prediction of a batch."""
    out = []
    for b, gt in enumerate(gts):
        if len(gt) == 0:
            out.append((np.zeros(0, np.int64), np.zeros(0, np.int64)))
            continue
        out.append(hungarian_match(match_cost(class_logits[b], mask_logits[b], gt)))
    return out


# ---------------------------------------------------------------- loss


def _single_loss(cls: Tensor, masks: Tensor, gts: list, assignment: list, K: int) -> Tensor:
    B, Q = cls.shape[:2]
    target = np.full((B, Q), K, dtype=np.int64)
    for b, (qi, gi) in enumerate(assignment):
        target[b, qi] = gts[b].classes[gi]
    w = np.where(target == K, NO_OBJECT_WEIGHT, 1.0)
    logp = log_softmax(cls, axis=-1)
    bi, qi = np.meshgrid(np.arange(B), np.arange(Q), indexing="ij")
    picked = getitem(logp, (bi, qi, target))
    loss = CLASS_WEIGHT * tsum(picked * (-w / w.sum()))

    b_idx = np.concatenate([np.full(len(q), b) for b, (q, _) in enumerate(assignment)]).astype(np.int64)
    q_idx = np.concatenate([q for q, _ in assignment]).astype(np.int64)
    if len(q_idx) == 0:
        return loss
    tgt = np.concatenate([gts[b].masks[g] for b, (_, g) in enumerate(assignment)])
    tgt = tgt.reshape(len(q_idx), -1).astype(masks.data.dtype)
    n_masks = max(len(q_idx), 1)
    x = getitem(masks, (b_idx, q_idx)).reshape(len(q_idx), -1)
    bce = tsum(mean(softplus(x) - x * tgt, axis=1)) * (1.0 / n_masks)
    p = sigmoid(x)
    num = tsum(p * tgt, axis=1) * 2.0 + 1.0
    den = tsum(p, axis=1) + (tgt.sum(axis=1) + 1.0)
    dice = tsum(1.0 - num / den) * (1.0 / n_masks)
    return loss + BCE_WEIGHT * bce + DICE_WEIGHT * dice


def mask_class_loss(output: MaskClassOutput, gts: list, num_classes: int, assignments: list | None = None) -> Tensor:
    """Deep-supervised loss summed over every prediction in ``output``.

    Each prediction is matched independently unless ``assignments`` is given.
    """
    total = None
    for i, (cls, masks) in enumerate(zip(output.class_logits, output.mask_logits)):
        asg = assignments[i] if assignments is not None else match(cls.data, masks.data, gts)
        li = _single_loss(cls, masks, gts, asg, num_classes)
        total = li if total is None else total + li
    return total


def pixel_ce_loss(logits: Tensor, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Per-pixel CE for the linear / up-sampling decoders, logits resized to the label map."""
    H, W = labels.shape[-2:]
    logits = ops.resize_bilinear(logits, (H, W))
    logp = log_softmax(logits, axis=1)
    lab = np.asarray(labels).astype(np.int64)
    keep = lab != ignore_index
    b, y, x = np.nonzero(keep)
    picked = getitem(logp, (b, lab[keep], y, x))
    return tsum(picked) * (-1.0 / max(len(b), 1))


# ---------------------------------------------------------------- learning rates


@dataclass
class LRSchedule:
    base_lr: float
    decay: float
    head_scale: float
    depth: int
    warmup_iters: int = 1500
    total_iters: int = 80000
    power: float = 1.0
    multipliers: dict = field(default_factory=dict)

    def lr(self, group: str) -> float:
        return self.base_lr * self.multipliers[group]


def build_lr_schedule(base_lr: float, decay: float, head_scale: float, depth: int, warmup_iters: int = 1500,
                      total_iters: int = 80000, literal: bool = False) -> LRSchedule:
    """Layer-wise decay for encoder groups plus a scale ``s > 1`` for the head.

    Default: layer l of L gets ``r**(L-l)`` and the embeddings ``r**L``, so the
    deepest layer trains at the base rate. ``literal=True`` uses ``r**l`` for
    layer l counted from the bottom (embeddings as layer 0).
    """
    if not 0 < decay <= 1:
        raise ValueError(f"decay must be in (0, 1], got {decay}")
    if head_scale <= 1:
        raise ValueError(f"head scale must be > 1, got {head_scale}")
    if literal:
        mult = {"embed": 1.0, **{f"layer{i}": decay**i for i in range(1, depth + 1)}}
    else:
        mult = {"embed": decay**depth, **{f"layer{i}": decay ** (depth - i) for i in range(1, depth + 1)}}
    mult["head"] = head_scale
    return LRSchedule(base_lr, decay, head_scale, depth, warmup_iters, total_iters, 1.0, mult)


def lr_at(it: int, sched: LRSchedule) -> dict:
    """Linear warmup from 0, then polynomial decay to 0 at ``total_iters``."""
    if it < 0 or it > sched.total_iters:
        raise ValueError(f"iteration {it} outside [0, {sched.total_iters}]")
    if sched.warmup_iters and it < sched.warmup_iters:
        factor = it / sched.warmup_iters
    else:
        span = max(sched.total_iters - sched.warmup_iters, 1)
        factor = (1.0 - (it - sched.warmup_iters) / span) ** sched.power
    return {g: sched.base_lr * m * factor for g, m in sched.multipliers.items()}


def param_group(name: str, depth: int) -> str:
    """LR group of a parameter by its dotted name."""
    if name.startswith("encoder."):
        rest = name[len("encoder."):]
        if rest.startswith("blocks."):
            return f"layer{int(rest.split('.')[1]) + 1}"
        if rest.startswith("norm."):
            return f"layer{depth}"
        return "embed"
    return "head"


_NO_DECAY_KEYS = ("cls_token", "pos_embed", "rel_bias.table", "level_embed", "query_feat", "query_embed")


def uses_weight_decay(name: str, param: Tensor) -> bool:
    """No decay on norms, biases, position tables and learned embeddings."""
    if param.ndim <= 1:
        return False
    return not any(k in name for k in _NO_DECAY_KEYS)


# ---------------------------------------------------------------- optimisation


def clip_grad_norm(params: list, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    coef = max_norm / (total + 1e-6)
    if coef < 1.0:
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * coef
    return total


class AdamW:
    """Decoupled weight decay Adam over named parameters with per-group lrs."""

    def __init__(self, named_params, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.05,
                 depth: int = 0):
        self.params = list(named_params)
        self.betas, self.eps, self.weight_decay = betas, eps, weight_decay
        self.groups = {n: param_group(n, depth) for n, _ in self.params}
        self.decay = {n: uses_weight_decay(n, p) for n, p in self.params}
        self.state: dict[str, dict] = {}

    def step(self, lrs: dict | float) -> None:
        b1, b2 = self.betas
        for name, p in self.params:
            if p.grad is None:
                continue
            lr = lrs if isinstance(lrs, (int, float)) else lrs[self.groups[name]]
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = {"step": 0, "m": np.zeros_like(p.data, dtype=np.float64),
                                         "v": np.zeros_like(p.data, dtype=np.float64)}
            st["step"] += 1
            g = p.grad.astype(np.float64)
            st["m"] = b1 * st["m"] + (1 - b1) * g
            st["v"] = b2 * st["v"] + (1 - b2) * g * g
            mhat = st["m"] / (1 - b1 ** st["step"])
            vhat = st["v"] / (1 - b2 ** st["step"])
            upd = mhat / (np.sqrt(vhat) + self.eps)
            new = p.data.astype(np.float64)
            if self.decay[name] and self.weight_decay:
                new = new * (1 - lr * self.weight_decay)
            p.data[...] = new - lr * upd

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def state_arrays(self) -> dict:
        out = {}
        for name, st in self.state.items():
            out[f"opt.{name}.m"] = st["m"]
            out[f"opt.{name}.v"] = st["v"]
            out[f"opt.{name}.step"] = np.array([st["step"]], dtype=np.float64)
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        names = {n for n, _ in self.params}
        for key, arr in arrays.items():
            if not key.startswith("opt."):
                continue
            base, kind = key[4:].rsplit(".", 1)
            if base not in names:
                continue
            st = self.state.setdefault(base, {"step": 0, "m": None, "v": None})
            st[kind] = int(arr[0]) if kind == "step" else np.array(arr, dtype=np.float64)


# ---------------------------------------------------------------- steps


def compute_loss(model, images: np.ndarray, labels: np.ndarray) -> Tensor:
    cfg = model.cfg
    out = model(Tensor(images))
    if isinstance(out, MaskClassOutput):
        size = out.mask_logits[0].shape[-2:]
        gts = [GTSegmentation.from_label_map(lab, cfg.num_classes, size) for lab in labels]
        return mask_class_loss(out, gts, cfg.num_classes)
    return pixel_ce_loss(out, labels)


def train_step(model, optimizer: AdamW, images: np.ndarray, labels: np.ndarray, sched: LRSchedule, it: int,
               grad_clip: float | None = 0.01) -> float:
    """Forward, deep-supervised loss, backward, clip, AdamW at the lrs for ``it``."""
    model.train()
    optimizer.zero_grad()
    with Tape() as tape:
        loss = compute_loss(model, images, labels)
        tape.backward(loss)
    params = [p for _, p in optimizer.params]
    if grad_clip:
        clip_grad_norm(params, grad_clip)
    optimizer.step(lr_at(it, sched))
    return float(loss.item())


def fit(model, images: np.ndarray, labels: np.ndarray, *, lr: float = 1e-4, layer_decay: float = 0.9,
        head_scale: float = 10.0, batch_size: int = 8, total_iters: int = 600, warmup_iters: int = 30,
        weight_decay: float = 0.05, grad_clip: float | None = 0.01, literal_llrd: bool = False, seed: int = 0,
        log=None, log_every: int = 1, callback=None) -> AdamW:
    """Train with random mini-batches; ``log`` receives tab-separated metric lines.

    Each line holds the iteration, loss and the lr of every group. ``callback(it,
    loss)`` may return True to stop early.
    """
    depth = model.cfg.depth
    sched = build_lr_schedule(lr, layer_decay, head_scale, depth, warmup_iters, total_iters, literal=literal_llrd)
    opt = AdamW(model.named_parameters(), weight_decay=weight_decay, depth=depth)
    rng = np.random.default_rng(seed)
    groups = list(sched.multipliers)
    if log is not None:
        log.write("\t".join(["iter", "loss"] + [f"lr_{g}" for g in groups]) + "\n")
    for it in range(total_iters):
        idx = rng.integers(0, len(images), batch_size)
        loss = train_step(model, opt, images[idx], labels[idx], sched, it, grad_clip)
        if log is not None and (it % log_every == 0 or it == total_iters - 1):
            lrs = lr_at(it, sched)
            log.write("\t".join([str(it), f"{loss:.6g}"] + [f"{lrs[g]:.6g}" for g in groups]) + "\n")
            log.flush()
        if callback is not None and callback(it, loss):
            break
    return opt
