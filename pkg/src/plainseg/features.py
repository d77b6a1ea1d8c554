"""Channel-mean feature-map dumps around the Refiner, written as PGM."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import write_pgm
from .tensor import Tensor, no_grad


def feature_to_gray(feature: np.ndarray) -> np.ndarray:
    """[C, h, w] -> uint8 [h, w] of the channel mean, min-max scaled; flat maps become 128."""
    m = np.asarray(feature, dtype=np.float64).mean(axis=0)
    lo, hi = m.min(), m.max()
    if not hi > lo:
        return np.full(m.shape, 128, dtype=np.uint8)
    return np.round((m - lo) / (hi - lo) * 255.0).astype(np.uint8)


def stage_names(model) -> list[str]:
    n = model.cfg.group_count
    return ["pre-refine", "post-refine"] + [f"group-{i}" for i in range(n)]


def collect_features(model, image: np.ndarray) -> dict:
    """Feature maps of the first image: F_vit, F_refine, and each width-to-depth group."""
    if model.cfg.variant != "plainseg":
        raise ValueError(f"feature dumps need the plainseg variant, got {model.cfg.variant!r}")
    x = image[None] if image.ndim == 3 else image[:1]
    model.eval()
    with no_grad():
        f_vit = model.encoder(Tensor(x))
        refiner = model.head.refiner
        f_refine = refiner.refine(f_vit)
        groups = refiner.width_to_depth(f_refine)
    out = {"pre-refine": f_vit.data[0], "post-refine": f_refine.data[0]}
    out.update({f"group-{i}": g.data[0] for i, g in enumerate(groups)})
    return out


def dump_features(model, image: np.ndarray, stages, out_dir) -> list[Path]:
    """Write ``<stage>.pgm`` for each requested stage; returns the written paths."""
    valid = stage_names(model)
    stages = list(stages)
    for s in stages:
        if s not in valid:
            raise ValueError(f"unknown stage {s!r}; expected one of {valid}")
    feats = collect_features(model, image)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for s in stages:
        p = out / f"{s}.pgm"
        write_pgm(p, feature_to_gray(feats[s]))
        paths.append(p)
    return paths
