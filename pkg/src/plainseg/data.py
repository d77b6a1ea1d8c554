"""Synthetic shapes dataset and binary PPM/PGM image I/O."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SHAPE_KINDS = ("rect", "disc", "triangle")
MANIFEST = "manifest.txt"

# fixed, well separated class colours; background is class 0
_PALETTE = np.array([
    [40, 40, 40], [220, 60, 60], [60, 200, 80], [70, 90, 230], [230, 210, 60],
    [200, 80, 210], [60, 210, 210], [240, 150, 50], [150, 150, 150], [120, 60, 20],
], dtype=np.float64)


@dataclass
class SyntheticShapesSpec:
    image_size: int = 64
    num_classes: int = 4
    num_images: int = 100
    shapes_min: int = 1
    shapes_max: int = 5
    size_min: float = 0.15
    size_max: float = 0.35
    noise: float = 8.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes (background + one shape class)")
        if self.num_classes > len(_PALETTE):
            raise ValueError(f"at most {len(_PALETTE)} classes supported")
        if not 0 <= self.shapes_min <= self.shapes_max:
            raise ValueError("shapes_min must be in [0, shapes_max]")


def palette(num_classes: int) -> np.ndarray:
    return _PALETTE[:num_classes]


# ---------------------------------------------------------------- PNM


def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM needs an HxWx3 uint8 array, got {img.shape}")
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError(f"PGM needs an HxW array, got {img.shape}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    while True:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        break
    start = pos
    while pos < len(buf) and not buf[pos : pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def read_pnm(path) -> np.ndarray:
    """Read binary P5 (HxW) or P6 (HxWx3) with maxval 255."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported PNM magic {magic!r}")
    w, pos = _read_token(buf, pos)
    h, pos = _read_token(buf, pos)
    maxval, pos = _read_token(buf, pos)
    if int(maxval) != 255:
        raise ValueError(f"{path}: only maxval 255 supported")
    w, h = int(w), int(h)
    ch = 3 if magic == b"P6" else 1
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * ch, offset=pos + 1)
    return data.reshape((h, w, 3) if ch == 3 else (h, w)).copy()


# ---------------------------------------------------------------- generation


def _rasterise(kind: str, cy: float, cx: float, r: float, angle: float, n: int) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    if kind == "disc":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "rect":
        return (np.abs(yy - cy) <= r * 0.8) & (np.abs(xx - cx) <= r)
    # triangle: three half-planes around the centre
    pts = [(cy + r * np.sin(angle + k * 2 * np.pi / 3), cx + r * np.cos(angle + k * 2 * np.pi / 3)) for k in range(3)]
    inside = np.ones((n, n), dtype=bool)
    for (y0, x0), (y1, x1) in zip(pts, pts[1:] + pts[:1]):
        cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
        ref = (x1 - x0) * (cy - y0) - (y1 - y0) * (cx - x0)
        inside &= cross * ref >= 0
    return inside


def generate_sample(spec: SyntheticShapesSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    """One (HxWx3 uint8 image, HxW uint8 label) pair; later shapes overwrite earlier ones."""
    rng = np.random.default_rng([spec.seed, index])
    n = spec.image_size
    label = np.zeros((n, n), dtype=np.uint8)
    count = int(rng.integers(spec.shapes_min, spec.shapes_max + 1))
    fg = np.arange(1, spec.num_classes)
    # cycle through a shuffled class order so every class shows up when count >= K-1
    order = np.concatenate([rng.permutation(fg) for _ in range(count // len(fg) + 1)])[:count]
    for cls in order:
        kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
        r = rng.uniform(spec.size_min, spec.size_max) * n
        cy, cx = rng.uniform(0.15 * n, 0.85 * n, size=2)
        m = _rasterise(kind, cy, cx, r, rng.uniform(0, 2 * np.pi), n)
        label[m] = cls
    colors = palette(spec.num_classes)
    img = colors[label] + rng.normal(0, spec.noise, size=(n, n, 3))
    return np.clip(np.round(img), 0, 255).astype(np.uint8), label


def generate_synthetic(spec: SyntheticShapesSpec, out_dir, split: str = "train", start: int = 0) -> Path:
    """Write ``split/img_XXXXX.ppm`` + ``split/lbl_XXXXX.pgm`` and update the manifest.

    Sample ``i`` uses generator index ``start + i``, so splits drawn from
    disjoint index ranges never share images.
    """
    out = Path(out_dir)
    (out / split).mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(spec.num_images):
        img, lab = generate_sample(spec, start + i)
        ip = f"{split}/img_{i:05d}.ppm"
        lp = f"{split}/lbl_{i:05d}.pgm"
        write_ppm(out / ip, img)
        write_pgm(out / lp, lab)
        lines.append(f"{split} {ip} {lp}\n")
    manifest = out / MANIFEST
    existing = []
    if manifest.exists():
        existing = [ln for ln in manifest.read_text().splitlines(keepends=True) if not ln.startswith(split + " ")]
    manifest.write_text("".join(existing + lines))
    return out


def load_split(root, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Images [N, 3, H, W] scaled to roughly unit range, labels [N, H, W]."""
    root = Path(root)
    imgs, labs = [], []
    for line in (root / MANIFEST).read_text().splitlines():
        parts = line.split()
        if len(parts) != 3 or parts[0] != split:
            continue
        imgs.append(read_pnm(root / parts[1]))
        labs.append(read_pnm(root / parts[2]))
    if not imgs:
        raise FileNotFoundError(f"no '{split}' entries in {root / MANIFEST}")
    return normalize_images(np.stack(imgs)), np.stack(labs).astype(np.int64)


def has_split(root, split: str) -> bool:
    manifest = Path(root) / MANIFEST
    return manifest.exists() and any(ln.split()[:1] == [split] for ln in manifest.read_text().splitlines())


def normalize_images(images: np.ndarray) -> np.ndarray:
    """uint8 NHWC -> float NCHW in [-1, 1]."""
    x = np.asarray(images, dtype=np.float64).transpose(0, 3, 1, 2)
    return x / 127.5 - 1.0


def in_memory_split(spec: SyntheticShapesSpec, start: int = 0) -> tuple[np.ndarray, np.ndarray]:
    pairs = [generate_sample(spec, start + i) for i in range(spec.num_images)]
    return normalize_images(np.stack([p[0] for p in pairs])), np.stack([p[1] for p in pairs]).astype(np.int64)


def file_digest(root) -> str:
    """Stable digest of every file under ``root`` (names and bytes)."""
    import hashlib

    h = hashlib.sha256()
    for dirpath, _, files in sorted(os.walk(root)):
        for name in sorted(files):
            p = Path(dirpath) / name
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
