"""Deterministic synthetic handwritten-digit generator.

Produces MNIST-shaped IDX files (28x28 grayscale, 60000 train / 10000 test,
standard file names) from vector stroke skeletons, for environments where the
real files cannot be downloaded. Each digit has a bank of jittered glyph
variants rendered at 2x resolution from a distance field; every sample then
gets its own affine warp, bilinear downsampling, and pixel noise. Train and
test use independently jittered banks so test glyphs are never pixel-copies
of training ones.

Everything is keyed by a single seed: the same (seed, params) pair always
yields byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import encode_idx_images, encode_idx_labels

GENERATOR_VERSION = 4
METADATA_FILE = "synthetic-meta.json"
TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"

HI_RES = 56
OUT_RES = 28


@dataclass(frozen=True)
class RenderParams:
    """Knobs controlling glyph variability and rendering difficulty."""

    variants_per_digit: int = 128
    vertex_jitter: float = 0.019
    stroke_radius: float = 0.050
    radius_jitter: float = 0.25
    ink_floor: float = 0.78
    stroke_drop_rate: float = 0.105
    drop_ink_max: float = 0.25
    rotation_deg: float = 7.0
    scale_jitter: float = 0.07
    shear: float = 0.08
    translate_px: float = 1.5
    noise_sigma: float = 0.08


def _arc(cx, cy, rx, ry, deg0, deg1, n=28):
    """Sampled elliptical arc; angles in degrees, y axis pointing down."""
    theta = np.radians(np.linspace(deg0, deg1, n))
    return np.stack([cx + rx * np.cos(theta), cy + ry * np.sin(theta)], axis=1)


def _poly(*points):
    return np.asarray(points, dtype=np.float64)


def digit_strokes(digit: int) -> list[np.ndarray]:
    """Stroke skeleton for one digit as polylines in the unit square.

    Closed loops are split into half-arc strokes so per-stroke ink variation
    (including the rare nearly-missing stroke) produces natural confusions:
    an 8 with a faint left half reads as a 3, a 0 missing its left half as a
    right parenthesis, and so on.
    """
    if digit == 0:
        return [
            _arc(0.50, 0.50, 0.19, 0.30, 90, 270, 26),
            _arc(0.50, 0.50, 0.19, 0.30, 270, 450, 26),
        ]
    if digit == 1:
        return [_poly((0.36, 0.32), (0.54, 0.16), (0.54, 0.84))]
    if digit == 2:
        arc = _arc(0.50, 0.32, 0.18, 0.17, 160, 380)
        tail = _poly(arc[-1], (0.30, 0.82), (0.72, 0.82))
        return [np.concatenate([arc, tail[1:]])]
    if digit == 3:
        return [
            _arc(0.48, 0.33, 0.17, 0.17, 200, 450),
            _arc(0.48, 0.65, 0.19, 0.19, 270, 520),
        ]
    if digit == 4:
        return [
            _poly((0.55, 0.16), (0.28, 0.60), (0.76, 0.60)),
            _poly((0.63, 0.20), (0.63, 0.86)),
        ]
    if digit == 5:
        stem = _poly((0.70, 0.16), (0.36, 0.16), (0.35, 0.50))
        belly = _arc(0.50, 0.645, 0.195, 0.195, 210, 510)
        return [stem, belly]
    if digit == 6:
        spine = _arc(0.54, 0.48, 0.27, 0.30, 285, 120, 36)
        bowl = _arc(0.50, 0.655, 0.165, 0.160, 0, 360, 40)
        return [spine, bowl]
    if digit == 7:
        return [_poly((0.30, 0.18), (0.70, 0.18), (0.44, 0.84))]
    if digit == 8:
        return [
            _arc(0.50, 0.335, 0.145, 0.175, 90, 270, 22),
            _arc(0.50, 0.335, 0.145, 0.175, 270, 450, 22),
            _arc(0.50, 0.670, 0.175, 0.170, 90, 270, 22),
            _arc(0.50, 0.670, 0.175, 0.170, 270, 450, 22),
        ]
    if digit == 9:
        bowl = _arc(0.50, 0.345, 0.155, 0.155, 0, 360, 40)
        tail = _poly((0.655, 0.345), (0.640, 0.60), (0.56, 0.84))
        return [bowl, tail]
    raise ValueError(f"no skeleton for digit {digit}")


def _densify(poly: np.ndarray, max_len: float = 0.03) -> np.ndarray:
    """Insert vertices so no segment exceeds max_len (keeps jitter smooth)."""
    pieces = [poly[:1]]
    for a, b in zip(poly[:-1], poly[1:]):
        steps = max(1, int(np.ceil(np.linalg.norm(b - a) / max_len)))
        t = np.linspace(0.0, 1.0, steps + 1)[1:, None]
        pieces.append(a + t * (b - a))
    return np.concatenate(pieces)


def _smooth_noise(rng, shape, passes=2):
    noise = rng.normal(0.0, 1.0, shape)
    for _ in range(passes):
        padded = np.concatenate([noise[:1], noise, noise[-1:]], axis=0)
        noise = 0.25 * padded[:-2] + 0.5 * padded[1:-1] + 0.25 * padded[2:]
    return noise


def _dist_to_polyline(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    a, b = poly[:-1], poly[1:]
    ab = b - a
    ap = points[:, None, :] - a[None]
    denom = np.maximum((ab * ab).sum(axis=1), 1e-12)
    t = np.clip((ap * ab[None]).sum(axis=2) / denom, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=2).min(axis=1)


def render_variant_bank(rng: np.random.Generator, params: RenderParams) -> np.ndarray:
    """Render (10, variants, HI_RES, HI_RES) float glyph images in [0, 1]."""
    grid = (np.arange(HI_RES) + 0.5) / HI_RES
    xs, ys = np.meshgrid(grid, grid)
    points = np.stack([xs.ravel(), ys.ravel()], axis=1)
    bank = np.zeros((10, params.variants_per_digit, HI_RES, HI_RES))
    for digit in range(10):
        strokes = [_densify(p) for p in digit_strokes(digit)]
        can_drop = len(strokes) > 1
        for v in range(params.variants_per_digit):
            radius = params.stroke_radius * (
                1.0 + params.radius_jitter * rng.uniform(-1.0, 1.0)
            )
            image = np.zeros(HI_RES * HI_RES)
            for poly in strokes:
                jittered = poly + params.vertex_jitter * _smooth_noise(rng, poly.shape)
                # a rare nearly-missing stroke creates genuine inter-class
                # confusions (an 8 with a faint left half reads as a 3)
                if can_drop and rng.uniform() < params.stroke_drop_rate:
                    ink = rng.uniform(0.05, params.drop_ink_max)
                else:
                    ink = rng.uniform(params.ink_floor, 1.0)
                d = _dist_to_polyline(points, jittered)
                stroke = ink * np.clip((radius - d) / (0.6 * radius), 0.0, 1.0)
                np.maximum(image, stroke, out=image)
            bank[digit, v] = image.reshape(HI_RES, HI_RES)
    return bank


def _sample_affines(rng: np.random.Generator, n: int, params: RenderParams):
    """Output-to-source affine maps (n, 2, 2) plus translations (n, 2)."""
    theta = np.radians(rng.uniform(-params.rotation_deg, params.rotation_deg, n))
    cos, sin = np.cos(theta), np.sin(theta)
    rot = np.stack(
        [np.stack([cos, -sin], axis=1), np.stack([sin, cos], axis=1)], axis=1
    )
    inv_scale = 1.0 / rng.uniform(1.0 - params.scale_jitter, 1.0 + params.scale_jitter, (n, 2))
    shear = rng.uniform(-params.shear, params.shear, n)
    shear_mat = np.zeros((n, 2, 2))
    shear_mat[:, 0, 0] = 1.0
    shear_mat[:, 1, 1] = 1.0
    shear_mat[:, 0, 1] = shear
    mats = rot @ shear_mat
    mats = mats * inv_scale[:, None, :]
    shift = rng.uniform(-params.translate_px, params.translate_px, (n, 2)) / OUT_RES
    return mats, shift


def _bilinear_gather(images: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Sample per-row images (n, H, W) at float coords; outside maps to 0."""
    n, h, w = images.shape
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx, fy = sx - x0, sy - y0
    rows = np.arange(n)[:, None]

    def tap(yi, xi):
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        vals = images[rows, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        return vals * inside

    top = tap(y0, x0) * (1 - fx) + tap(y0, x0 + 1) * fx
    bottom = tap(y0 + 1, x0) * (1 - fx) + tap(y0 + 1, x0 + 1) * fx
    return top * (1 - fy) + bottom * fy


def generate_images(
    labels: np.ndarray,
    bank: np.ndarray,
    rng: np.random.Generator,
    params: RenderParams,
) -> np.ndarray:
    """Render uint8 (n, OUT_RES, OUT_RES) images for the given label vector."""
    n = labels.shape[0]
    variants = rng.integers(0, bank.shape[1], n)
    grid = (np.arange(OUT_RES) + 0.5) / OUT_RES - 0.5
    gx, gy = np.meshgrid(grid, grid)
    coords = np.stack([gx.ravel(), gy.ravel()], axis=0)

    out = np.empty((n, OUT_RES, OUT_RES), dtype=np.uint8)
    chunk = 2048
    for start in range(0, n, chunk):
        sel = slice(start, min(start + chunk, n))
        m = sel.stop - sel.start
        mats, shift = _sample_affines(rng, m, params)
        src = mats @ coords[None] + (shift[:, :, None] + 0.5)
        sx = src[:, 0] * HI_RES - 0.5
        sy = src[:, 1] * HI_RES - 0.5
        glyphs = bank[labels[sel], variants[sel]]
        sampled = _bilinear_gather(glyphs, sx, sy).reshape(m, OUT_RES, OUT_RES)
        sampled += rng.normal(0.0, params.noise_sigma, sampled.shape)
        out[sel] = np.rint(np.clip(sampled, 0.0, 1.0) * 255.0).astype(np.uint8)
    return out


def balanced_labels(n: int, rng: np.random.Generator) -> np.ndarray:
    """n labels with counts as even as possible across digits, shuffled."""
    per, extra = divmod(n, 10)
    counts = [per + (1 if d < extra else 0) for d in range(10)]
    labels = np.repeat(np.arange(10), counts)
    return rng.permutation(labels)


def _generate_split(seed: int, split_id: int, count: int, params: RenderParams):
    bank_rng = np.random.default_rng([seed, split_id, 0xBA])
    sample_rng = np.random.default_rng([seed, split_id, 0x5A])
    bank = render_variant_bank(bank_rng, params)
    labels = balanced_labels(count, sample_rng)
    images = generate_images(labels, bank, sample_rng, params)
    return images, labels.astype(np.uint8)


def write_dataset(
    out_dir,
    num_train: int = 60000,
    num_test: int = 10000,
    seed: int = 0,
    params: RenderParams = RenderParams(),
) -> Path:
    """Generate and write the four IDX files plus a metadata sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split_id, count, img_name, lab_name in (
        (0, num_train, TRAIN_IMAGES, TRAIN_LABELS),
        (1, num_test, TEST_IMAGES, TEST_LABELS),
    ):
        images, labels = _generate_split(seed, split_id, count, params)
        (out / img_name).write_bytes(encode_idx_images(images))
        (out / lab_name).write_bytes(encode_idx_labels(labels))
    meta = {
        "generator_version": GENERATOR_VERSION,
        "seed": seed,
        "num_train": num_train,
        "num_test": num_test,
        "params": asdict(params),
    }
    (out / METADATA_FILE).write_text(json.dumps(meta, indent=2) + "\n")
    return out


def ensure_dataset(
    cache_dir,
    num_train: int = 60000,
    num_test: int = 10000,
    seed: int = 0,
    params: RenderParams = RenderParams(),
) -> Path:
    """Return a directory holding the synthetic files, generating on miss.

    An existing cache is reused only if its metadata matches the request
    exactly; anything else is regenerated in place.
    """
    cache = Path(cache_dir)
    meta_path = cache / METADATA_FILE
    expected = {
        "generator_version": GENERATOR_VERSION,
        "seed": seed,
        "num_train": num_train,
        "num_test": num_test,
        "params": asdict(params),
    }
    if meta_path.exists():
        try:
            on_disk = json.loads(meta_path.read_text())
        except json.JSONDecodeError:
            on_disk = None
        files_present = all(
            (cache / name).exists()
            for name in (TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS)
        )
        if on_disk == expected and files_present:
            return cache
    return write_dataset(cache, num_train, num_test, seed, params)
