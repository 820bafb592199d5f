"""Synthetic co-occurrence benchmark, image file formats, augmentation.

Scenes are textured elliptical blobs on a textured background.  Classes
listed in ``texture_pairs`` share one texture per pair, pixel for pixel, so
nothing inside a small window distinguishes them.  What does distinguish
them is context: every scene carries two anchor blobs near the top, and an
ambiguous blob takes the first class of its pair when its nearest anchor is
close (centre distance at most the rule boundary) and the second class when
every anchor is far.  Placement keeps the two cases well separated from the
boundary and balanced on average, which caps any local-window classifier
near half credit on the paired classes.

Images are stored as binary PPM (P6), masks as binary PGM (P5) with 255
reserved for ignored pixels.  A dataset directory holds
``root/{train,val,test}/img_%05d.ppm`` plus ``msk_%05d.pgm`` and a
``spec.txt`` at the root recording the generating spec.  Sample ``index``
values number the whole dataset, so splits never share a scene.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, UsageError

__all__ = [
    "CoOccurrenceSpec",
    "SegSample",
    "generate_sample",
    "augment",
    "window_oracle",
    "class_template",
    "write_ppm",
    "read_ppm",
    "write_pgm",
    "read_pgm",
    "write_dataset",
    "load_split",
    "save_spec",
    "load_spec",
    "spec_from_kv",
    "paired_classes",
]

IGNORE_INDEX = 255
SPLITS = ("train", "val", "test")

# Scene geometry, in pixels at the reference 64x64 extent; scaled linearly
# for other sizes.  Near blobs sit 16..28 px from their closest anchor, far
# blobs at least 36 px from every anchor, and the labelling boundary of 32 px
# lies strictly between the two bands.  The near band deliberately extends
# past what a few strided convolutions can see from the blob's rim, so local
# texture plus a modest neighbourhood cannot resolve the pair labels.
_ANCHOR_BAND_Y = (10.0, 18.0)
_ANCHOR_SLOTS_X = ((10.0, 26.0), (38.0, 54.0))
_NEAR_RANGE = (16.0, 28.0)
_FAR_MIN = 36.0
_RULE_BOUNDARY = 32.0
_BLOB_ZONE_Y = (28.0, 56.0)
_BLOB_ZONE_X = (8.0, 56.0)
_MIN_SEPARATION = 12.0
_AMBIG_RADII = (4.0, 6.0)
_ANCHOR_RADII = (5.0, 7.0)
_PLACE_TRIES = 200


@dataclass
class CoOccurrenceSpec:
    k: int = 6
    grid: int = 3  # ambiguous blobs per texture pair
    texture_pairs: list[tuple[int, int]] = field(default_factory=lambda: [(1, 2), (3, 4)])
    noise_sigma: float = 0.02
    seed: int = 0
    size: int = 64

    def validate(self) -> None:
        if not (4 <= self.k <= 254):
            raise UsageError(f"class count must be in [4, 254], got {self.k}")
        if self.grid < 1:
            raise UsageError(f"blob density must be >= 1, got {self.grid}")
        if self.noise_sigma < 0:
            raise UsageError(f"noise sigma must be >= 0, got {self.noise_sigma}")
        if self.size < 32:
            raise UsageError(f"scene size must be >= 32, got {self.size}")
        seen: set[int] = set()
        for a, b in self.texture_pairs:
            for c in (a, b):
                if not (1 <= c < self.k):
                    raise UsageError(f"paired class {c} outside [1, {self.k})")
                if c in seen:
                    raise UsageError(f"class {c} appears in more than one pair")
                seen.add(c)
            if a == b:
                raise UsageError(f"pair ({a}, {b}) must name two distinct classes")
        if not self.anchor_classes():
            raise UsageError("at least one non-paired class is needed as an anchor")

    def anchor_classes(self) -> list[int]:
        paired = {c for pair in self.texture_pairs for c in pair}
        return [c for c in range(1, self.k) if c not in paired]


def paired_classes(spec: CoOccurrenceSpec) -> list[int]:
    return sorted(c for pair in spec.texture_pairs for c in pair)


@dataclass
class SegSample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray   # (H, W) uint8, 255 = ignore


# ---------------------------------------------------------------------------
# textures


def _texture_key(cid: int, spec: CoOccurrenceSpec):
    if cid == 0:
        return ("bg", 0)
    for p, pair in enumerate(spec.texture_pairs):
        if cid in pair:
            return ("pair", p)
    return ("anchor", spec.anchor_classes().index(cid))


def class_template(cid: int, spec: CoOccurrenceSpec, h: int, w: int) -> np.ndarray:
    """Noise-free texture of a class over absolute image coordinates."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    kind, key = _texture_key(cid, spec)
    tau = 2.0 * math.pi
    if kind == "bg":
        r = 0.40 + 0.06 * np.sin(tau * (xx + yy) / 23.0)
        g = 0.42 + 0.06 * np.sin(tau * yy / 17.0)
        b = 0.44 + 0.06 * np.sin(tau * xx / 19.0)
    elif kind == "pair":
        period = 5.0 + 2.0 * key
        if key % 2 == 0:
            wave = np.sin(tau * xx / period)
            r = 0.20 + 0.15 * wave
            g = 0.65 + 0.25 * wave
            b = 0.70 - 0.20 * wave
        else:
            dots = np.sin(tau * xx / period) * np.sin(tau * yy / period)
            r = 0.70 + 0.25 * dots
            g = 0.25 + 0.10 * np.sin(tau * yy / period)
            b = 0.65 + 0.25 * np.cos(tau * xx / period) * np.cos(tau * yy / period)
    else:
        period = 7.0 + 2.0 * key
        stripes = np.sin(tau * (xx + yy) / period)
        r = 0.75 + 0.20 * stripes
        g = 0.55 + 0.20 * stripes
        b = 0.15 + 0.10 * np.cos(tau * (xx - yy) / (period + 2.0))
    return np.clip(np.stack([r, g, b], axis=2), 0.0, 1.0)


# ---------------------------------------------------------------------------
# scene generation


def _nearest_anchor_dist(cy: float, cx: float, anchors) -> float:
    return min(math.hypot(cy - ay, cx - ax) for ay, ax, *_ in anchors)


def generate_sample(spec: CoOccurrenceSpec, index: int) -> SegSample:
    """Deterministic scene ``index`` of the benchmark described by ``spec``."""
    spec.validate()
    if index < 0:
        raise UsageError(f"sample index must be >= 0, got {index}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((spec.seed, index))))
    size = spec.size
    s = size / 64.0

    anchors = []
    anchor_ids = spec.anchor_classes()
    for slot, (x0, x1) in enumerate(_ANCHOR_SLOTS_X):
        ay = rng.uniform(*(v * s for v in _ANCHOR_BAND_Y))
        ax = rng.uniform(x0 * s, x1 * s)
        ry = rng.uniform(*(v * s for v in _ANCHOR_RADII))
        rx = rng.uniform(*(v * s for v in _ANCHOR_RADII))
        anchors.append((ay, ax, ry, rx, anchor_ids[slot % len(anchor_ids)]))

    blobs = []

    def separated(cy, cx):
        return all(math.hypot(cy - by, cx - bx) >= _MIN_SEPARATION * s
                   for by, bx, *_ in blobs)

    for pair in spec.texture_pairs:
        for _ in range(spec.grid):
            want_near = rng.random() < 0.5
            placed = None
            for _try in range(_PLACE_TRIES):
                if want_near:
                    ay, ax, *_ = anchors[int(rng.integers(0, len(anchors)))]
                    rad = rng.uniform(*(v * s for v in _NEAR_RANGE))
                    phi = rng.uniform(0.0, 2.0 * math.pi)
                    cy = ay + rad * math.sin(phi)
                    cx = ax + rad * math.cos(phi)
                else:
                    cy = rng.uniform(*(v * s for v in _BLOB_ZONE_Y))
                    cx = rng.uniform(*(v * s for v in _BLOB_ZONE_X))
                if not (_BLOB_ZONE_Y[0] * s <= cy <= _BLOB_ZONE_Y[1] * s
                        and _BLOB_ZONE_X[0] * s <= cx <= _BLOB_ZONE_X[1] * s):
                    continue
                d = _nearest_anchor_dist(cy, cx, anchors)
                if want_near and not (_NEAR_RANGE[0] * s <= d <= _NEAR_RANGE[1] * s):
                    continue
                if not want_near and d < _FAR_MIN * s:
                    continue
                if not separated(cy, cx):
                    continue
                placed = (cy, cx)
                break
            if placed is None:
                continue  # crowded scene; drop this blob
            cy, cx = placed
            ry = rng.uniform(*(v * s for v in _AMBIG_RADII))
            rx = rng.uniform(*(v * s for v in _AMBIG_RADII))
            d = _nearest_anchor_dist(cy, cx, anchors)
            cid = pair[0] if d <= _RULE_BOUNDARY * s else pair[1]
            blobs.append((cy, cx, ry, rx, cid))

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    image = class_template(0, spec, size, size).copy()
    mask = np.zeros((size, size), dtype=np.uint8)
    for cy, cx, ry, rx, cid in anchors + blobs:
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        mask[inside] = cid
        image[inside] = class_template(cid, spec, size, size)[inside]
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return SegSample(image=image.astype(np.float32), mask=mask)


# ---------------------------------------------------------------------------
# local-window reference classifier


def _box_sum(a: np.ndarray, half: int) -> np.ndarray:
    h, w = a.shape
    c = np.cumsum(np.cumsum(np.pad(a, ((1, 0), (1, 0))), axis=0), axis=1)
    y0 = np.clip(np.arange(h) - half, 0, h)
    y1 = np.clip(np.arange(h) + half + 1, 0, h)
    x0 = np.clip(np.arange(w) - half, 0, w)
    x1 = np.clip(np.arange(w) + half + 1, 0, w)
    return c[np.ix_(y1, x1)] - c[np.ix_(y0, x1)] - c[np.ix_(y1, x0)] + c[np.ix_(y0, x0)]


def window_oracle(image: np.ndarray, spec: CoOccurrenceSpec, window: int = 9) -> np.ndarray:
    """Nearest-template classification over a local window.

    Each pixel takes the class whose noise-free texture has the smallest
    summed squared residual over the surrounding window; ties go to the
    lower class id.  Paired classes have identical templates, so this
    classifier is exactly as good as local appearance can be.
    """
    if window < 1 or window % 2 == 0:
        raise UsageError(f"window must be a positive odd number, got {window}")
    img = np.asarray(image, dtype=np.float64)
    h, w, _ = img.shape
    half = window // 2
    resid = np.empty((spec.k, h, w))
    for cid in range(spec.k):
        tmpl = class_template(cid, spec, h, w)
        resid[cid] = _box_sum(((img - tmpl) ** 2).sum(axis=2), half)
    return resid.argmin(axis=0).astype(np.uint8)


# ---------------------------------------------------------------------------
# augmentation


def _bilinear_at(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w, _ = img.shape
    inb = (ys >= 0) & (ys <= h - 1) & (xs >= 0) & (xs <= w - 1)
    ysc = np.clip(ys, 0.0, h - 1.0)
    xsc = np.clip(xs, 0.0, w - 1.0)
    y0 = np.minimum(np.floor(ysc).astype(np.int64), max(h - 2, 0))
    x0 = np.minimum(np.floor(xsc).astype(np.int64), max(w - 2, 0))
    fy = (ysc - y0)[..., None]
    fx = (xsc - x0)[..., None]
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    out = ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
           + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])
    out[~inb] = 0.0
    return out


def augment(sample: SegSample, rng, crop_hw: tuple[int, int],
            ignore_index: int = IGNORE_INDEX) -> SegSample:
    """Random rotate, zoom, flip, crop; mask stays aligned with the image.

    Draws from ``rng`` in a fixed order: rotation degrees uniform in
    [-15, 15], zoom uniform in [0.8, 1.2], flip from one uniform [0, 1)
    draw, then the crop corner.  The image is resampled bilinearly, the
    mask by nearest neighbour, so no labelled pixel changes class.  Pixels
    pulled from outside the frame become 0 in the image and ``ignore_index``
    in the mask.
    """
    img, mask = sample.image, sample.mask
    h, w = mask.shape
    ch, cw = crop_hw
    if ch > h or cw > w or ch < 1 or cw < 1:
        raise UsageError(f"crop {ch}x{cw} does not fit sample {h}x{w}")

    theta = math.radians(float(rng.uniform(-15.0, 15.0)))
    zoom = float(rng.uniform(0.8, 1.2))
    do_flip = float(rng.random()) < 0.5

    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    oy, ox = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = oy - cy, ox - cx
    ct, st = math.cos(theta), math.sin(theta)
    ys = cy + (ct * dy - st * dx) / zoom
    xs = cx + (st * dy + ct * dx) / zoom

    new_img = _bilinear_at(img.astype(np.float64), ys, xs)
    yr = np.floor(ys + 0.5).astype(np.int64)
    xr = np.floor(xs + 0.5).astype(np.int64)
    valid = (yr >= 0) & (yr < h) & (xr >= 0) & (xr < w)
    new_mask = np.full((h, w), ignore_index, dtype=np.uint8)
    new_mask[valid] = mask[np.clip(yr, 0, h - 1), np.clip(xr, 0, w - 1)][valid]

    if do_flip:
        new_img = new_img[:, ::-1]
        new_mask = new_mask[:, ::-1]

    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    out_img = np.ascontiguousarray(new_img[top:top + ch, left:left + cw]).astype(np.float32)
    out_mask = np.ascontiguousarray(new_mask[top:top + ch, left:left + cw])
    return SegSample(image=out_img, mask=out_mask)


# ---------------------------------------------------------------------------
# PPM / PGM files


def _next_token(buf: bytes, pos: int, path: str) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos]
        if c in b" \t\r\n":
            pos += 1
        elif c == ord("#"):
            while pos < n and buf[pos] != ord("\n"):
                pos += 1
        else:
            break
    if pos >= n:
        raise DataError(f"{path}: header ended early at byte {pos}")
    start = pos
    while pos < n and buf[pos] not in b" \t\r\n":
        pos += 1
    return buf[start:pos], pos


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    tok, pos = _next_token(buf, 0, str(path))
    if tok != magic:
        raise DataError(f"{path}: expected {magic.decode()} magic at byte 0, got {tok[:8]!r}")
    dims = []
    for _ in range(3):
        tok, pos = _next_token(buf, pos, str(path))
        if not tok.isdigit():
            raise DataError(f"{path}: bad header number {tok[:8]!r} near byte {pos}")
        dims.append(int(tok))
    w, h, maxval = dims
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 is supported, got {maxval}")
    if pos >= len(buf) or buf[pos] not in b" \t\r\n":
        raise DataError(f"{path}: missing whitespace after header at byte {pos}")
    pos += 1
    need = w * h * channels
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise DataError(
            f"{path}: payload truncated at byte {pos + len(payload)}, "
            f"needed {need} bytes from byte {pos}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(h, w, channels) if channels > 1 else arr.reshape(h, w)


def write_ppm(path, image: np.ndarray) -> None:
    """Write an ``(H, W, 3)`` float image in [0, 1] as binary PPM."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise UsageError(f"PPM image must be (H, W, 3), got shape {img.shape}")
    u8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = u8.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(u8.tobytes())


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3).astype(np.float32) / 255.0


def write_pgm(path, mask: np.ndarray) -> None:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise UsageError(f"PGM mask must be (H, W), got shape {m.shape}")
    u8 = m.astype(np.uint8)
    h, w = u8.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(u8.tobytes())


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)


# ---------------------------------------------------------------------------
# dataset directories and spec files


_SPEC_KEYS = ("k", "grid", "noise_sigma", "seed", "size", "texture_pairs")


def spec_to_text(spec: CoOccurrenceSpec) -> str:
    pairs = ",".join(f"{a}-{b}" for a, b in spec.texture_pairs)
    lines = [
        f"k = {spec.k}",
        f"grid = {spec.grid}",
        f"noise_sigma = {spec.noise_sigma!r}",
        f"seed = {spec.seed}",
        f"size = {spec.size}",
        f"texture_pairs = {pairs}",
    ]
    return "\n".join(lines) + "\n"


def spec_from_kv(values: dict[str, str], source: str = "data config") -> CoOccurrenceSpec:
    unknown = set(values) - set(_SPEC_KEYS)
    if unknown:
        raise UsageError(f"{source}: unknown keys {sorted(unknown)}")
    spec = CoOccurrenceSpec()
    try:
        if "k" in values:
            spec.k = int(values["k"])
        if "grid" in values:
            spec.grid = int(values["grid"])
        if "noise_sigma" in values:
            spec.noise_sigma = float(values["noise_sigma"])
        if "seed" in values:
            spec.seed = int(values["seed"])
        if "size" in values:
            spec.size = int(values["size"])
        if "texture_pairs" in values:
            pairs = []
            token = values["texture_pairs"].strip()
            if token:
                for part in token.split(","):
                    a, _, b = part.strip().partition("-")
                    pairs.append((int(a), int(b)))
            spec.texture_pairs = pairs
    except ValueError as exc:
        raise UsageError(f"{source}: {exc}") from None
    spec.validate()
    return spec


def spec_from_text(text: str, source: str = "<spec>") -> CoOccurrenceSpec:
    from .configio import parse_kv_text

    try:
        return spec_from_kv(parse_kv_text(text, source=source), source=source)
    except UsageError as exc:
        raise DataError(str(exc)) from None


def save_spec(root, spec: CoOccurrenceSpec) -> None:
    Path(root, "spec.txt").write_text(spec_to_text(spec))


def load_spec(root) -> CoOccurrenceSpec:
    path = Path(root, "spec.txt")
    if not path.exists():
        raise DataError(f"{path}: missing dataset spec")
    return spec_from_text(path.read_text(), source=str(path))


def sample_paths(root, split: str, i: int) -> tuple[Path, Path]:
    base = Path(root, split)
    return base / f"img_{i:05d}.ppm", base / f"msk_{i:05d}.pgm"


def write_dataset(root, spec: CoOccurrenceSpec, counts: dict[str, int]) -> None:
    """Generate and store ``counts[split]`` scenes per split under ``root``."""
    spec.validate()
    for split in counts:
        if split not in SPLITS:
            raise UsageError(f"unknown split {split!r}, expected one of {SPLITS}")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    save_spec(root, spec)
    offset = 0
    for split in SPLITS:
        count = counts.get(split, 0)
        if count <= 0:
            continue
        (root / split).mkdir(exist_ok=True)
        for i in range(count):
            s = generate_sample(spec, offset + i)
            img_path, msk_path = sample_paths(root, split, i)
            write_ppm(img_path, s.image)
            write_pgm(msk_path, s.mask)
        offset += count


def load_split(root, split: str) -> list[SegSample]:
    base = Path(root, split)
    if not base.is_dir():
        raise DataError(f"{base}: split directory not found")
    samples = []
    for img_path in sorted(base.glob("img_*.ppm")):
        msk_path = base / img_path.name.replace("img_", "msk_").replace(".ppm", ".pgm")
        if not msk_path.exists():
            raise DataError(f"{msk_path}: mask missing for {img_path.name}")
        image = read_ppm(img_path)
        mask = read_pgm(msk_path)
        if image.shape[:2] != mask.shape:
            raise DataError(
                f"{img_path}: image extent {image.shape[:2]} does not match "
                f"mask {mask.shape}")
        samples.append(SegSample(image=image, mask=mask))
    if not samples:
        raise DataError(f"{base}: no samples found")
    return samples
