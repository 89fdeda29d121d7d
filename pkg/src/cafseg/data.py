"""Deterministic synthetic segmentation corpus and its PPM/PGM on-disk format.

Randomness comes from xoshiro256** seeded through SplitMix64, so a corpus is
a pure function of ``(seed, index)`` and is byte-identical everywhere:

* SplitMix64 step: ``s += 0x9E3779B97F4A7C15``; ``z = s``;
  ``z = (z ^ z >> 30) * 0xBF58476D1CE4E5B9``; ``z = (z ^ z >> 27) * 0x94D049BB133111EB``;
  output ``z ^ z >> 31`` (all mod 2**64).
* Image ``i`` of a corpus with seed ``S`` starts a SplitMix64 at state
  ``S ^ (i * 0xD1B54A32D192ED03 mod 2**64)``; its first four outputs form the
  xoshiro256** state.
* ``uniform() = (next() >> 11) * 2**-53``; ``randint(lo, hi) = lo + floor(uniform() * (hi - lo + 1))``.
* Normals: Box-Muller on pairs ``(1 - uniform(), uniform())``, both outputs used.

Per image the draws are, in order: number of shapes, class choice (partial
Fisher-Yates over the sorted class ids), per shape up to 100 placement
attempts of (half-size in [3, 6], row centre, column centre), texture offset
(two ints in [0, 3]) and finally 3*H*W noise samples in channel-major order.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

MASK64 = (1 << 64) - 1
NOISE_SIGMA = 0.05
BACKGROUND_RGB = (0.45, 0.45, 0.45)
TEXTURE_AMPLITUDE = 0.06
SHAPE_KINDS = ("square", "disk", "triangle", "cross", "ring", "bar")
# fixed colour per class id (cycled past the end)
CLASS_COLORS = (
    (0.90, 0.15, 0.15),
    (0.15, 0.75, 0.20),
    (0.20, 0.30, 0.95),
    (0.95, 0.85, 0.10),
    (0.85, 0.20, 0.85),
    (0.10, 0.85, 0.85),
    (0.95, 0.55, 0.10),
    (0.55, 0.25, 0.05),
)


class SplitMix64:
    def __init__(self, state: int):
        self.state = state & MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256:
    """xoshiro256** 1.0."""

    def __init__(self, seed: int):
        sm = SplitMix64(seed)
        self.s = [sm.next() for _ in range(4)]

    def next(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def uniform(self) -> float:
        return (self.next() >> 11) * (1.0 / (1 << 53))

    def randint(self, lo: int, hi: int) -> int:
        return lo + int(self.uniform() * (hi - lo + 1))

    def normals(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        raw = np.array([self.next() >> 11 for _ in range(2 * pairs)], dtype=np.float64)
        u = raw * (1.0 / (1 << 53))
        u1 = 1.0 - u[0::2]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(2.0 * np.pi * u2)
        out[1::2] = r * np.sin(2.0 * np.pi * u2)
        return out[:n]


def image_rng(seed: int, index: int) -> Xoshiro256:
    return Xoshiro256((seed ^ (index * 0xD1B54A32D192ED03)) & MASK64)


@dataclass
class DatasetSpec:
    seed: int = 0
    num_images: int = 200
    width: int = 32
    height: int = 32
    class_shapes: dict[int, str] = field(
        default_factory=lambda: {c: SHAPE_KINDS[(c - 1) % len(SHAPE_KINDS)] for c in range(1, 6)}
    )
    shapes_per_image: tuple[int, int] = (1, 3)

    def __post_init__(self):
        if any(c < 1 or c >= 255 for c in self.class_shapes):
            raise ValueError("class ids must lie in 1..254 (0 is background, 255 ignore)")
        if self.width < 16 or self.height < 16:
            raise ValueError("width and height must be at least 16")
        bad = set(self.class_shapes.values()) - set(SHAPE_KINDS)
        if bad:
            raise ValueError(f"unknown shape kinds {sorted(bad)}")

    @classmethod
    def with_classes(cls, num_classes: int, **kw) -> "DatasetSpec":
        shapes = {c: SHAPE_KINDS[(c - 1) % len(SHAPE_KINDS)] for c in range(1, num_classes + 1)}
        return cls(class_shapes=shapes, **kw)


@dataclass
class Dataset:
    """Images are uint8 [3, rows, cols]; masks uint8 [rows, cols]."""

    images: list[np.ndarray]
    masks: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.images)

    def float_images(self, idx=None) -> np.ndarray:
        sel = range(len(self)) if idx is None else idx
        return np.stack([self.images[i] for i in sel]).astype(np.float64) / 255.0

    def subset(self, idx) -> "Dataset":
        return Dataset([self.images[i] for i in idx], [self.masks[i] for i in idx])

    def holdout_split(self, fraction: float, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Split off a random ``fraction`` of the images as a validation set."""
        if not 0.0 < fraction < 1.0:
            raise ValueError("holdout fraction must lie in (0, 1)")
        order = np.random.default_rng(seed).permutation(len(self))
        n_val = int(round(fraction * len(self)))
        return self.subset(sorted(order[n_val:])), self.subset(sorted(order[:n_val]))


def shape_mask(kind: str, r: int, cy: int, cx: int, rows: int, cols: int) -> np.ndarray:
    yy, xx = np.mgrid[0:rows, 0:cols]
    dy, dx = yy - cy, xx - cx
    thin = max(1, r // 3)
    if kind == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if kind == "disk":
        return dx * dx + dy * dy <= r * r
    if kind == "triangle":
        return (np.abs(dy) <= r) & (2 * np.abs(dx) <= dy + r)
    if kind == "cross":
        return ((np.abs(dx) <= r) & (np.abs(dy) <= thin)) | ((np.abs(dy) <= r) & (np.abs(dx) <= thin))
    if kind == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 > (r - 2) * (r - 2))
    if kind == "bar":
        return (np.abs(dx) <= r) & (np.abs(dy) <= thin)
    raise ValueError(f"unknown shape kind {kind!r}")


def _dilate(m: np.ndarray) -> np.ndarray:
    out = m.copy()
    out[1:, :] |= m[:-1, :]
    out[:-1, :] |= m[1:, :]
    out[:, 1:] |= m[:, :-1]
    out[:, :-1] |= m[:, 1:]
    return out


def class_color(class_id: int) -> tuple[float, float, float]:
    return CLASS_COLORS[(class_id - 1) % len(CLASS_COLORS)]


def generate_one(spec: DatasetSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    rng = image_rng(spec.seed, index)
    rows, cols = spec.height, spec.width
    ids = sorted(spec.class_shapes)
    lo, hi = spec.shapes_per_image
    n = min(rng.randint(lo, hi), len(ids))
    pool = list(ids)
    chosen = []
    for i in range(n):
        j = i + rng.randint(0, len(pool) - 1 - i)
        pool[i], pool[j] = pool[j], pool[i]
        chosen.append(pool[i])
    mask = np.zeros((rows, cols), dtype=np.uint8)
    occupied = np.zeros((rows, cols), dtype=bool)
    for cid in chosen:
        for _ in range(100):
            r = rng.randint(3, 6)
            cy = rng.randint(r, rows - 1 - r)
            cx = rng.randint(r, cols - 1 - r)
            m = shape_mask(spec.class_shapes[cid], r, cy, cx, rows, cols)
            if not (_dilate(m) & occupied).any():
                mask[m] = cid
                occupied |= m
                break
    oy, ox = rng.randint(0, 3), rng.randint(0, 3)
    yy, xx = np.mgrid[0:rows, 0:cols]
    checker = (((yy + oy) // 4 + (xx + ox) // 4) % 2) * 2.0 - 1.0
    img = np.empty((3, rows, cols))
    for ch in range(3):
        img[ch] = BACKGROUND_RGB[ch] + TEXTURE_AMPLITUDE * checker
    for cid in chosen:
        sel = mask == cid
        for ch in range(3):
            img[ch][sel] = class_color(cid)[ch]
    img = img + NOISE_SIGMA * rng.normals(3 * rows * cols).reshape(3, rows, cols)
    img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return img, mask


def generate(spec: DatasetSpec) -> Dataset:
    pairs = [generate_one(spec, i) for i in range(spec.num_images)]
    return Dataset([p[0] for p in pairs], [p[1] for p in pairs])


# ------------------------------------------------------------------ file I/O


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6; ``image`` is uint8 [3, rows, cols]."""
    _, rows, cols = image.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{cols} {rows}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(image.transpose(1, 2, 0)).tobytes())


def write_pgm(path, mask: np.ndarray) -> None:
    """Binary P5; pixel value = class id (255 = ignore)."""
    rows, cols = mask.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())


def _read_netpbm(path, magic: bytes) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(raw):
            raise FormatError(f"{path}: truncated header")
        c = raw[pos : pos + 1]
        if c == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(raw) and not raw[pos : pos + 1].isspace():
                pos += 1
            tokens.append(raw[start:pos])
    if tokens[0] != magic:
        raise FormatError(f"{path}: expected magic {magic.decode()}, found {tokens[0]!r}")
    try:
        cols, rows, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: non-numeric header field") from None
    if cols <= 0 or rows <= 0 or not 0 < maxval < 256:
        raise FormatError(f"{path}: unsupported header {cols}x{rows} maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    depth = 3 if magic == b"P6" else 1
    n = rows * cols * depth
    body = raw[pos : pos + n]
    if len(body) != n:
        raise FormatError(f"{path}: expected {n} pixel bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    if depth == 3:
        return arr.reshape(rows, cols, 3).transpose(2, 0, 1).copy()
    return arr.reshape(rows, cols).copy()


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6")


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5")


def save(dataset: Dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (img, mask) in enumerate(zip(dataset.images, dataset.masks)):
        ip, mp = f"img_{i:05d}.ppm", f"mask_{i:05d}.pgm"
        write_ppm(d / ip, img)
        write_pgm(d / mp, mask)
        lines.append(f"{ip}\t{mp}\n")
    tmp = d / "index.txt.tmp"
    tmp.write_text("".join(lines), encoding="utf-8")
    os.replace(tmp, d / "index.txt")


def load(directory) -> Dataset:
    d = Path(directory)
    index = d / "index.txt"
    if not index.exists():
        raise FormatError(f"{index}: missing index file")
    images, masks = [], []
    for lineno, line in enumerate(index.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"{index}:{lineno}: expected image<TAB>mask")
        img = read_ppm(d / parts[0])
        mask = read_pgm(d / parts[1])
        if img.shape[1:] != mask.shape:
            raise FormatError(
                f"{d / parts[1]}: mask size {mask.shape} does not match image {img.shape[1:]}"
            )
        images.append(img)
        masks.append(mask)
    return Dataset(images, masks)
