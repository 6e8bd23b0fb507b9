"""
Procedural referring-segmentation corpus of coloured shapes.

Scenes are drawn from a seed, rasterised at pixel centres, and paired with the
shortest attribute phrase that singles out one object. A fraction of samples
are counting questions that exercise the text objective only.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatVersionMismatch, NoUniqueReferent
from .vocab import (COLORS, COUNTS, PROMPT_PREFIX, REGIONS, SEG_ANSWER, SEG_ID, SHAPES, SIZES,
                    TOKENS, encode)

FORMAT_VERSION = 1

BACKGROUND = (20, 20, 20)
PALETTE = {
    "red": (220, 40, 40),
    "green": (40, 190, 60),
    "blue": (50, 80, 230),
    "yellow": (230, 210, 40),
}
# half-extent in pixels as a fraction of the image side
SIZE_RANGE = {"small": (0.07, 0.10), "large": (0.15, 0.19)}
MIN_VISIBLE = 12


@dataclass
class SceneObject:
    shape: str
    color: str
    size: str
    region: str
    cx: float
    cy: float
    half: float
    mask: np.ndarray = field(repr=False, default=None)  # visible pixels, filled by the scene

    def attrs(self) -> dict[str, str]:
        return {"shape": self.shape, "color": self.color, "size": self.size, "region": self.region}


@dataclass
class Scene:
    canvas: np.ndarray  # uint8 [H, W, 3]
    objects: list[SceneObject]


@dataclass
class Sample:
    image: np.ndarray  # uint8 [H, W, 3]
    expression_ids: list[int]
    mask: np.ndarray  # uint8 {0,1} [H, W]
    answer_ids: list[int]

    @property
    def is_segmentation(self) -> bool:
        return SEG_ID in self.answer_ids

    def __eq__(self, other) -> bool:
        return (isinstance(other, Sample)
                and self.expression_ids == other.expression_ids
                and self.answer_ids == other.answer_ids
                and np.array_equal(self.image, other.image)
                and np.array_equal(self.mask, other.mask))


# ---------------------------------------------------------------------------
# geometry

def shape_coverage(shape: str, cx: float, cy: float, half: float, H: int, W: int,
                   supersample: int = 1) -> np.ndarray:
    """Fraction of each pixel inside the shape, sampling ``supersample**2`` points per pixel.

    With ``supersample=1`` this is the pixel-centre rasterisation used for masks.
    """
    k = supersample
    offs = (np.arange(k) + 0.5) / k
    ys = (np.arange(H)[:, None] + offs[None, :]).reshape(-1)
    xs = (np.arange(W)[:, None] + offs[None, :]).reshape(-1)
    y, x = np.meshgrid(ys, xs, indexing="ij")
    if shape == "circle":
        inside = (x - cx) ** 2 + (y - cy) ** 2 <= half * half
    elif shape == "square":
        inside = (np.abs(x - cx) <= half) & (np.abs(y - cy) <= half)
    elif shape == "triangle":
        # apex up, base at cy + half, base width 2*half
        top, base = cy - half, cy + half
        t = (y - top) / (2.0 * half)
        inside = (y >= top) & (y <= base) & (np.abs(x - cx) <= t * half)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return inside.reshape(H, k, W, k).mean(axis=(1, 3))


def region_box(region: str, size: int) -> tuple[float, float, float, float]:
    """(x0, x1, y0, y1) range of object centres that counts as ``region``."""
    third = size / 3.0
    col, row = {"left": (0, 1), "right": (2, 1), "top": (1, 0),
                "bottom": (1, 2), "center": (1, 1)}[region]
    return (col * third, (col + 1) * third, row * third, (row + 1) * third)


def render(objects: Sequence[SceneObject], size: int, supersample: int = 1):
    """Paint objects in order (later ones on top); fill each object's visible mask."""
    canvas = np.empty((size, size, 3), dtype=np.uint8)
    canvas[:] = BACKGROUND
    owner = np.full((size, size), -1, dtype=np.int64)
    for i, obj in enumerate(objects):
        cov = shape_coverage(obj.shape, obj.cx, obj.cy, obj.half, size, size, supersample)
        inside = cov >= 0.5 if supersample > 1 else cov > 0
        owner[inside] = i
        canvas[inside] = PALETTE[obj.color]
    for i, obj in enumerate(objects):
        obj.mask = (owner == i).astype(np.uint8)
    return canvas, owner


def generate_scene(seed: int, size: int = 64, max_objects: int = 4) -> Scene:
    if size < 16:
        raise ValueError("image size must be at least 16")
    if not 1 <= max_objects <= 6:
        raise ValueError("max_objects must be in [1, 6]")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, max_objects + 1))
    objects = []
    for _ in range(n):
        region = REGIONS[rng.integers(len(REGIONS))]
        x0, x1, y0, y1 = region_box(region, size)
        sz = SIZES[rng.integers(len(SIZES))]
        lo, hi = SIZE_RANGE[sz]
        objects.append(SceneObject(
            shape=SHAPES[rng.integers(len(SHAPES))],
            color=COLORS[rng.integers(len(COLORS))],
            size=sz,
            region=region,
            cx=float(rng.uniform(x0, x1)),
            cy=float(rng.uniform(y0, y1)),
            half=float(rng.uniform(lo, hi) * size),
        ))
    canvas, _ = render(objects, size)
    return Scene(canvas=canvas, objects=objects)


# ---------------------------------------------------------------------------
# referring expressions

ATTRIBUTE_LADDER = (
    ("color", "shape"),
    ("color", "shape", "region"),
    ("size", "color", "shape"),
    ("size", "color", "shape", "region"),
)


def phrase(attrs: dict[str, str], keys: Sequence[str]) -> list[str]:
    words = ["the"]
    if "size" in keys:
        words.append(attrs["size"])
    words += [attrs["color"], attrs["shape"]]
    if "region" in keys:
        words += ["on", "the", attrs["region"]]
    return words


def minimal_description(target: int, objects: Sequence[SceneObject]) -> tuple[str, ...] | None:
    """First rung of the attribute ladder no other visible object also matches."""
    mine = objects[target].attrs()
    rivals = [o.attrs() for i, o in enumerate(objects) if i != target and o.mask.sum() > 0]
    for keys in ATTRIBUTE_LADDER:
        if not any(all(r[k] == mine[k] for k in keys) for r in rivals):
            return keys
    return None


def make_referring_sample(scene: Scene, rng_seed: int, vocab: Sequence[str] = TOKENS) -> Sample:
    """Pick a uniquely describable object and phrase it as a segmentation request."""
    rng = np.random.default_rng(rng_seed)
    candidates = []
    for i, obj in enumerate(scene.objects):
        if obj.mask.sum() < MIN_VISIBLE:
            continue
        keys = minimal_description(i, scene.objects)
        if keys is not None:
            candidates.append((i, keys))
    if not candidates:
        raise NoUniqueReferent("no object in the scene can be singled out")
    i, keys = candidates[rng.integers(len(candidates))]
    obj = scene.objects[i]
    words = ["please", "segment"] + phrase(obj.attrs(), keys)
    table = {t: k for k, t in enumerate(vocab)}
    return Sample(image=scene.canvas.copy(), expression_ids=[table[w] for w in words],
                  mask=obj.mask.copy(), answer_ids=[table[w] for w in SEG_ANSWER])


def make_counting_sample(scene: Scene) -> Sample:
    visible = sum(1 for o in scene.objects if o.mask.sum() > 0)
    question = ["how", "many", "objects", "are", "there", "?"]
    size = scene.canvas.shape[0]
    return Sample(image=scene.canvas.copy(), expression_ids=encode(question),
                  mask=np.zeros((size, size), dtype=np.uint8),
                  answer_ids=encode([COUNTS[visible - 1], "."]))


def generate_dataset(seed: int, n: int, size: int = 64, max_objects: int = 4,
                     vqa_fraction: float = 0.1) -> list[Sample]:
    """Deterministic corpus; scenes without a unique referent are skipped."""
    out: list[Sample] = []
    k = 0
    while len(out) < n:
        child = int(np.random.default_rng([seed, k]).integers(2 ** 62))
        k += 1
        scene = generate_scene(child, size, max_objects)
        pick = np.random.default_rng([seed, k, 1])
        if pick.random() < vqa_fraction and any(o.mask.sum() > 0 for o in scene.objects):
            out.append(make_counting_sample(scene))
            continue
        try:
            out.append(make_referring_sample(scene, child + 1))
        except NoUniqueReferent:
            continue
    return out


# ---------------------------------------------------------------------------
# on-disk format

def _write_pnm(path: Path, magic: bytes, arr: np.ndarray) -> None:
    h, w = arr.shape[:2]
    path.write_bytes(magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(arr, np.uint8).tobytes())


def _read_pnm(path: Path, magic: bytes, channels: int) -> np.ndarray:
    blob = path.read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while not blob[end:end + 1].isspace():
            end += 1
        fields.append(blob[pos:end])
        pos = end
    pos += 1
    if fields[0] != magic or int(fields[3]) != 255:
        raise FormatVersionMismatch(f"{path.name}: expected {magic.decode()} with maxval 255")
    w, h = int(fields[1]), int(fields[2])
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * channels, offset=pos)
    return data.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def write_ppm(path, image: np.ndarray) -> None:
    _write_pnm(Path(path), b"P6", image)


def read_ppm(path) -> np.ndarray:
    return _read_pnm(Path(path), b"P6", 3)


def write_pgm(path, mask: np.ndarray) -> None:
    _write_pnm(Path(path), b"P5", mask)


def read_pgm(path) -> np.ndarray:
    return _read_pnm(Path(path), b"P5", 1)


INDEX_HEADER = "id\timage\tmask\texpression\tanswer"


def write_dataset(samples: Sequence[Sample], directory, seed: int = 0,
                  image_size: int | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    size = image_size or (samples[0].image.shape[0] if samples else 64)
    lines = [INDEX_HEADER]
    for i, s in enumerate(samples):
        img_name, mask_name = f"{i:06d}.ppm", f"{i:06d}_mask.pgm"
        write_ppm(d / img_name, s.image)
        write_pgm(d / mask_name, (s.mask > 0).astype(np.uint8) * 255)
        lines.append("\t".join([str(i), img_name, mask_name,
                                " ".join(map(str, s.expression_ids)),
                                " ".join(map(str, s.answer_ids))]))
    meta = [f"format_version: {FORMAT_VERSION}", f"seed: {seed}", f"image_size: {size}",
            f"n_samples: {len(samples)}", f"vocab: {','.join(TOKENS)}"]
    (d / "meta.txt").write_text("\n".join(meta) + "\n")
    (d / "index.tsv").write_text("\n".join(lines) + "\n")
    return d


def read_meta(directory) -> dict[str, str]:
    path = Path(directory) / "meta.txt"
    meta = {}
    for line in path.read_text().splitlines():
        if line.strip():
            key, _, value = line.partition(":")
            meta[key.strip()] = value.strip()
    return meta


def read_dataset(directory) -> list[Sample]:
    d = Path(directory)
    meta = read_meta(d)
    if meta.get("format_version") != str(FORMAT_VERSION):
        raise FormatVersionMismatch(f"dataset format {meta.get('format_version')!r}, "
                                    f"expected {FORMAT_VERSION}")
    lines = (d / "index.tsv").read_text().splitlines()
    if not lines or lines[0] != INDEX_HEADER:
        raise FormatVersionMismatch("index.tsv: missing or unexpected header (line 1)")
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        cols = line.split("\t")
        if len(cols) != 5:
            raise FormatVersionMismatch(f"index.tsv line {lineno}: expected 5 columns, got {len(cols)}")
        try:
            expr = [int(t) for t in cols[3].split()]
            ans = [int(t) for t in cols[4].split()]
        except ValueError as exc:
            raise FormatVersionMismatch(f"index.tsv line {lineno}: {exc}") from None
        mask = read_pgm(d / cols[2])
        samples.append(Sample(image=read_ppm(d / cols[1]), expression_ids=expr,
                              mask=(mask > 0).astype(np.uint8), answer_ids=ans))
    if "n_samples" in meta and int(meta["n_samples"]) != len(samples):
        raise FormatVersionMismatch("meta n_samples disagrees with index.tsv")
    return samples


def directory_digest(directory, files: Iterable[str] | None = None) -> str:
    """SHA-256 over every file in the dataset directory, in sorted name order."""
    d = Path(directory)
    h = hashlib.sha256()
    names = sorted(files) if files is not None else sorted(p.name for p in d.iterdir() if p.is_file())
    for name in names:
        h.update(name.encode())
        h.update((d / name).read_bytes())
    return h.hexdigest()


def prompt_prefix_ids() -> list[int]:
    return encode(PROMPT_PREFIX)
