"""Procedural shape scenes paired with long multi-sentence captions."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor

COLORS: dict[str, tuple[int, int, int]] = {
    "red": (220, 30, 30),
    "green": (30, 170, 60),
    "blue": (40, 70, 220),
    "yellow": (240, 220, 40),
    "cyan": (40, 210, 220),
    "magenta": (210, 40, 200),
    "white": (245, 245, 245),
    "black": (15, 15, 15),
    "orange": (245, 140, 20),
    "purple": (120, 50, 170),
    "gray": (128, 128, 128),
}
SHAPES = ("circle", "square", "triangle")
SIZES = ("small", "large")
QUADRANTS = ("upper left", "upper right", "lower left", "lower right")
VERBS = ("sits", "rests", "appears", "lies")


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    quadrant: str
    center: tuple[int, int]   # (row, col) pixel
    radius: int


@dataclass(frozen=True)
class Scene:
    background: str
    objects: tuple[SceneObject, ...]
    seed: int
    verbs: tuple[str, ...] = ()


@dataclass(frozen=True)
class DatasetSpec:
    count: int = 512
    image_size: int = 32
    seed: int = 0
    vocabulary: str | None = None
    output_dir: str | None = None


@dataclass
class Dataset:
    images: np.ndarray            # uint8, (N, H, W, 3)
    captions: list[str]
    seeds: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.captions)

    def float_images(self) -> np.ndarray:
        return self.images.astype(np.float64) / 255.0


def sample_seed(base_seed: int, index: int, split: int = 0) -> int:
    return int(np.random.SeedSequence([base_seed, split, index]).generate_state(1, np.uint64)[0])


def make_scene(seed: int, image_size: int) -> Scene:
    if image_size < 8 or image_size % 2:
        raise ValueError("image_size must be an even number >= 8")
    rng = np.random.default_rng(seed)
    background = str(rng.choice(list(COLORS)))
    n_obj = int(rng.integers(1, 4))
    quadrants = rng.permutation(len(QUADRANTS))[:n_obj]
    half = image_size // 2
    objects = []
    verbs = []
    for qi in sorted(int(q) for q in quadrants):
        color = str(rng.choice([c for c in COLORS if c != background]))
        shape = str(rng.choice(SHAPES))
        size = str(rng.choice(SIZES))
        verbs.append(str(rng.choice(VERBS)))
        row0 = 0 if QUADRANTS[qi].startswith("upper") else half
        col0 = 0 if QUADRANTS[qi].endswith("left") else half
        jitter = half // 16
        cy = row0 + half // 2 + int(rng.integers(-jitter, jitter + 1))
        cx = col0 + half // 2 + int(rng.integers(-jitter, jitter + 1))
        radius = max(1, int(round(half * (0.2 if size == "small" else 0.35))))
        objects.append(SceneObject(shape, color, size, QUADRANTS[qi], (cy, cx), radius))
    return Scene(background, tuple(objects), seed, tuple(verbs))


def _mask(obj: SceneObject, size: int) -> np.ndarray:
    rows, cols = np.mgrid[0:size, 0:size]
    dy = rows - obj.center[0]
    dx = cols - obj.center[1]
    r = obj.radius
    if obj.shape == "circle":
        return dx * dx + dy * dy <= r * r
    if obj.shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    # apex-up isosceles triangle spanning rows center-r .. center+r
    return (dy >= -r) & (dy <= r) & (2 * np.abs(dx) <= dy + r)


def render(scene: Scene, image_size: int) -> np.ndarray:
    """Hard-edged raster, uint8 (H, W, 3)."""
    img = np.empty((image_size, image_size, 3), dtype=np.uint8)
    img[:] = COLORS[scene.background]
    for obj in scene.objects:
        img[_mask(obj, image_size)] = COLORS[obj.color]
    return img


def caption(scene: Scene) -> str:
    sentences = []
    for obj, verb in zip(scene.objects, scene.verbs):
        sentences.append(f"A {obj.size} {obj.color} {obj.shape} {verb} in the {obj.quadrant}.")
    sentences.append(f"The background is a plain {scene.background} color.")
    return " ".join(sentences)


def gen_sample(seed: int, spec: DatasetSpec) -> tuple[Tensor, str]:
    scene = make_scene(seed, spec.image_size)
    return Tensor(render(scene, spec.image_size) / 255.0), caption(scene)


def generate(spec: DatasetSpec, split: int = 0) -> Dataset:
    seeds = [sample_seed(spec.seed, i, split) for i in range(spec.count)]
    scenes = [make_scene(s, spec.image_size) for s in seeds]
    images = np.stack([render(sc, spec.image_size) for sc in scenes]) if scenes else \
        np.zeros((0, spec.image_size, spec.image_size, 3), dtype=np.uint8)
    return Dataset(images=images, captions=[caption(sc) for sc in scenes], seeds=seeds)


# --------------------------------------------------------------------------
# files: NNN.ppm (binary P6), NNN.txt, index.tsv


def write_ppm(path: Path, img: np.ndarray) -> None:
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6 {w} {h} 255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_ppm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(fields[1]), int(fields[2])
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return data.reshape(h, w, 3).copy()


def _stem_width(count: int) -> int:
    return max(3, len(str(max(count - 1, 0))))


def export(dataset: Dataset, directory: str | Path) -> Path:
    out = Path(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise PermissionError(f"dataset directory {out} is not writable")
    width = _stem_width(len(dataset))
    lines = []
    for i, (img, cap) in enumerate(zip(dataset.images, dataset.captions)):
        stem = f"{i:0{width}d}"
        write_ppm(out / f"{stem}.ppm", img)
        (out / f"{stem}.txt").write_text(cap, encoding="utf-8")
        lines.append(f"{stem}\t{stem}.ppm\t{stem}.txt\n")
    (out / "index.tsv").write_text("".join(lines), encoding="utf-8")
    return out


def load(directory: str | Path) -> Dataset:
    root = Path(directory)
    images, captions = [], []
    for line in (root / "index.tsv").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        _, img_name, cap_name = line.split("\t")
        images.append(read_ppm(root / img_name))
        captions.append((root / cap_name).read_text(encoding="utf-8"))
    if not images:
        raise ValueError(f"{root}: empty dataset index")
    return Dataset(images=np.stack(images), captions=captions)
