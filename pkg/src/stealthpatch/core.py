"""Domain types, patch state management, and scene corpus ingestion.

Pixel domain is float64 RGB in [0, 1] everywhere inside the library; file
I/O converts at the boundary (8- or 16-bit PNG, JPEG).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

# Physical print aspect of the patch, height:width.
DEFAULT_ASPECT = 43.0 / 29.0

BOX_TOL = 1e-6


class CorpusError(ValueError):
    """Raised when a scene corpus is missing, empty, or malformed."""


class ImageIOError(IOError):
    """Raised when an image file cannot be read or has the wrong format."""


# ---------------------------------------------------------------------------
# Deterministic RNG

class SeedableRng:
    """Seeded PCG64 stream; identical seed gives identical draws on any platform.

    Child streams are derived statelessly from (seed, *keys), so parallel and
    serial schedules that split by index produce the same numbers.
    """

    algorithm_id = "pcg64"

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, *keys: int) -> "SeedableRng":
        ss = np.random.SeedSequence(entropy=self.seed,
                                    spawn_key=tuple(int(k) for k in keys))
        return SeedableRng(int(ss.generate_state(1, dtype=np.uint64)[0]))

    def uniform(self, lo: float, hi: float, size=None):
        return self._gen.uniform(lo, hi, size=size)

    def random(self, size=None):
        return self._gen.random(size=size)

    def integers(self, lo: int, hi: int, size=None):
        return self._gen.integers(lo, hi, size=size)

    def seed_u64(self) -> int:
        """Draw one 64-bit seed for a derived field (noise, wrinkle, occluder)."""
        return int(self._gen.integers(0, 2**63))

    def shuffle(self, seq: list) -> list:
        out = list(seq)
        self._gen.shuffle(out)
        return out


# ---------------------------------------------------------------------------
# Domain types

@dataclass(frozen=True)
class PersonBox:
    """Normalized center-size box; label 0 is the person class."""

    cx: float
    cy: float
    w: float
    h: float
    label: int = 0

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"degenerate box size w={self.w} h={self.h}")
        for lo, hi, name in ((self.cx - self.w / 2, self.cx + self.w / 2, "x"),
                             (self.cy - self.h / 2, self.cy + self.h / 2, "y")):
            if lo < -BOX_TOL or hi > 1 + BOX_TOL:
                raise ValueError(f"box exceeds image bounds on {name}: [{lo}, {hi}]")


@dataclass
class Scene:
    """RGB image plus its annotated person boxes."""

    image: np.ndarray  # H x W x 3 float64 in [0, 1]
    person_boxes: list[PersonBox]
    id: str


@dataclass
class SceneSet:
    scenes: list[Scene]
    split_tag: str = "train"

    def __post_init__(self):
        ids = [s.id for s in self.scenes]
        if len(set(ids)) != len(ids):
            raise CorpusError("scene ids are not unique")

    def __len__(self):
        return len(self.scenes)

    def __iter__(self):
        return iter(self.scenes)


@dataclass
class Palette:
    """Set of printable RGB colors in [0,1]^3."""

    colors: np.ndarray  # N x 3 float64

    def __post_init__(self):
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if self.colors.shape[0] == 0:
            raise ValueError("palette is empty")
        if len({tuple(c) for c in self.colors.round(12)}) != len(self.colors):
            raise ValueError("palette contains duplicate colors")


@dataclass
class Patch:
    """The optimized pixel rectangle; the single mutable state of a run."""

    pixels: np.ndarray  # H x W x 3 float64 in [0, 1]
    aspect_hint: float = DEFAULT_ASPECT

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"patch must be HxWx3, got {self.pixels.shape}")
        if self.pixels.shape[0] < 2 or self.pixels.shape[1] < 2:
            raise ValueError(f"patch must be at least 2x2, got {self.pixels.shape[:2]}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


# Patch initialization specs ------------------------------------------------

@dataclass(frozen=True)
class Random:
    seed: int


@dataclass(frozen=True)
class Constant:
    rgb: tuple[float, float, float]


@dataclass(frozen=True)
class FromImage:
    path: str


InitSpec = Random | Constant | FromImage


# ---------------------------------------------------------------------------
# Image file I/O (cv2; BGR on disk, RGB in memory)

def load_image(path: str | Path) -> np.ndarray:
    """Read a PNG/JPEG into an H x W x 3 float64 RGB array in [0, 1]."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageIOError(f"cannot read image file: {path}")
    if raw.ndim == 3 and raw.shape[2] == 4:
        raw = raw[:, :, :3]  # drop alpha
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise ImageIOError(f"not an RGB image: {path} (shape {raw.shape})")
    if raw.dtype == np.uint8:
        img = raw.astype(np.float64) / 255.0
    elif raw.dtype == np.uint16:
        img = raw.astype(np.float64) / 65535.0
    else:
        raise ImageIOError(f"unsupported pixel depth {raw.dtype}: {path}")
    return img[:, :, ::-1].copy()  # BGR -> RGB


def save_image(path: str | Path, pixels: np.ndarray, depth: int = 8) -> None:
    """Write an RGB [0,1] array as an 8- or 16-bit image file."""
    pix = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    if depth == 16:
        data = np.round(pix * 65535.0).astype(np.uint16)
    elif depth == 8:
        data = np.round(pix * 255.0).astype(np.uint8)
    else:
        raise ValueError(f"depth must be 8 or 16, got {depth}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), data[:, :, ::-1]):
        raise ImageIOError(f"cannot write image file: {path}")


def bilinear_resample(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resample H x W x C with bilinear interpolation, half-pixel centers,
    clamped (replicated) borders."""
    img = np.asarray(img, dtype=np.float64)
    in_h, in_w = img.shape[:2]
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 1)
    y1 = np.clip(y0 + 1, 0, in_h - 1)
    x1 = np.clip(x0 + 1, 0, in_w - 1)
    fy = np.clip(ys - np.floor(ys), 0.0, 1.0)
    fx = np.clip(xs - np.floor(xs), 0.0, 1.0)
    fy = np.where(ys < 0, 0.0, np.where(ys > in_h - 1, 1.0, fy))[:, None, None]
    fx = np.where(xs < 0, 0.0, np.where(xs > in_w - 1, 1.0, fx))[None, :, None]
    a = img[y0][:, x0] * (1 - fy) * (1 - fx)
    b = img[y0][:, x1] * (1 - fy) * fx
    c = img[y1][:, x0] * fy * (1 - fx)
    d = img[y1][:, x1] * fy * fx
    return a + b + c + d


# ---------------------------------------------------------------------------
# Operations

def new_patch(height_px: int, width_px: int, init: InitSpec,
              aspect_hint: float = DEFAULT_ASPECT) -> Patch:
    """Create a patch of the requested pixel size from an init spec."""
    if height_px <= 0 or width_px <= 0:
        raise ValueError(f"patch size must be positive, got {height_px}x{width_px}")
    if isinstance(init, Random):
        pixels = SeedableRng(init.seed).random((height_px, width_px, 3))
    elif isinstance(init, Constant):
        rgb = np.asarray(init.rgb, dtype=np.float64)
        if rgb.shape != (3,) or rgb.min() < 0 or rgb.max() > 1:
            raise ValueError(f"constant fill must be an RGB triple in [0,1], got {init.rgb}")
        pixels = np.broadcast_to(rgb, (height_px, width_px, 3)).copy()
    elif isinstance(init, FromImage):
        pixels = bilinear_resample(load_image(init.path), height_px, width_px)
    else:
        raise TypeError(f"unknown init spec: {init!r}")
    return Patch(np.clip(pixels, 0.0, 1.0), aspect_hint=aspect_hint)


def clamp_unit(patch: Patch) -> Patch:
    """Project every pixel component back into [0, 1]; idempotent."""
    return Patch(np.clip(patch.pixels, 0.0, 1.0), aspect_hint=patch.aspect_hint)


_IMAGE_EXTS = (".png", ".jpg", ".jpeg")


def _parse_annotation_file(path: Path, scene_id: str) -> list[PersonBox]:
    boxes = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise CorpusError(
                f"{path}:{lineno}: expected '<class_id> <cx> <cy> <w> <h>', got {line!r}")
        try:
            label = int(parts[0])
            cx, cy, w, h = (float(v) for v in parts[1:])
        except ValueError as exc:
            raise CorpusError(f"{path}:{lineno}: non-numeric field ({exc})") from None
        try:
            boxes.append(PersonBox(cx=cx, cy=cy, w=w, h=h, label=label))
        except ValueError as exc:
            raise CorpusError(f"{path}:{lineno}: {exc}") from None
    return boxes


def load_scene_set(root_path: str | Path, split_tag: str) -> SceneSet:
    """Ingest an image+annotation corpus.

    Layout: <root>/images/*.png|jpg and <root>/annotations/<same stem>.txt,
    one "<class_id> <cx> <cy> <w> <h>" line per box (normalized floats).
    Images without an annotation file get an empty box list.
    """
    root = Path(root_path)
    img_dir = root / "images"
    ann_dir = root / "annotations"
    if not img_dir.is_dir():
        raise CorpusError(f"missing images directory: {img_dir}")
    files = sorted(p for p in img_dir.iterdir()
                   if p.suffix.lower() in _IMAGE_EXTS)
    if not files:
        raise CorpusError(f"empty corpus: no image files under {img_dir}")
    scenes = []
    for img_path in files:
        scene_id = img_path.stem
        image = load_image(img_path)
        ann_path = ann_dir / (scene_id + ".txt")
        boxes = _parse_annotation_file(ann_path, scene_id) if ann_path.is_file() else []
        scenes.append(Scene(image=image, person_boxes=boxes, id=scene_id))
    scenes.sort(key=lambda s: s.id)
    return SceneSet(scenes=scenes, split_tag=split_tag)


# ---------------------------------------------------------------------------
# Patch checkpoints: 16-bit PNG + JSON sidecar

def save_patch_checkpoint(patch: Patch, base_path: str | Path, meta: dict) -> None:
    """Write <base>.png (16-bit) and <base>.meta.json."""
    base = Path(base_path)
    save_image(base.with_suffix(".png"), patch.pixels, depth=16)
    sidecar = dict(meta)
    sidecar["aspect_hint"] = patch.aspect_hint
    base.with_suffix(".meta.json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_patch_checkpoint(base_path: str | Path) -> tuple[Patch, dict]:
    base = Path(base_path)
    if base.suffix == ".png":
        base = base.with_suffix("")
    meta_path = base.with_suffix(".meta.json")
    if not meta_path.is_file():
        raise ImageIOError(f"missing checkpoint sidecar: {meta_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    pixels = load_image(base.with_suffix(".png"))
    return Patch(pixels, aspect_hint=float(meta.get("aspect_hint", DEFAULT_ASPECT))), meta
