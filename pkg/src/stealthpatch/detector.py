"""Uniform differentiable interface to grid-based detectors.

A detector adapter is anything with a ``descriptor`` attribute and a
``forward(image) -> RawGridOutput`` method that is deterministic and lets
gradients flow from any scalar of the raw output back to the input pixels.
The bundled toy detector (a small convnet with versioned fixture weights)
satisfies the contract at desk scale; real backends plug in behind the same
surface and handle their own weight loading.
"""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64

SCORE_MODES = ("product", "class_only", "obj_only")


@dataclass(frozen=True)
class DetectorDescriptor:
    grid_size: int                 # S
    boxes_per_cell: int            # B
    num_classes: int               # C
    input_size: int                # square input edge, pixels
    person_class_index: int = 0
    anchors: tuple[tuple[float, float], ...] = ((1.0, 1.0),)  # (w, h) in cell units

    def __post_init__(self):
        if len(self.anchors) != self.boxes_per_cell:
            raise ValueError("need one anchor (w, h) pair per box slot")


@dataclass
class RawGridOutput:
    """S x S x B x (5+C) tensor: tx, ty, tw, th, objectness logit, class logits."""

    tensor: torch.Tensor
    descriptor: DetectorDescriptor


@dataclass
class DetectionGrid:
    """Decoded grid: normalized geometry, objectness probability, class distribution."""

    boxes: torch.Tensor        # S x S x B x 4 (cx, cy, w, h)
    objectness: torch.Tensor   # S x S x B
    class_probs: torch.Tensor  # S x S x B x C
    descriptor: DetectorDescriptor


@dataclass(frozen=True)
class Detection:
    cx: float
    cy: float
    w: float
    h: float
    score: float
    class_index: int


def _as_image_tensor(image) -> torch.Tensor:
    if isinstance(image, torch.Tensor):
        return image.to(DTYPE)
    return torch.as_tensor(np.asarray(image), dtype=DTYPE)


def decode_grid(raw: RawGridOutput, descriptor: DetectorDescriptor | None = None) -> DetectionGrid:
    """Decode raw logits into probabilities and normalized box geometry.

    Objectness and center offsets go through the logistic, class logits through
    softmax, sizes through exponential anchor scaling. Differentiable end to end.
    """
    desc = descriptor or raw.descriptor
    t = raw.tensor
    s, b, c = desc.grid_size, desc.boxes_per_cell, desc.num_classes
    if tuple(t.shape) != (s, s, b, 5 + c):
        raise ValueError(f"raw output shape {tuple(t.shape)} does not match "
                         f"descriptor ({s}, {s}, {b}, {5 + c})")
    if not torch.isfinite(t).all():
        raise ValueError("raw detector output contains non-finite values")

    cols = torch.arange(s, dtype=t.dtype).view(1, s, 1)
    rows = torch.arange(s, dtype=t.dtype).view(s, 1, 1)
    anchors = torch.as_tensor(desc.anchors, dtype=t.dtype)  # B x 2

    cx = (cols + torch.sigmoid(t[..., 0])) / s
    cy = (rows + torch.sigmoid(t[..., 1])) / s
    w = anchors[:, 0] * torch.exp(t[..., 2]) / s
    h = anchors[:, 1] * torch.exp(t[..., 3]) / s
    objectness = torch.sigmoid(t[..., 4])
    class_probs = torch.softmax(t[..., 5:], dim=-1)
    return DetectionGrid(boxes=torch.stack([cx, cy, w, h], dim=-1),
                         objectness=objectness, class_probs=class_probs,
                         descriptor=desc)


def box_scores(grid: DetectionGrid, class_index: int, mode: str = "product") -> torch.Tensor:
    """Per-box confidence for one class under the configured score mode."""
    if mode == "product":
        return grid.objectness * grid.class_probs[..., class_index]
    if mode == "class_only":
        return grid.class_probs[..., class_index]
    if mode == "obj_only":
        return grid.objectness
    raise ValueError(f"score_mode must be one of {SCORE_MODES}, got {mode!r}")


def extract_person_score(grid: DetectionGrid, person_class_index: int,
                         score_mode: str = "product") -> torch.Tensor:
    """Maximum person confidence over every box in the grid (differentiable)."""
    if not 0 <= person_class_index < grid.descriptor.num_classes:
        raise ValueError(f"person_class_index {person_class_index} out of range "
                         f"for C={grid.descriptor.num_classes}")
    return box_scores(grid, person_class_index, score_mode).max()


def _iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def detect_objects(grid: DetectionGrid, score_threshold: float, nms_iou: float,
                   score_mode: str = "product") -> list[Detection]:
    """Threshold + greedy per-class NMS over the whole grid, all classes."""
    if not 0 < score_threshold < 1:
        raise ValueError(f"score_threshold must be in (0,1), got {score_threshold}")
    if not 0 < nms_iou < 1:
        raise ValueError(f"nms_iou must be in (0,1), got {nms_iou}")
    if score_mode not in SCORE_MODES:
        raise ValueError(f"score_mode must be one of {SCORE_MODES}, got {score_mode!r}")
    boxes = grid.boxes.detach().cpu().numpy().reshape(-1, 4)
    p_obj = grid.objectness.detach().cpu().numpy().reshape(-1)
    probs = grid.class_probs.detach().cpu().numpy().reshape(-1, grid.descriptor.num_classes)
    cls = probs.argmax(axis=1)
    best_prob = probs[np.arange(len(p_obj)), cls]
    if score_mode == "product":
        score = p_obj * best_prob
    elif score_mode == "class_only":
        score = best_prob
    else:
        score = p_obj

    keep = score >= score_threshold
    cands = [Detection(cx=float(boxes[i, 0]), cy=float(boxes[i, 1]),
                       w=float(boxes[i, 2]), h=float(boxes[i, 3]),
                       score=float(score[i]), class_index=int(cls[i]))
             for i in np.flatnonzero(keep)]
    # canonical order makes the result independent of grid traversal order
    cands.sort(key=lambda d: (-d.score, d.cx, d.cy, d.w, d.h, d.class_index))

    out: list[Detection] = []
    for det in cands:
        suppressed = any(k.class_index == det.class_index and
                         _iou((det.cx, det.cy, det.w, det.h),
                              (k.cx, k.cy, k.w, k.h)) >= nms_iou
                         for k in out)
        if not suppressed:
            out.append(det)
    return out


def detect_persons(grid: DetectionGrid, score_threshold: float, nms_iou: float,
                   person_class_index: int | None = None,
                   score_mode: str = "product") -> list[Detection]:
    """Post-NMS detections whose winning class is the person class."""
    idx = (grid.descriptor.person_class_index
           if person_class_index is None else person_class_index)
    return [d for d in detect_objects(grid, score_threshold, nms_iou, score_mode)
            if d.class_index == idx]


# ---------------------------------------------------------------------------
# Toy detector fixture

TOY_FIXTURE_VERSION = "toy_detector_v1"

# conv stack: (out_channels, stride); the last layer emits B*(5+C) maps
TOY_LAYERS = ((16, 2), (32, 2), (32, 2), (None, 2))


class ToyDetector:
    """4-layer convnet over 64x64 RGB; S=4, B=1, C=3, person is class 0.

    Weights come from a versioned fixture archive; the forward pass is pure
    torch ops, so it is deterministic and differentiable.
    """

    def __init__(self, descriptor: DetectorDescriptor, weights: dict[str, torch.Tensor]):
        self.descriptor = descriptor
        self.weights = weights

    def forward(self, image) -> RawGridOutput:
        img = _as_image_tensor(image)
        size = self.descriptor.input_size
        if img.shape != (size, size, 3):
            raise ValueError(f"toy detector expects {size}x{size}x3 input, "
                             f"got {tuple(img.shape)}")
        x = img.permute(2, 0, 1).unsqueeze(0)
        n_layers = len(TOY_LAYERS)
        for i in range(n_layers):
            x = F.conv2d(x, self.weights[f"conv{i}.weight"],
                         self.weights[f"conv{i}.bias"], stride=TOY_LAYERS[i][1], padding=1)
            if i < n_layers - 1:
                x = F.relu(x)
        s = self.descriptor.grid_size
        b = self.descriptor.boxes_per_cell
        c = self.descriptor.num_classes
        # (1, B*(5+C), S, S) -> (S, S, B, 5+C)
        raw = x.squeeze(0).permute(1, 2, 0).reshape(s, s, b, 5 + c)
        return RawGridOutput(tensor=raw, descriptor=self.descriptor)


def _fixture_dir() -> Path:
    return Path(str(resources.files("stealthpatch") / "fixtures"))


def load_toy_detector(fixture_path: str | Path | None = None) -> ToyDetector:
    """Load the bundled toy detector (or one regenerated elsewhere)."""
    base = Path(fixture_path) if fixture_path else _fixture_dir() / TOY_FIXTURE_VERSION
    npz_path = base.with_suffix(".npz")
    json_path = base.with_suffix(".json")
    if not npz_path.is_file() or not json_path.is_file():
        raise FileNotFoundError(
            f"toy detector fixture missing: {npz_path} / {json_path} "
            f"(regenerate with scripts/pretrain_toy_detector.py)")
    meta = json.loads(json_path.read_text(encoding="utf-8"))
    desc = DetectorDescriptor(
        grid_size=meta["grid_size"], boxes_per_cell=meta["boxes_per_cell"],
        num_classes=meta["num_classes"], input_size=meta["input_size"],
        person_class_index=meta["person_class_index"],
        anchors=tuple(tuple(a) for a in meta["anchors"]))
    with np.load(npz_path) as arch:
        weights = {k: torch.as_tensor(arch[k], dtype=DTYPE) for k in arch.files}
    return ToyDetector(desc, weights)


@functools.lru_cache(maxsize=1)
def _default_toy() -> ToyDetector:
    return load_toy_detector()


def toy_detector_forward(image) -> RawGridOutput:
    """Forward through the default bundled toy detector fixture."""
    return _default_toy().forward(image)
