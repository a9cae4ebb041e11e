"""Attack-success metrics: the digital repetition protocol, photo/frame
batches keyed by capture condition, and exploration sweeps over patch inits.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import (CorpusError, InitSpec, Patch, PersonBox, Scene, SceneSet,
                   SeedableRng, bilinear_resample, load_image, new_patch)
from .detector import Detection, _iou, decode_grid, detect_objects, detect_persons
from .losses import default_palette
from .trainer import TrainConfig, train
from .transforms import DTYPE, EotConfig, batch_apply, resize_bilinear

logger = logging.getLogger(__name__)


@dataclass
class EvalConfig:
    score_threshold: float = 0.5
    nms_iou: float = 0.4
    match_iou: float = 0.5
    repetitions: int = 10
    seed: int = 0
    score_mode: str = "product"
    eot: EotConfig = field(default_factory=lambda: default_eval_eot())

    def to_dict(self):
        return {"score_threshold": self.score_threshold, "nms_iou": self.nms_iou,
                "match_iou": self.match_iou, "repetitions": self.repetitions,
                "seed": self.seed, "score_mode": self.score_mode,
                "eot": self.eot.to_dict()}


def default_eval_eot() -> EotConfig:
    """Paste-time transforms for the digital protocol: scale and in-plane
    rotation only, training placement ranges."""
    return EotConfig(enable_brightness=False, enable_contrast=False,
                     enable_noise=False, enable_wrinkle=False, enable_radian=False,
                     enable_angle=False, enable_occlusion=False)


@dataclass
class EvalOutcome:
    n_all: int
    n_undetected: int
    per_scene: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not 0 <= self.n_undetected <= self.n_all:
            raise ValueError(f"need 0 <= n_undetected <= n_all, got "
                             f"{self.n_undetected}/{self.n_all}")

    def to_dict(self):
        return {"n_all": self.n_all, "n_undetected": self.n_undetected,
                "per_scene": self.per_scene}


@dataclass(frozen=True)
class ConditionKey:
    scene_tag: str
    distance_tag: str
    angle_tag: str

    def label(self) -> str:
        return f"{self.scene_tag}/{self.distance_tag}/{self.angle_tag}"


def attack_success_rate(outcome: EvalOutcome) -> float:
    """Percentage of ground-truth persons left undetected."""
    if outcome.n_all < 1:
        raise ValueError("attack_success_rate undefined for n_all = 0")
    return 100.0 * outcome.n_undetected / outcome.n_all


# ---------------------------------------------------------------------------
# Digital protocol

@dataclass
class DigitalReport:
    n_all: int
    outcomes: list[EvalOutcome]
    rs_values: list[float]
    rs_mean: float
    rs_min: float
    rs_max: float
    config: dict

    def to_json_dict(self):
        return {"kind": "digital", "n_all": self.n_all,
                "outcomes": [o.to_dict() for o in self.outcomes],
                "rs_values": self.rs_values, "rs_mean": self.rs_mean,
                "rs_min": self.rs_min, "rs_max": self.rs_max, "config": self.config}


def _forward_image(detector, image: np.ndarray | torch.Tensor):
    size = detector.descriptor.input_size
    if isinstance(image, torch.Tensor):
        if image.shape[0] != size or image.shape[1] != size:
            image = resize_bilinear(image, size, size)
        return decode_grid(detector.forward(image))
    image = np.asarray(image, dtype=np.float64)
    if image.shape[0] != size or image.shape[1] != size:
        image = bilinear_resample(image, size, size)
    return decode_grid(detector.forward(image))


def _detection_to_box(det: Detection) -> PersonBox | None:
    x0 = max(det.cx - det.w / 2, 0.0)
    x1 = min(det.cx + det.w / 2, 1.0)
    y0 = max(det.cy - det.h / 2, 0.0)
    y1 = min(det.cy + det.h / 2, 1.0)
    if x1 - x0 < 1e-3 or y1 - y0 < 1e-3:
        return None
    return PersonBox(cx=(x0 + x1) / 2, cy=(y0 + y1) / 2,
                     w=x1 - x0, h=y1 - y0, label=0)


def digital_eval(patch: Patch | None, test_set: SceneSet, detector,
                 cfg: EvalConfig | None = None,
                 repetitions: int | None = None) -> DigitalReport:
    """Paste the patch on every baseline-detected person and re-detect.

    The no-patch pass defines the person count N_all; each repetition redraws
    the paste transforms from a derived seed. A baseline person counts as
    still detected when some post-NMS person detection overlaps its baseline
    box with IoU >= match_iou. ``patch=None`` runs the no-op control.
    """
    cfg = cfg or EvalConfig()
    reps = repetitions if repetitions is not None else cfg.repetitions
    if reps < 1:
        raise ValueError(f"repetitions must be >= 1, got {reps}")
    if len(test_set.scenes) == 0:
        raise CorpusError("empty test set")

    baselines: list[tuple[Scene, list[Detection]]] = []
    for scene in test_set:
        grid = _forward_image(detector, scene.image)
        dets = detect_persons(grid, cfg.score_threshold, cfg.nms_iou,
                              score_mode=cfg.score_mode)
        baselines.append((scene, dets))
    n_all = sum(len(d) for _, d in baselines)
    if n_all == 0:
        raise CorpusError("baseline pass detects no persons; N_all would be 0")

    paste_scenes = []
    for scene, dets in baselines:
        boxes = [b for b in (_detection_to_box(d) for d in dets) if b is not None]
        paste_scenes.append(Scene(image=scene.image, person_boxes=boxes, id=scene.id))
    paste_set = SceneSet(paste_scenes, split_tag=test_set.split_tag)

    outcomes = []
    for rep in range(reps):
        rng = SeedableRng(cfg.seed).child(100 + rep)
        if patch is None:
            images = [torch.as_tensor(s.image, dtype=DTYPE) for s in paste_set]
        else:
            images = batch_apply(paste_set, patch, cfg.eot, rng).images
        n_undet = 0
        per_scene = []
        for (scene, dets), img in zip(baselines, images):
            if not dets:
                continue
            grid = _forward_image(detector, img)
            after = detect_persons(grid, cfg.score_threshold, cfg.nms_iou,
                                   score_mode=cfg.score_mode)
            matched = sum(
                1 for d in dets
                if any(_iou((d.cx, d.cy, d.w, d.h), (a.cx, a.cy, a.w, a.h))
                       >= cfg.match_iou for a in after))
            n_undet += len(dets) - matched
            per_scene.append({"scene_id": scene.id, "baseline": len(dets),
                              "matched": matched})
        outcomes.append(EvalOutcome(n_all=n_all, n_undetected=n_undet,
                                    per_scene=per_scene))

    rs = [attack_success_rate(o) for o in outcomes]
    return DigitalReport(n_all=n_all, outcomes=outcomes, rs_values=rs,
                         rs_mean=float(np.mean(rs)), rs_min=min(rs), rs_max=max(rs),
                         config=cfg.to_dict())


# ---------------------------------------------------------------------------
# Photo / frame batches

@dataclass
class PhotoReport:
    rows: list[tuple[ConditionKey, EvalOutcome]]
    total: EvalOutcome
    config: dict

    def to_json_dict(self):
        return {"kind": "photos",
                "rows": [{"condition": key.label(), **outcome.to_dict(),
                          "rs_percent": attack_success_rate(outcome)}
                         for key, outcome in self.rows],
                "total": self.total.to_dict(),
                "rs_percent": attack_success_rate(self.total),
                "config": self.config}


_PHOTO_EXTS = (".png", ".jpg", ".jpeg")


def photo_eval(image_root: str | Path, detector, cfg: EvalConfig | None = None) -> PhotoReport:
    """Score already-captured photos or pre-extracted video frames.

    Layout: <root>/<scene_tag>/<distance_tag>/<angle_tag>/*.jpg|png with an
    optional meta.json per angle directory declaring persons_per_image (k,
    default 1). No boxes are needed: an image's persons count as detected up
    to the number of post-NMS person detections found in it.
    """
    cfg = cfg or EvalConfig()
    root = Path(image_root)
    if not root.is_dir():
        raise CorpusError(f"missing photo root: {root}")
    rows = []
    for scene_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for dist_dir in sorted(p for p in scene_dir.iterdir() if p.is_dir()):
            for angle_dir in sorted(p for p in dist_dir.iterdir() if p.is_dir()):
                key = ConditionKey(scene_tag=scene_dir.name,
                                   distance_tag=dist_dir.name,
                                   angle_tag=angle_dir.name)
                rows.append((key, _eval_condition(angle_dir, detector, cfg)))
    if not rows:
        raise CorpusError(f"no <scene>/<distance>/<angle> conditions under {root}")
    total = EvalOutcome(n_all=sum(o.n_all for _, o in rows),
                        n_undetected=sum(o.n_undetected for _, o in rows))
    return PhotoReport(rows=rows, total=total, config=cfg.to_dict())


def _eval_condition(angle_dir: Path, detector, cfg: EvalConfig) -> EvalOutcome:
    k = 1
    meta_path = angle_dir / "meta.json"
    if meta_path.is_file():
        k = int(json.loads(meta_path.read_text(encoding="utf-8"))
                .get("persons_per_image", 1))
    files = sorted(p for p in angle_dir.iterdir()
                   if p.suffix.lower() in _PHOTO_EXTS)
    n_images = 0
    n_undetected = 0
    per_scene = []
    for path in files:
        try:
            image = load_image(path)
        except Exception as exc:
            logger.warning("skipping undecodable image %s: %s", path, exc)
            continue
        n_images += 1
        dets = detect_persons(_forward_image(detector, image),
                              cfg.score_threshold, cfg.nms_iou,
                              score_mode=cfg.score_mode)
        detected = min(k, len(dets))
        n_undetected += k - detected
        per_scene.append({"scene_id": path.stem, "detections": len(dets),
                          "matches": detected})
    if n_images == 0:
        raise CorpusError(f"empty condition directory: {angle_dir}")
    return EvalOutcome(n_all=k * n_images, n_undetected=n_undetected,
                       per_scene=per_scene)


# ---------------------------------------------------------------------------
# Exploration sweeps

@dataclass(frozen=True)
class SweepEntry:
    name: str
    init: InitSpec
    color_tag: str = ""
    shape_tag: str = ""


@dataclass
class SweepSpec:
    entries: list[SweepEntry]
    patch_height: int = 300
    patch_width: int = 200

    def __post_init__(self):
        if not self.entries:
            raise ValueError("sweep spec needs at least one entry")
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("sweep entry names must be unique")


@dataclass
class SweepRow:
    name: str
    color_tag: str
    shape_tag: str
    rs_mean: float
    rs_min: float
    rs_max: float
    detected_as: dict[int, int]
    report: DigitalReport | None = None
    error: str | None = None

    def to_json_dict(self):
        d = {"name": self.name, "color_tag": self.color_tag,
             "shape_tag": self.shape_tag, "rs_mean": self.rs_mean,
             "rs_min": self.rs_min, "rs_max": self.rs_max,
             "detected_as": {str(k): v for k, v in self.detected_as.items()},
             "error": self.error}
        if self.report is not None:
            d["report"] = self.report.to_json_dict()
        return d


@dataclass
class SweepReport:
    rows: list[SweepRow]

    def to_json_dict(self):
        return {"kind": "sweep", "rows": [r.to_json_dict() for r in self.rows]}


def patch_class_histogram(patch: Patch, detector, cfg: EvalConfig,
                          canvas_fill: float = 0.5) -> dict[int, int]:
    """What the detector sees in a patch-only canvas (post-NMS class counts)."""
    size = detector.descriptor.input_size
    target_h = int(size * 0.7)
    target_w = max(int(round(target_h / patch.aspect_hint)), 1)
    resized = bilinear_resample(patch.pixels, target_h, target_w)
    canvas = np.full((size, size, 3), canvas_fill, dtype=np.float64)
    r0 = (size - target_h) // 2
    c0 = (size - target_w) // 2
    canvas[r0:r0 + target_h, c0:c0 + target_w] = resized
    dets = detect_objects(_forward_image(detector, canvas),
                          cfg.score_threshold, cfg.nms_iou,
                          score_mode=cfg.score_mode)
    hist: dict[int, int] = {}
    for d in dets:
        hist[d.class_index] = hist.get(d.class_index, 0) + 1
    return hist


def sweep(spec: SweepSpec, train_set: SceneSet, test_set: SceneSet, detector,
          train_cfg: TrainConfig, eval_cfg: EvalConfig | None = None,
          palette=None) -> SweepReport:
    """Train one patch per entry under a shared config and rank by mean R_s.

    Entry failures are recorded and the sweep continues.
    """
    eval_cfg = eval_cfg or EvalConfig()
    palette = palette or default_palette()
    rows = []
    for entry in spec.entries:
        try:
            init = new_patch(spec.patch_height, spec.patch_width, entry.init)
            patch, _history = train(init, train_set, detector, train_cfg, palette)
            report = digital_eval(patch, test_set, detector, eval_cfg)
            hist = patch_class_histogram(patch, detector, eval_cfg)
            rows.append(SweepRow(name=entry.name, color_tag=entry.color_tag,
                                 shape_tag=entry.shape_tag, rs_mean=report.rs_mean,
                                 rs_min=report.rs_min, rs_max=report.rs_max,
                                 detected_as=hist, report=report))
        except Exception as exc:
            logger.warning("sweep entry %s failed: %s", entry.name, exc)
            rows.append(SweepRow(name=entry.name, color_tag=entry.color_tag,
                                 shape_tag=entry.shape_tag, rs_mean=float("nan"),
                                 rs_min=float("nan"), rs_max=float("nan"),
                                 detected_as={}, error=str(exc)))
    rows.sort(key=lambda r: (r.error is not None,
                             -(r.rs_mean if np.isfinite(r.rs_mean) else -1.0),
                             r.name))
    return SweepReport(rows=rows)


# re-export so evaluation's public surface includes report emission
from .reporting import emit_report  # noqa: E402,F401
