"""Differentiable patch transformations and scene compositing.

Two families compose in a fixed order: the conventional family (scale,
in-plane rotation, brightness/contrast, additive noise), then the wearable
family (wrinkle displacement, cylindrical curvature, out-of-plane yaw/pitch,
random occlusion), then placement into the scene. Every resampling step is
bilinear in index space (pixel centers at integer coordinates) so the chain
stays differentiable w.r.t. patch pixels wherever the validity mask is on.

Sampled parameters are plain numbers; gradients flow only through pixels.
Each record in a params log carries the seeds of its noise/wrinkle/occluder
draws, so replaying a log reproduces a batch bitwise.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch

from .core import (DEFAULT_ASPECT, Patch, PersonBox, Scene, SceneSet,
                   SeedableRng, bilinear_resample)

logger = logging.getLogger(__name__)

DTYPE = torch.float64

# slack absorbing trig roundoff when testing sample coords against the border
_BOUNDS_EPS = 1e-9


class PlacementError(ValueError):
    """Patch target rectangle is degenerate or entirely outside the scene."""


# ---------------------------------------------------------------------------
# Parameter sampling

@dataclass
class TransformParams:
    """One concrete draw from the transformation families (identity defaults)."""

    scale: float = 1.0
    rotate_deg: float = 0.0
    brightness_add: float = 0.0
    contrast_mul: float = 1.0
    noise_amp: float = 0.0
    noise_seed: int = 0
    wrinkle_grid: int = 5
    wrinkle_amp_px: float = 0.0
    wrinkle_seed: int = 0
    radian_curvature: float = 0.0
    yaw_deg: float = 0.0
    pitch_deg: float = 0.0
    occlusion_fraction: float = 0.0
    occlusion_seed: int = 0
    occlusion_fill: tuple[float, float, float] = (0.0, 0.0, 0.0)
    alpha: float = 0.6
    v_anchor: float = 0.45

    def to_dict(self) -> dict:
        d = asdict(self)
        d["occlusion_fill"] = list(self.occlusion_fill)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TransformParams":
        d = dict(d)
        d["occlusion_fill"] = tuple(d["occlusion_fill"])
        return cls(**d)


@dataclass
class EotConfig:
    """Sampling ranges and enable flags for the transformation families.

    Disabled sub-transforms sample their identity values. Degenerate ranges
    (lo == hi) pin a parameter to a constant.
    """

    enable_scale: bool = True
    scale_range: tuple[float, float] = (0.8, 1.2)
    enable_rotate: bool = True
    rotate_range: tuple[float, float] = (-20.0, 20.0)
    enable_brightness: bool = True
    brightness_range: tuple[float, float] = (-0.1, 0.1)
    enable_contrast: bool = True
    contrast_range: tuple[float, float] = (0.8, 1.2)
    enable_noise: bool = True
    noise_amp: float = 0.1
    enable_wrinkle: bool = True
    wrinkle_grid: int = 5
    wrinkle_amp_range: tuple[float, float] = (0.0, 6.0)
    enable_radian: bool = True
    curvature_range: tuple[float, float] = (0.0, math.pi / 6)
    enable_angle: bool = True
    yaw_range: tuple[float, float] = (-30.0, 30.0)
    pitch_range: tuple[float, float] = (-10.0, 10.0)
    enable_occlusion: bool = True
    occlusion_fraction_range: tuple[float, float] = (0.0, 0.25)
    occlusion_fill: str | tuple[float, float, float] = "random"
    alpha_range: tuple[float, float] = (0.6, 0.6)
    v_anchor_range: tuple[float, float] = (0.45, 0.45)

    _RANGES = ("scale_range", "rotate_range", "brightness_range", "contrast_range",
               "wrinkle_amp_range", "curvature_range", "yaw_range", "pitch_range",
               "occlusion_fraction_range", "alpha_range", "v_anchor_range")
    _FLAGS = ("enable_scale", "enable_rotate", "enable_brightness", "enable_contrast",
              "enable_noise", "enable_wrinkle", "enable_radian", "enable_angle",
              "enable_occlusion")

    def validate(self, require_enabled: bool = True) -> None:
        for name in self._RANGES:
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is not well-ordered: ({lo}, {hi})")
        lo, hi = self.occlusion_fraction_range
        if lo < 0 or hi > 0.3:
            raise ValueError(f"occlusion fraction range must stay within [0, 0.3], "
                             f"got ({lo}, {hi})")
        if require_enabled and not any(getattr(self, f) for f in self._FLAGS):
            raise ValueError("at least one sub-transform must be enabled")

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in self._RANGES:
            d[name] = list(getattr(self, name))
        if not isinstance(self.occlusion_fill, str):
            d["occlusion_fill"] = list(self.occlusion_fill)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EotConfig":
        d = dict(d)
        for name in cls._RANGES:
            if name in d:
                d[name] = tuple(d[name])
        if "occlusion_fill" in d and not isinstance(d["occlusion_fill"], str):
            d["occlusion_fill"] = tuple(d["occlusion_fill"])
        return cls(**d)


def identity_eot_config() -> EotConfig:
    """Config whose samples are always the identity transform (placement only)."""
    return EotConfig(enable_scale=False, enable_rotate=False, enable_brightness=False,
                     enable_contrast=False, enable_noise=False, enable_wrinkle=False,
                     enable_radian=False, enable_angle=False, enable_occlusion=False)


def sample_transform_params(cfg: EotConfig, rng: SeedableRng) -> TransformParams:
    """Draw one parameter set; fixed draw order keeps streams reproducible."""
    p = TransformParams()
    if cfg.enable_scale:
        p.scale = float(rng.uniform(*cfg.scale_range))
    if cfg.enable_rotate:
        p.rotate_deg = float(rng.uniform(*cfg.rotate_range))
    if cfg.enable_brightness:
        p.brightness_add = float(rng.uniform(*cfg.brightness_range))
    if cfg.enable_contrast:
        p.contrast_mul = float(rng.uniform(*cfg.contrast_range))
    if cfg.enable_noise:
        p.noise_amp = float(cfg.noise_amp)
        p.noise_seed = rng.seed_u64()
    if cfg.enable_wrinkle:
        p.wrinkle_grid = int(cfg.wrinkle_grid)
        p.wrinkle_amp_px = float(rng.uniform(*cfg.wrinkle_amp_range))
        p.wrinkle_seed = rng.seed_u64()
    if cfg.enable_radian:
        p.radian_curvature = float(rng.uniform(*cfg.curvature_range))
    if cfg.enable_angle:
        p.yaw_deg = float(rng.uniform(*cfg.yaw_range))
        p.pitch_deg = float(rng.uniform(*cfg.pitch_range))
    if cfg.enable_occlusion:
        p.occlusion_fraction = float(rng.uniform(*cfg.occlusion_fraction_range))
        p.occlusion_seed = rng.seed_u64()
        if isinstance(cfg.occlusion_fill, str):
            p.occlusion_fill = tuple(float(v) for v in rng.random(3))
        else:
            p.occlusion_fill = tuple(float(v) for v in cfg.occlusion_fill)
    p.alpha = float(rng.uniform(*cfg.alpha_range))
    p.v_anchor = float(rng.uniform(*cfg.v_anchor_range))
    return p


# ---------------------------------------------------------------------------
# Bilinear machinery

def _as_patch_tensor(patch) -> torch.Tensor:
    if isinstance(patch, torch.Tensor):
        return patch if patch.dtype == DTYPE else patch.to(DTYPE)
    if isinstance(patch, Patch):
        return torch.as_tensor(patch.pixels, dtype=DTYPE)
    return torch.as_tensor(np.asarray(patch), dtype=DTYPE)


def bilinear_sample(img: torch.Tensor, ys: torch.Tensor, xs: torch.Tensor):
    """Sample H x W x C ``img`` at float coords; zero outside, plus an
    in-bounds mask. Differentiable w.r.t. ``img``."""
    h, w = img.shape[0], img.shape[1]
    y0 = torch.floor(ys)
    x0 = torch.floor(xs)
    fy = (ys - y0).unsqueeze(-1)
    fx = (xs - x0).unsqueeze(-1)
    y0 = y0.long()
    x0 = x0.long()

    def tap(yi, xi):
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        flat = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).reshape(-1)
        vals = img.reshape(h * w, -1)[flat].reshape(*yi.shape, img.shape[2])
        return vals * valid.unsqueeze(-1).to(img.dtype)

    out = (tap(y0, x0) * (1 - fy) * (1 - fx)
           + tap(y0, x0 + 1) * (1 - fy) * fx
           + tap(y0 + 1, x0) * fy * (1 - fx)
           + tap(y0 + 1, x0 + 1) * fy * fx)
    mask = ((ys >= -_BOUNDS_EPS) & (ys <= h - 1 + _BOUNDS_EPS)
            & (xs >= -_BOUNDS_EPS) & (xs <= w - 1 + _BOUNDS_EPS)).to(img.dtype)
    return out, mask


def resize_bilinear(img: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Differentiable bilinear resize, half-pixel centers, replicated borders
    (same convention as core.bilinear_resample)."""
    h, w = img.shape[0], img.shape[1]
    ys = (torch.arange(out_h, dtype=DTYPE) + 0.5) * (h / out_h) - 0.5
    xs = (torch.arange(out_w, dtype=DTYPE) + 0.5) * (w / out_w) - 0.5
    ys = ys.clamp(0, h - 1).unsqueeze(1).expand(out_h, out_w)
    xs = xs.clamp(0, w - 1).unsqueeze(0).expand(out_h, out_w)
    out, _ = bilinear_sample(img, ys, xs)
    return out


def _index_grids(h: int, w: int):
    ys = torch.arange(h, dtype=DTYPE).unsqueeze(1).expand(h, w)
    xs = torch.arange(w, dtype=DTYPE).unsqueeze(0).expand(h, w)
    return ys, xs


# ---------------------------------------------------------------------------
# Conventional family

def apply_conventional(patch, p: TransformParams):
    """Rotate/scale into a same-sized canvas, then contrast, brightness and
    per-pixel noise; returns (image, validity mask)."""
    img = _as_patch_tensor(patch)
    h, w = img.shape[0], img.shape[1]

    if p.scale == 1.0 and p.rotate_deg == 0.0:
        warped, mask = img, torch.ones(h, w, dtype=DTYPE)
    else:
        if p.scale <= 0:
            raise ValueError(f"scale must be positive, got {p.scale}")
        theta = math.radians(p.rotate_deg)
        cos_t, sin_t = math.cos(theta), math.sin(theta)
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        ys, xs = _index_grids(h, w)
        dy, dx = ys - cy, xs - cx
        # inverse map: src = R(-theta) (dst - c) / scale + c
        sx = (cos_t * dx + sin_t * dy) / p.scale + cx
        sy = (-sin_t * dx + cos_t * dy) / p.scale + cy
        warped, mask = bilinear_sample(img, sy, sx)

    out = warped * p.contrast_mul + p.brightness_add
    if p.noise_amp > 0:
        gen = np.random.Generator(np.random.PCG64(p.noise_seed))
        noise = gen.uniform(-p.noise_amp, p.noise_amp, size=(h, w, 3))
        out = out + torch.as_tensor(noise, dtype=DTYPE)
    return out.clamp(0.0, 1.0), mask


# ---------------------------------------------------------------------------
# Wearable (3D) family

def _wrinkle(img, mask, p: TransformParams):
    h, w = img.shape[0], img.shape[1]
    gen = np.random.Generator(np.random.PCG64(p.wrinkle_seed))
    g = max(2, int(p.wrinkle_grid))
    field = gen.uniform(-1.0, 1.0, size=(g, g, 2))
    field -= field.mean(axis=(0, 1))
    disp = bilinear_resample(field, h, w) * p.wrinkle_amp_px  # (dy, dx) in px
    ys, xs = _index_grids(h, w)
    sy = ys + torch.as_tensor(disp[..., 0], dtype=DTYPE)
    sx = xs + torch.as_tensor(disp[..., 1], dtype=DTYPE)
    out, inb = bilinear_sample(img, sy, sx)
    msk, _ = bilinear_sample(mask.unsqueeze(-1), sy, sx)
    # gradient of the horizontal displacement doubles as a cheap shading cue
    shade = 1.0 + 0.5 * np.gradient(disp[..., 1], axis=1)
    out = out * torch.as_tensor(shade[..., None], dtype=DTYPE)
    return out.clamp(0.0, 1.0), msk.squeeze(-1) * inb


def _radian(img, mask, p: TransformParams):
    h, w = img.shape[0], img.shape[1]
    c = p.radian_curvature
    half_w = (w - 1) / 2.0
    x_out = (np.arange(w, dtype=np.float64) - half_w) / half_w  # [-1, 1]
    arg = x_out * c
    sin_c = math.sin(c)
    covered = np.abs(arg) <= sin_c + 1e-12
    u = np.arcsin(np.clip(arg, -sin_c, sin_c)) / c  # source coord, [-1, 1]
    src_x = u * half_w + half_w
    shade = np.cos(u * c)

    ys, xs = _index_grids(h, w)
    sx = torch.as_tensor(src_x, dtype=DTYPE).unsqueeze(0).expand(h, w)
    out, inb = bilinear_sample(img, ys, sx)
    msk, _ = bilinear_sample(mask.unsqueeze(-1), ys, sx)
    col_ok = torch.as_tensor(covered.astype(np.float64), dtype=DTYPE).unsqueeze(0)
    out = out * torch.as_tensor(shade, dtype=DTYPE).view(1, w, 1)
    return out.clamp(0.0, 1.0), msk.squeeze(-1) * inb * col_ok


def _angle_homography(h: int, w: int, yaw_deg: float, pitch_deg: float) -> np.ndarray:
    """3x3 map from centered patch-plane coords to centered canvas coords."""
    yaw, pitch = math.radians(yaw_deg), math.radians(pitch_deg)
    f = 2.0 * max(h, w)
    ry = np.array([[math.cos(yaw), 0.0, math.sin(yaw)],
                   [0.0, 1.0, 0.0],
                   [-math.sin(yaw), 0.0, math.cos(yaw)]])
    rx = np.array([[1.0, 0.0, 0.0],
                   [0.0, math.cos(pitch), -math.sin(pitch)],
                   [0.0, math.sin(pitch), math.cos(pitch)]])
    r = rx @ ry  # yaw first, then pitch
    return np.array([[f * r[0, 0], f * r[0, 1], 0.0],
                     [f * r[1, 0], f * r[1, 1], 0.0],
                     [r[2, 0], r[2, 1], f]])


def _angle(img, mask, p: TransformParams):
    h, w = img.shape[0], img.shape[1]
    hom_inv = np.linalg.inv(_angle_homography(h, w, p.yaw_deg, p.pitch_deg))
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = _index_grids(h, w)
    xc, yc = xs - cx, ys - cy
    denom = hom_inv[2, 0] * xc + hom_inv[2, 1] * yc + hom_inv[2, 2]
    sx = (hom_inv[0, 0] * xc + hom_inv[0, 1] * yc + hom_inv[0, 2]) / denom + cx
    sy = (hom_inv[1, 0] * xc + hom_inv[1, 1] * yc + hom_inv[1, 2]) / denom + cy
    out, inb = bilinear_sample(img, sy, sx)
    msk, _ = bilinear_sample(mask.unsqueeze(-1), sy, sx)
    front = (denom > 0).to(DTYPE)
    return out, msk.squeeze(-1) * inb * front


def _occlude(img, p: TransformParams):
    h, w = img.shape[0], img.shape[1]
    occ = torch.zeros(h, w, dtype=DTYPE)
    if p.occlusion_fraction > 0:
        gen = np.random.Generator(np.random.PCG64(p.occlusion_seed))
        aspect = gen.uniform(0.5, 2.0)  # rect height / width
        area = p.occlusion_fraction * h * w
        rh = min(max(int(round(math.sqrt(area * aspect))), 1), h)
        rw = min(max(int(round(math.sqrt(area / aspect))), 1), w)
        top = int(gen.integers(0, h - rh + 1))
        left = int(gen.integers(0, w - rw + 1))
        occ[top:top + rh, left:left + rw] = 1.0
        fill = torch.as_tensor(p.occlusion_fill, dtype=DTYPE)
        img = img * (1 - occ.unsqueeze(-1)) + fill * occ.unsqueeze(-1)
    return img, occ


def apply_3d(patch_img, mask, p: TransformParams):
    """Wearable distortions in fixed order: wrinkle, radian, angle, occlusion.

    Returns (image, validity mask, occlusion mask); gradients w.r.t. the
    incoming image are exactly zero under the occlusion rectangle.
    """
    img = _as_patch_tensor(patch_img)
    mask = mask.to(DTYPE) if isinstance(mask, torch.Tensor) else torch.as_tensor(
        np.asarray(mask), dtype=DTYPE)
    if p.wrinkle_amp_px > 0:
        img, mask = _wrinkle(img, mask, p)
    if p.radian_curvature > 1e-9:
        img, mask = _radian(img, mask, p)
    if p.yaw_deg != 0.0 or p.pitch_deg != 0.0:
        img, mask = _angle(img, mask, p)
    img, occ = _occlude(img, p)
    return img, mask, occ


def warp_patch(patch, p: TransformParams):
    """Full patch-space chain: conventional family then wearable family."""
    img, mask = apply_conventional(patch, p)
    return apply_3d(img, mask, p)


# ---------------------------------------------------------------------------
# Placement and batching

def place_patch(scene_img, patch_img, mask, box: PersonBox, p: TransformParams,
                aspect: float = DEFAULT_ASPECT):
    """Composite a warped patch onto one person box.

    Width is ``alpha * box width``; height follows the physical aspect hint.
    Returns (composited image, (top, left, height, width) pixel rect).
    """
    scene = _as_patch_tensor(scene_img)
    hs, ws = scene.shape[0], scene.shape[1]
    box_w_px = box.w * ws
    box_h_px = box.h * hs
    target_w = int(round(p.alpha * box_w_px))
    target_h = int(round(target_w * aspect))
    if target_w < 1 or target_h < 1:
        raise PlacementError(f"degenerate target {target_h}x{target_w} "
                             f"for box {box} (alpha={p.alpha})")
    left = int(round(box.cx * ws - target_w / 2))
    top = int(round((box.cy - box.h / 2) * hs + p.v_anchor * box_h_px - target_h / 2))
    r0, c0 = max(top, 0), max(left, 0)
    r1, c1 = min(top + target_h, hs), min(left + target_w, ws)
    if r1 <= r0 or c1 <= c0:
        raise PlacementError(f"target rect ({top},{left})+{target_h}x{target_w} "
                             f"lies outside the {hs}x{ws} scene")

    resized = resize_bilinear(_as_patch_tensor(patch_img), target_h, target_w)
    m = resize_bilinear(mask.unsqueeze(-1), target_h, target_w)
    sub = resized[r0 - top:r1 - top, c0 - left:c1 - left]
    sub_m = m[r0 - top:r1 - top, c0 - left:c1 - left]

    out = scene.clone()
    out[r0:r1, c0:c1] = out[r0:r1, c0:c1] * (1 - sub_m) + sub * sub_m
    return out, (top, left, target_h, target_w)


@dataclass
class CompositeRecord:
    """Everything needed to replay one (scene, box) composite bitwise."""

    scene_id: str
    box_index: int
    params: TransformParams
    rect_px: tuple[int, int, int, int]   # top, left, height, width
    rect_norm: tuple[float, float, float, float]  # x0, y0, x1, y1

    def to_dict(self) -> dict:
        return {"scene_id": self.scene_id, "box_index": self.box_index,
                "params": self.params.to_dict(),
                "rect_px": list(self.rect_px), "rect_norm": list(self.rect_norm)}

    @classmethod
    def from_dict(cls, d: dict) -> "CompositeRecord":
        return cls(scene_id=d["scene_id"], box_index=int(d["box_index"]),
                   params=TransformParams.from_dict(d["params"]),
                   rect_px=tuple(d["rect_px"]), rect_norm=tuple(d["rect_norm"]))


@dataclass
class BatchResult:
    images: list[torch.Tensor]                    # one composited image per scene
    records: list[CompositeRecord]                # one per (scene, box) composite
    regions: list[list[tuple[float, float, float, float]]]  # normalized rects per image


def _norm_rect(rect, hs, ws):
    top, left, th, tw = rect
    r0, c0 = max(top, 0), max(left, 0)
    r1, c1 = min(top + th, hs), min(left + tw, ws)
    return (c0 / ws, r0 / hs, c1 / ws, r1 / hs)


def _composite_scene(scene: Scene, patch_t, params_per_box, aspect,
                     person_label: int):
    image = torch.as_tensor(scene.image, dtype=DTYPE)
    hs, ws = image.shape[0], image.shape[1]
    records, rects = [], []
    for bi, box in enumerate(scene.person_boxes):
        if box.label != person_label:
            continue
        p = params_per_box.get(bi)
        if p is None:
            continue
        img, mask, _occ = warp_patch(patch_t, p)
        try:
            image, rect = place_patch(image, img, mask, box, p, aspect=aspect)
        except PlacementError as exc:
            logger.warning("skipping scene %s box %d: %s", scene.id, bi, exc)
            continue
        rect_n = _norm_rect(rect, hs, ws)
        records.append(CompositeRecord(scene_id=scene.id, box_index=bi, params=p,
                                       rect_px=rect, rect_norm=rect_n))
        rects.append(rect_n)
    return image, records, rects


def batch_apply(scenes: SceneSet, patch, cfg: EotConfig, rng: SeedableRng,
                scene_keys: list[int] | None = None,
                aspect: float | None = None, person_label: int = 0) -> BatchResult:
    """Composite the patch onto every person box of every scene.

    One fresh parameter draw per (scene, box); the rng is split per scene key
    so any parallel schedule would see the same streams. Placement failures
    skip that box with a warning instead of aborting the batch.
    """
    if len(scenes.scenes) == 0:
        raise ValueError("batch_apply needs at least one scene")
    patch_t = _as_patch_tensor(patch)
    asp = aspect if aspect is not None else (
        patch.aspect_hint if isinstance(patch, Patch) else DEFAULT_ASPECT)
    keys = scene_keys if scene_keys is not None else list(range(len(scenes.scenes)))
    images, records, regions = [], [], []
    for key, scene in zip(keys, scenes.scenes):
        srng = rng.child(key)
        params = {bi: sample_transform_params(cfg, srng)
                  for bi, box in enumerate(scene.person_boxes)
                  if box.label == person_label}
        image, recs, rects = _composite_scene(scene, patch_t, params, asp, person_label)
        images.append(image)
        records.extend(recs)
        regions.append(rects)
    return BatchResult(images=images, records=records, regions=regions)


def replay_batch(scenes: SceneSet, patch, records: list[CompositeRecord],
                 aspect: float | None = None, person_label: int = 0) -> BatchResult:
    """Re-run compositing from a params log; bitwise-identical to the original."""
    patch_t = _as_patch_tensor(patch)
    asp = aspect if aspect is not None else (
        patch.aspect_hint if isinstance(patch, Patch) else DEFAULT_ASPECT)
    by_scene: dict[str, dict[int, TransformParams]] = {}
    for rec in records:
        by_scene.setdefault(rec.scene_id, {})[rec.box_index] = rec.params
    images, out_records, regions = [], [], []
    for scene in scenes.scenes:
        params = by_scene.get(scene.id, {})
        image, recs, rects = _composite_scene(scene, patch_t, params, asp, person_label)
        images.append(image)
        out_records.extend(recs)
        regions.append(rects)
    return BatchResult(images=images, records=out_records, regions=regions)


def write_params_log(records: list[CompositeRecord], path: str | Path) -> None:
    """JSON-lines log, one record per (scene, box)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def read_params_log(path: str | Path) -> list[CompositeRecord]:
    return [CompositeRecord.from_dict(json.loads(line))
            for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
