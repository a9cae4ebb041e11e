"""The optimization objective: detection, smoothness, printability, and the
disappearance variant, combined under configurable weights."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from .core import Palette, Patch
from .detector import DetectionGrid, extract_person_score

DTYPE = torch.float64

TV_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    lambda_tv: float = 2.5
    lambda_nps: float = 0.01
    mu_disappear: float = 0.0

    def __post_init__(self):
        for name in ("lambda_tv", "lambda_nps", "mu_disappear"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")

    def to_dict(self):
        return {"lambda_tv": self.lambda_tv, "lambda_nps": self.lambda_nps,
                "mu_disappear": self.mu_disappear}


@dataclass
class LossBreakdown:
    detection: float
    tv: float
    nps: float
    disappear: float
    total: float
    tensor: torch.Tensor | None = None  # differentiable total, when inputs carry grad

    def to_dict(self):
        return {"detection": self.detection, "tv": self.tv, "nps": self.nps,
                "disappear": self.disappear, "total": self.total}


def _as_tensor(patch) -> torch.Tensor:
    if isinstance(patch, torch.Tensor):
        return patch if patch.dtype == DTYPE else patch.to(DTYPE)
    if isinstance(patch, Patch):
        return torch.as_tensor(patch.pixels, dtype=DTYPE)
    return torch.as_tensor(np.asarray(patch), dtype=DTYPE)


def tv_loss(patch) -> torch.Tensor:
    """Smoothness penalty: per-pixel sqrt of squared forward differences.

    Out-of-range neighbor differences count as zero and the epsilon baseline
    is subtracted so a constant image scores exactly 0; channels sum.
    """
    p = _as_tensor(patch)
    if p.ndim == 2:
        p = p.unsqueeze(-1)
    h, w = p.shape[0], p.shape[1]
    di = torch.zeros_like(p)
    dj = torch.zeros_like(p)
    if h > 1:
        di[:-1] = p[:-1] - p[1:]
    if w > 1:
        dj[:, :-1] = p[:, :-1] - p[:, 1:]
    terms = torch.sqrt(di * di + dj * dj + TV_EPS) - np.sqrt(TV_EPS)
    return terms.sum()


def nps_loss(patch, palette: Palette) -> torch.Tensor:
    """Printability penalty: per pixel, distance to the nearest palette color.

    Ties take the first minimizing color in palette order (torch.min rule).
    The squared distance is floored at 1e-24 so the subgradient at an exact
    palette hit is 0 instead of NaN; the value shift is below 1e-12 per pixel.
    """
    p = _as_tensor(patch).reshape(-1, 3)
    colors = torch.as_tensor(palette.colors, dtype=DTYPE)
    sq = ((p.unsqueeze(1) - colors.unsqueeze(0)) ** 2).sum(-1)
    d = torch.sqrt(sq.clamp(min=1e-24))
    return d.min(dim=1).values.sum()


def detection_loss(grids: list[DetectionGrid], person_class_index: int,
                   score_mode: str = "product") -> torch.Tensor:
    """Mean over the batch of the maximum person confidence."""
    if not grids:
        raise ValueError("detection_loss needs a non-empty batch of grids")
    scores = [extract_person_score(g, person_class_index, score_mode) for g in grids]
    return torch.stack(scores).mean()


def disappearance_loss(grids: list[DetectionGrid],
                       patch_regions: list[list[tuple[float, float, float, float]]]
                       ) -> torch.Tensor:
    """Mean over the batch of the strongest any-class confidence among boxes
    whose center falls inside a composited patch rectangle; 0 when none does."""
    if not grids:
        raise ValueError("disappearance_loss needs a non-empty batch of grids")
    if len(patch_regions) != len(grids):
        raise ValueError("need one region list per grid")
    per_image = []
    for grid, rects in zip(grids, patch_regions):
        if not rects:
            per_image.append(torch.zeros((), dtype=DTYPE))
            continue
        for x0, y0, x1, y1 in rects:
            if not (0 <= x0 <= x1 <= 1 and 0 <= y0 <= y1 <= 1):
                raise ValueError(f"patch region outside image: {(x0, y0, x1, y1)}")
        cx = grid.boxes[..., 0]
        cy = grid.boxes[..., 1]
        inside = torch.zeros_like(cx, dtype=torch.bool)
        for x0, y0, x1, y1 in rects:
            inside |= (cx >= x0) & (cx <= x1) & (cy >= y0) & (cy <= y1)
        if not inside.any():
            per_image.append(torch.zeros((), dtype=DTYPE))
            continue
        score = grid.objectness * grid.class_probs.max(dim=-1).values
        per_image.append(torch.where(inside, score, torch.zeros_like(score)).max())
    return torch.stack(per_image).mean()


def total_objective(patch, grids, regions, palette: Palette, w: LossWeights,
                    person_class_index: int, score_mode: str = "product") -> LossBreakdown:
    """Weighted combination of all loss components; `tensor` carries the
    differentiable total for the optimizer."""
    det = detection_loss(grids, person_class_index, score_mode)
    tv = tv_loss(patch)
    nps = nps_loss(patch, palette)
    if w.mu_disappear > 0:
        dis = disappearance_loss(grids, regions)
    else:
        dis = torch.zeros((), dtype=DTYPE)
    total = det + w.lambda_tv * tv + w.lambda_nps * nps + w.mu_disappear * dis
    return LossBreakdown(detection=float(det.detach()), tv=float(tv.detach()),
                         nps=float(nps.detach()), disappear=float(dis.detach()),
                         total=float(total.detach()), tensor=total)


# ---------------------------------------------------------------------------
# Palette files: one "r g b" triple per line, components in [0, 1]

def load_palette(path: str | Path) -> Palette:
    colors = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'r g b', got {line!r}")
        colors.append([float(v) for v in parts])
    return Palette(np.asarray(colors, dtype=np.float64))


def default_palette() -> Palette:
    """The versioned 30-color printable set bundled with the package."""
    return load_palette(Path(str(resources.files("stealthpatch") / "fixtures"
                                 / "palette30.txt")))
