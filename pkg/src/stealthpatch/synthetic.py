"""Desk-scale synthetic scenes and the toy detector pretraining recipe.

Scenes are 64x64 textured backgrounds with up to three object kinds: a bright
elliptical blob standing in for a person (class 0), a dark crate (class 1)
and a ringed ball (class 2). The toy detector fixture is pretrained here and
committed to the package, so the full pipeline is testable without any
external weights.
"""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path

import numpy as np
import torch

from .core import PersonBox, Scene, SceneSet, SeedableRng, bilinear_resample, save_image
from .detector import (DTYPE, DetectorDescriptor, RawGridOutput, ToyDetector,
                       TOY_LAYERS, decode_grid, extract_person_score)

logger = logging.getLogger(__name__)

SCENE_SIZE = 64
CLASS_NAMES = ("person", "crate", "ball")

TOY_DESCRIPTOR = DetectorDescriptor(
    grid_size=4, boxes_per_cell=1, num_classes=3, input_size=SCENE_SIZE,
    person_class_index=0, anchors=((1.5, 2.2),))


# ---------------------------------------------------------------------------
# Scene synthesis

def _textured_background(rng: SeedableRng, size: int) -> np.ndarray:
    coarse = rng.uniform(0.05, 0.45, size=(6, 6, 3))
    img = bilinear_resample(coarse, size, size)
    img += rng.uniform(-0.02, 0.02, size=(size, size, 3))
    return np.clip(img, 0.0, 1.0)


def _paint_ellipse(img, cx, cy, w, h, color, softness=3.0):
    size = img.shape[0]
    ys = (np.arange(size) + 0.5) / size
    xs = (np.arange(size) + 0.5) / size
    dy = (ys[:, None] - cy) / (h / 2)
    dx = (xs[None, :] - cx) / (w / 2)
    r2 = dx * dx + dy * dy
    alpha = np.clip((1.0 - r2) * softness, 0.0, 1.0)[..., None]
    return img * (1 - alpha) + np.asarray(color) * alpha


def _paint_rect(img, cx, cy, w, h, color):
    size = img.shape[0]
    r0 = max(int((cy - h / 2) * size), 0)
    r1 = min(int(math.ceil((cy + h / 2) * size)), size)
    c0 = max(int((cx - w / 2) * size), 0)
    c1 = min(int(math.ceil((cx + w / 2) * size)), size)
    img = img.copy()
    img[r0:r1, c0:c1] = color
    return img


def _paint_ball(img, cx, cy, w, h, color):
    size = img.shape[0]
    ys = (np.arange(size) + 0.5) / size
    xs = (np.arange(size) + 0.5) / size
    dy = (ys[:, None] - cy) / (h / 2)
    dx = (xs[None, :] - cx) / (w / 2)
    r = np.sqrt(dx * dx + dy * dy)
    inside = (r <= 1.0)[..., None]
    ring = ((r > 0.65) & (r <= 0.9))[..., None]
    base = np.asarray(color)
    out = np.where(inside, base, img)
    return np.where(ring, base * 0.35, out)


def _sample_box(rng, w_range, h_range, margin=0.02):
    w = float(rng.uniform(*w_range))
    h = float(rng.uniform(*h_range))
    cx = float(rng.uniform(w / 2 + margin, 1 - w / 2 - margin))
    cy = float(rng.uniform(h / 2 + margin, 1 - h / 2 - margin))
    return cx, cy, w, h


def _paint_person(img, rng, cx, cy, w, h):
    """Bright figure: body ellipse topped by a head disc, both inside the box."""
    color = rng.uniform(0.75, 1.0, size=3)
    head_h = 0.30 * h
    body_h = h - head_h
    body_cy = cy + head_h / 2
    img = _paint_ellipse(img, cx, body_cy, w * 0.92, body_h * 0.95, color)
    head_cy = cy - h / 2 + head_h / 2
    img = _paint_ellipse(img, cx, head_cy, head_h * 0.9, head_h * 0.9,
                         color * 0.95, softness=4.0)
    return img


def make_scene(rng: SeedableRng, scene_id: str, size: int = SCENE_SIZE,
               with_person: bool = True, max_distractors: int = 2) -> Scene:
    """One synthetic scene; the person figure is painted last so it stays visible."""
    img = _textured_background(rng, size)
    boxes = []
    for _ in range(int(rng.integers(0, max_distractors + 1))):
        kind = int(rng.integers(1, 3))
        cx, cy, w, h = _sample_box(rng, (0.15, 0.30), (0.15, 0.30))
        if kind == 1:
            color = rng.uniform(0.0, 0.15, size=3)
            img = _paint_rect(img, cx, cy, w, h, color)
        else:
            color = rng.uniform(0.4, 0.7, size=3)
            img = _paint_ball(img, cx, cy, w, h, color)
        boxes.append(PersonBox(cx=cx, cy=cy, w=w, h=h, label=kind))
    if with_person:
        cx, cy, w, h = _sample_box(rng, (0.30, 0.46), (0.45, 0.68))
        img = _paint_person(img, rng, cx, cy, w, h)
        boxes.append(PersonBox(cx=cx, cy=cy, w=w, h=h, label=0))
    return Scene(image=np.clip(img, 0.0, 1.0), person_boxes=boxes, id=scene_id)


def _occlude_person(img, rng, box: PersonBox, max_cover: float = 0.45):
    """Pretraining augmentation: random rectangles over the person body, so the
    fixture learns to keep detecting partially covered figures."""
    size = img.shape[0]
    img = img.copy()
    for _ in range(int(rng.integers(1, 3))):
        frac = float(rng.uniform(0.1, max_cover))
        rw = box.w * math.sqrt(frac)
        rh = box.h * math.sqrt(frac)
        rcx = box.cx + float(rng.uniform(-0.25, 0.25)) * box.w
        rcy = box.cy + float(rng.uniform(-0.2, 0.3)) * box.h
        color = rng.uniform(0.0, 1.0, size=3)
        r0 = max(int((rcy - rh / 2) * size), 0)
        r1 = min(int(math.ceil((rcy + rh / 2) * size)), size)
        c0 = max(int((rcx - rw / 2) * size), 0)
        c1 = min(int(math.ceil((rcx + rw / 2) * size)), size)
        img[r0:r1, c0:c1] = color
    return img


def make_scene_set(n: int, seed: int, split_tag: str = "train",
                   with_person: bool = True, max_distractors: int = 2) -> SceneSet:
    root = SeedableRng(seed)
    scenes = [make_scene(root.child(i), f"{split_tag}_{i:04d}",
                         with_person=with_person, max_distractors=max_distractors)
              for i in range(n)]
    return SceneSet(scenes=scenes, split_tag=split_tag)


def canonical_person_scene() -> Scene:
    """Fixed reference scene used as the fixture's acceptance gate."""
    return make_scene(SeedableRng(7), "canonical", max_distractors=0)


def export_corpus(scene_set: SceneSet, root: str | Path) -> None:
    """Write a scene set in the on-disk corpus layout (images/ + annotations/)."""
    root = Path(root)
    for scene in scene_set:
        save_image(root / "images" / f"{scene.id}.png", scene.image, depth=8)
        lines = [f"{b.label} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}"
                 for b in scene.person_boxes]
        ann = root / "annotations" / f"{scene.id}.txt"
        ann.parent.mkdir(parents=True, exist_ok=True)
        ann.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


# ---------------------------------------------------------------------------
# Toy detector pretraining

def _init_weights(rng: SeedableRng, descriptor: DetectorDescriptor) -> dict[str, torch.Tensor]:
    sizes = []
    in_ch = 3
    for out_ch, _stride in TOY_LAYERS:
        if out_ch is None:
            out_ch = descriptor.boxes_per_cell * (5 + descriptor.num_classes)
        sizes.append((out_ch, in_ch))
        in_ch = out_ch
    weights = {}
    for i, (out_ch, in_ch) in enumerate(sizes):
        fan_in = in_ch * 9
        std = math.sqrt(2.0 / fan_in)
        weights[f"conv{i}.weight"] = torch.as_tensor(
            rng.uniform(-1, 1, size=(out_ch, in_ch, 3, 3)) * std * math.sqrt(3), dtype=DTYPE)
        bias = np.zeros(out_ch)
        if i == len(sizes) - 1:
            bias[4] = -2.0  # low objectness prior
        weights[f"conv{i}.bias"] = torch.as_tensor(bias, dtype=DTYPE)
    for t in weights.values():
        t.requires_grad_(True)
    return weights


def _scene_targets(scene: Scene, desc: DetectorDescriptor):
    s = desc.grid_size
    aw, ah = desc.anchors[0]
    obj = np.zeros((s, s))
    geo = np.zeros((s, s, 4))
    cls = np.full((s, s), -1, dtype=np.int64)
    for box in scene.person_boxes:
        col = min(int(box.cx * s), s - 1)
        row = min(int(box.cy * s), s - 1)
        obj[row, col] = 1.0
        geo[row, col] = (box.cx * s - col, box.cy * s - row,
                         math.log(box.w * s / aw), math.log(box.h * s / ah))
        cls[row, col] = box.label
    return obj, geo, cls


def _pretrain_loss(raw: RawGridOutput, scene: Scene, desc: DetectorDescriptor):
    t = raw.tensor[:, :, 0, :]  # B = 1
    obj_t, geo_t, cls_t = _scene_targets(scene, desc)
    obj_t = torch.as_tensor(obj_t, dtype=DTYPE)
    geo_t = torch.as_tensor(geo_t, dtype=DTYPE)
    pos = obj_t > 0

    obj_logit = t[..., 4]
    bce = torch.nn.functional.binary_cross_entropy_with_logits(
        obj_logit, obj_t, reduction="none")
    loss = (bce * (1.0 + 4.0 * obj_t)).mean()  # positives weighted 5x

    if pos.any():
        off = torch.sigmoid(t[..., 0:2][pos])
        size = t[..., 2:4][pos]
        loss = loss + 2.0 * ((off - geo_t[..., 0:2][pos]) ** 2).mean()
        loss = loss + 2.0 * ((size - geo_t[..., 2:4][pos]) ** 2).mean()
        cls_idx = torch.as_tensor(cls_t[pos.numpy()], dtype=torch.long)
        loss = loss + torch.nn.functional.cross_entropy(t[..., 5:][pos], cls_idx)
    return loss


def pretrain_toy_detector(out_base: str | Path, seed: int = 20240601,
                          steps: int = 700, batch: int = 16,
                          lr: float = 3e-3) -> ToyDetector:
    """Scripted pretraining of the toy fixture; writes <base>.npz + <base>.json."""
    torch.set_num_threads(1)
    desc = TOY_DESCRIPTOR
    weights = _init_weights(SeedableRng(seed), desc)
    det = ToyDetector(desc, weights)
    opt = torch.optim.Adam(list(weights.values()), lr=lr)
    data_rng = SeedableRng(seed).child(1)

    for step in range(steps):
        opt.zero_grad()
        loss = torch.zeros((), dtype=DTYPE)
        for k in range(batch):
            srng = data_rng.child(step, k)
            with_person = srng.random() > 0.25
            scene = make_scene(srng.child(9), f"s{step}_{k}", with_person=with_person)
            image = scene.image
            if with_person and srng.random() < 0.5:
                person = next(b for b in scene.person_boxes if b.label == 0)
                image = _occlude_person(image, srng.child(10), person)
            loss = loss + _pretrain_loss(det.forward(image), scene, desc)
        loss = loss / batch
        loss.backward()
        opt.step()
        if step % 50 == 0 or step == steps - 1:
            logger.info("pretrain step %d loss %.4f", step, float(loss.detach()))

    out_base = Path(out_base)
    out_base.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: t.detach().numpy().astype(np.float32) for k, t in weights.items()}
    np.savez(out_base.with_suffix(".npz"), **arrays)
    meta = {
        "version": out_base.stem,
        "grid_size": desc.grid_size,
        "boxes_per_cell": desc.boxes_per_cell,
        "num_classes": desc.num_classes,
        "input_size": desc.input_size,
        "person_class_index": desc.person_class_index,
        "anchors": [list(a) for a in desc.anchors],
        "class_names": list(CLASS_NAMES),
        "layers": {k: list(a.shape) for k, a in arrays.items()},
        "pretrain": {"seed": seed, "steps": steps, "batch": batch, "lr": lr},
    }
    out_base.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n",
                                             encoding="utf-8")
    # reload through the public loader so the returned detector is the fixture
    from .detector import load_toy_detector
    fixture = load_toy_detector(out_base)
    _check_fixture_gates(fixture)
    return fixture


def _check_fixture_gates(det: ToyDetector) -> None:
    blank = np.zeros((det.descriptor.input_size, det.descriptor.input_size, 3))
    blank_score = float(extract_person_score(
        decode_grid(det.forward(blank)), det.descriptor.person_class_index))
    scene = canonical_person_scene()
    person_score = float(extract_person_score(
        decode_grid(det.forward(scene.image)), det.descriptor.person_class_index))
    logger.info("fixture gates: blank=%.3f person=%.3f", blank_score, person_score)
    if blank_score >= 0.3:
        raise RuntimeError(f"fixture gate failed: blank image person score "
                           f"{blank_score:.3f} >= 0.3")
    if person_score <= 0.7:
        raise RuntimeError(f"fixture gate failed: canonical scene person score "
                           f"{person_score:.3f} <= 0.7")
