"""Flat key-tree configuration: dotted keys, one `key = value` per line.

Values parse as JSON scalars where possible ("on"/"off" accepted for bools);
anything else stays a string. CLI flags override their config keys, and a
generic key=value override reaches every key. The README documents the tree.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

from .core import Constant, FromImage, InitSpec, Random
from .evaluation import EvalConfig
from .losses import LossWeights
from .trainer import AdamParams, TrainConfig
from .transforms import EotConfig


class ConfigError(ValueError):
    pass


def _parse_value(raw: str):
    raw = raw.strip()
    low = raw.lower()
    if low in ("on", "true", "yes"):
        return True
    if low in ("off", "false", "no"):
        return False
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    tree: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        tree[key] = _parse_value(raw)
    return tree


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return {}
    path = Path(path)
    return parse_config_text(path.read_text(encoding="utf-8"), source=str(path))


def apply_overrides(tree: dict, overrides: list[str]) -> dict:
    out = dict(tree)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, _, raw = item.partition("=")
        out[key.strip()] = _parse_value(raw)
    return out


def _get(tree: dict, key: str, default):
    return tree.get(key, default)


def _pair(tree: dict, prefix: str, default: tuple[float, float]) -> tuple[float, float]:
    lo = float(_get(tree, prefix + "_lo", default[0]))
    hi = float(_get(tree, prefix + "_hi", default[1]))
    return (lo, hi)


def build_eot_config(tree: dict) -> EotConfig:
    d = EotConfig()
    fill = _get(tree, "eot.occlusion_fill", d.occlusion_fill)
    if isinstance(fill, str) and fill != "random":
        fill = tuple(float(v) for v in fill.split(","))
    elif isinstance(fill, list):
        fill = tuple(float(v) for v in fill)
    return EotConfig(
        enable_scale=bool(_get(tree, "eot.scale", d.enable_scale)),
        scale_range=_pair(tree, "eot.scale", d.scale_range),
        enable_rotate=bool(_get(tree, "eot.rotate", d.enable_rotate)),
        rotate_range=_pair(tree, "eot.rotate", d.rotate_range),
        enable_brightness=bool(_get(tree, "eot.brightness", d.enable_brightness)),
        brightness_range=_pair(tree, "eot.brightness", d.brightness_range),
        enable_contrast=bool(_get(tree, "eot.contrast", d.enable_contrast)),
        contrast_range=_pair(tree, "eot.contrast", d.contrast_range),
        enable_noise=bool(_get(tree, "eot.noise", d.enable_noise)),
        noise_amp=float(_get(tree, "eot.noise_amp", d.noise_amp)),
        enable_wrinkle=bool(_get(tree, "eot.wrinkle", d.enable_wrinkle)),
        wrinkle_grid=int(_get(tree, "eot.wrinkle_grid", d.wrinkle_grid)),
        wrinkle_amp_range=_pair(tree, "eot.wrinkle_amp", d.wrinkle_amp_range),
        enable_radian=bool(_get(tree, "eot.radian", d.enable_radian)),
        curvature_range=_pair(tree, "eot.curvature", d.curvature_range),
        enable_angle=bool(_get(tree, "eot.angle", d.enable_angle)),
        yaw_range=_pair(tree, "eot.yaw", d.yaw_range),
        pitch_range=_pair(tree, "eot.pitch", d.pitch_range),
        enable_occlusion=bool(_get(tree, "eot.occlusion", d.enable_occlusion)),
        occlusion_fraction_range=_pair(tree, "eot.occlusion", d.occlusion_fraction_range),
        occlusion_fill=fill,
        alpha_range=_pair(tree, "eot.alpha", d.alpha_range),
        v_anchor_range=_pair(tree, "eot.v_anchor", d.v_anchor_range),
    )


def build_loss_weights(tree: dict) -> LossWeights:
    d = LossWeights()
    return LossWeights(lambda_tv=float(_get(tree, "weights.tv", d.lambda_tv)),
                       lambda_nps=float(_get(tree, "weights.nps", d.lambda_nps)),
                       mu_disappear=float(_get(tree, "weights.disappear",
                                               d.mu_disappear)))


def build_train_config(tree: dict, seed: int | None = None,
                       checkpoint_dir: str | None = None) -> TrainConfig:
    d = TrainConfig()
    da = AdamParams()
    adam = AdamParams(
        step_size=float(_get(tree, "train.step_size", da.step_size)),
        beta1=float(_get(tree, "train.beta1", da.beta1)),
        beta2=float(_get(tree, "train.beta2", da.beta2)),
        eps=float(_get(tree, "train.eps", da.eps)),
        decay=float(_get(tree, "train.lr_decay", da.decay)),
        decay_every=int(_get(tree, "train.lr_decay_every", da.decay_every)))
    cfg = TrainConfig(
        epochs=int(_get(tree, "train.epochs", d.epochs)),
        batch_size=int(_get(tree, "train.batch_size", d.batch_size)),
        adam=adam,
        stop_threshold=float(_get(tree, "train.stop_threshold", d.stop_threshold)),
        seed=int(seed if seed is not None else _get(tree, "train.seed", d.seed)),
        eot=build_eot_config(tree),
        weights=build_loss_weights(tree),
        checkpoint_every=int(_get(tree, "train.checkpoint_every", d.checkpoint_every)),
        checkpoint_dir=checkpoint_dir,
        score_mode=str(_get(tree, "eval.score_mode", d.score_mode)))
    return cfg


def build_eval_config(tree: dict, seed: int | None = None) -> EvalConfig:
    d = EvalConfig()
    # paste-time transforms reuse the tree's eot ranges; only scale/rotate are
    # on by default, the rest opt in through eval.paste_* switches
    eval_eot = build_eot_config(tree)
    eval_eot.enable_brightness = bool(_get(tree, "eval.paste_brightness", False))
    eval_eot.enable_contrast = bool(_get(tree, "eval.paste_contrast", False))
    eval_eot.enable_noise = bool(_get(tree, "eval.paste_noise", False))
    eval_eot.enable_wrinkle = bool(_get(tree, "eval.paste_wrinkle", False))
    eval_eot.enable_radian = bool(_get(tree, "eval.paste_radian", False))
    eval_eot.enable_angle = bool(_get(tree, "eval.paste_angle", False))
    eval_eot.enable_occlusion = bool(_get(tree, "eval.paste_occlusion", False))
    return EvalConfig(
        score_threshold=float(_get(tree, "eval.score_threshold", d.score_threshold)),
        nms_iou=float(_get(tree, "eval.nms_iou", d.nms_iou)),
        match_iou=float(_get(tree, "eval.match_iou", d.match_iou)),
        repetitions=int(_get(tree, "eval.repetitions", d.repetitions)),
        seed=int(seed if seed is not None else _get(tree, "eval.seed", d.seed)),
        score_mode=str(_get(tree, "eval.score_mode", d.score_mode)),
        eot=eval_eot)


def parse_init_spec(raw: str) -> InitSpec:
    """Init descriptors: random:<seed> | color:<r>,<g>,<b> | image:<path>."""
    kind, _, rest = raw.partition(":")
    kind = kind.strip().lower()
    if kind == "random":
        return Random(seed=int(rest or 0))
    if kind == "color":
        parts = [float(v) for v in rest.split(",")]
        if len(parts) != 3:
            raise ConfigError(f"color init needs r,g,b — got {raw!r}")
        return Constant(rgb=tuple(parts))
    if kind == "image":
        if not rest:
            raise ConfigError(f"image init needs a path — got {raw!r}")
        return FromImage(path=rest)
    raise ConfigError(f"unknown init spec {raw!r} "
                      f"(expected random:<seed>|color:r,g,b|image:<path>)")


def patch_size(tree: dict) -> tuple[int, int]:
    h = int(_get(tree, "patch.height", 300))
    w = int(_get(tree, "patch.width", 200))
    if h <= 0 or w <= 0 or not math.isfinite(h) or not math.isfinite(w):
        raise ConfigError(f"invalid patch size {h}x{w}")
    return h, w
