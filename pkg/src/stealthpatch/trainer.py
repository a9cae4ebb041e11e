"""Adam-driven patch optimization with checkpointing and bitwise resume.

Reproducibility model: every random stream is derived statelessly from
(seed, epoch, scene index), so a resumed run replays exactly the draws an
uninterrupted run would have made. Checkpoints pair the 16-bit PNG + JSON
sidecar with a .state.npz holding exact float64 pixels and optimizer
moments; the PNG is for humans, the npz is what resume actually reads.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import DEFAULT_ASPECT, Patch, SceneSet, SeedableRng, save_patch_checkpoint
from .detector import decode_grid
from .losses import LossWeights, default_palette, total_objective
from .transforms import DTYPE, EotConfig, batch_apply, resize_bilinear

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "detection", "tv", "nps", "disappear", "total", "seconds")


@dataclass
class AdamParams:
    step_size: float = 0.03
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.5
    decay_every: int = 50

    def to_dict(self):
        return {"step_size": self.step_size, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps,
                "decay": self.decay, "decay_every": self.decay_every}


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 8
    adam: AdamParams = field(default_factory=AdamParams)
    stop_threshold: float = 0.0
    seed: int = 0
    eot: EotConfig = field(default_factory=EotConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    score_mode: str = "product"
    single_thread: bool = True

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.adam.step_size < 0:
            raise ValueError(f"step_size must be >= 0, got {self.adam.step_size}")
        if not (0 <= self.adam.beta1 < 1 and 0 <= self.adam.beta2 < 1):
            raise ValueError("beta1/beta2 must lie in [0, 1)")
        if self.checkpoint_every > 0 and not self.checkpoint_dir:
            raise ValueError("checkpoint_every > 0 requires checkpoint_dir")
        self.eot.validate(require_enabled=False)

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size,
                "adam": self.adam.to_dict(), "stop_threshold": self.stop_threshold,
                "seed": self.seed, "eot": self.eot.to_dict(),
                "weights": self.weights.to_dict(),
                "checkpoint_every": self.checkpoint_every,
                "score_mode": self.score_mode}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(epochs=int(d["epochs"]), batch_size=int(d["batch_size"]),
                   adam=AdamParams(**d["adam"]),
                   stop_threshold=float(d["stop_threshold"]), seed=int(d["seed"]),
                   eot=EotConfig.from_dict(d["eot"]),
                   weights=LossWeights(**d["weights"]),
                   checkpoint_every=int(d.get("checkpoint_every", 0)),
                   score_mode=d.get("score_mode", "product"))


def config_hash(cfg: TrainConfig) -> str:
    payload = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


def corpus_hash(scenes: SceneSet) -> str:
    h = hashlib.sha256()
    for scene in scenes:
        h.update(scene.id.encode())
        h.update(np.ascontiguousarray(scene.image).tobytes())
        for b in scene.person_boxes:
            h.update(f"{b.label}:{b.cx!r}:{b.cy!r}:{b.w!r}:{b.h!r}".encode())
    return h.hexdigest()[:16]


@dataclass
class EpochRecord:
    epoch: int
    detection: float
    tv: float
    nps: float
    disappear: float
    total: float
    seconds: float
    rng_key: int

    def row(self):
        return [self.epoch, self.detection, self.tv, self.nps,
                self.disappear, self.total, self.seconds]


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    final_patch: Patch | None = None
    stopped_early: bool = False

    def totals(self) -> list[float]:
        return [r.total for r in self.records]

    def write_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(HISTORY_COLUMNS)
            for rec in self.records:
                writer.writerow(rec.row())


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def _forward_grid(detector, image: torch.Tensor):
    size = detector.descriptor.input_size
    if image.shape[0] != size or image.shape[1] != size:
        image = resize_bilinear(image, size, size)
    return decode_grid(detector.forward(image))


def _save_checkpoint(ckpt_dir: Path, name: str, pixels: np.ndarray, aspect: float,
                     m: np.ndarray, v: np.ndarray, t_step: int, epoch: int,
                     objective: float, cfg: TrainConfig, corpus: str,
                     history: list[EpochRecord]) -> None:
    base = ckpt_dir / name
    meta = {"seed": cfg.seed, "epoch": epoch, "objective": objective,
            "config_hash": config_hash(cfg), "corpus_hash": corpus,
            "config": cfg.to_dict()}
    save_patch_checkpoint(Patch(np.clip(pixels, 0, 1), aspect_hint=aspect), base, meta)
    hist = np.array([[r.epoch, r.detection, r.tv, r.nps, r.disappear, r.total,
                      r.seconds] for r in history], dtype=np.float64)
    keys = np.array([r.rng_key for r in history], dtype=np.uint64)
    np.savez(str(base) + ".state.npz", pixels=pixels, m=m, v=v,
             t_step=np.int64(t_step), epoch=np.int64(epoch),
             history=hist, rng_keys=keys)


def _history_from_arrays(hist: np.ndarray, keys: np.ndarray) -> list[EpochRecord]:
    records = []
    for row, key in zip(hist, keys):
        records.append(EpochRecord(epoch=int(row[0]), detection=row[1], tv=row[2],
                                   nps=row[3], disappear=row[4], total=row[5],
                                   seconds=row[6], rng_key=int(key)))
    return records


def _run(pixels: np.ndarray, aspect: float, train_set: SceneSet, detector,
         cfg: TrainConfig, palette, start_epoch: int,
         m: np.ndarray, v: np.ndarray, t_step: int,
         history: list[EpochRecord]) -> tuple[Patch, TrainHistory]:
    if cfg.single_thread:
        torch.set_num_threads(1)
    scenes = train_set.scenes
    n = len(scenes)
    person_idx = detector.descriptor.person_class_index

    patch_t = torch.as_tensor(pixels.copy(), dtype=DTYPE).requires_grad_(True)
    m_t = torch.as_tensor(m.copy(), dtype=DTYPE)
    v_t = torch.as_tensor(v.copy(), dtype=DTYPE)
    root = SeedableRng(cfg.seed)
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    stopped = False

    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        epoch_rng = root.child(epoch)
        order = epoch_rng.child(0).shuffle(list(range(n)))
        lr = cfg.adam.step_size * cfg.adam.decay ** (epoch // cfg.adam.decay_every)
        sums = np.zeros(4)

        for batch_idx, chunk in enumerate(_chunks(order, cfg.batch_size)):
            chunk = sorted(chunk, key=lambda i: scenes[i].id)
            subset = SceneSet([scenes[i] for i in chunk], train_set.split_tag)
            result = batch_apply(subset, patch_t, cfg.eot,
                                 rng=epoch_rng, scene_keys=[i + 1 for i in chunk],
                                 aspect=aspect)
            try:
                grids = [_forward_grid(detector, img) for img in result.images]
                breakdown = total_objective(patch_t, grids, result.regions, palette,
                                            cfg.weights, person_idx, cfg.score_mode)
            except ValueError as exc:
                raise RuntimeError(f"non-finite loss at epoch {epoch} "
                                   f"batch {batch_idx}: {exc}") from exc
            if not np.isfinite(breakdown.total):
                raise RuntimeError(f"non-finite loss at epoch {epoch} "
                                   f"batch {batch_idx}: {breakdown.to_dict()}")
            if patch_t.grad is not None:
                patch_t.grad.zero_()
            breakdown.tensor.backward()

            with torch.no_grad():
                if lr > 0:
                    t_step += 1
                    g = patch_t.grad
                    m_t.mul_(cfg.adam.beta1).add_(g, alpha=1 - cfg.adam.beta1)
                    v_t.mul_(cfg.adam.beta2).addcmul_(g, g, value=1 - cfg.adam.beta2)
                    m_hat = m_t / (1 - cfg.adam.beta1 ** t_step)
                    v_hat = v_t / (1 - cfg.adam.beta2 ** t_step)
                    patch_t -= lr * m_hat / (torch.sqrt(v_hat) + cfg.adam.eps)
                patch_t.clamp_(0.0, 1.0)

            k = len(chunk)
            sums += k * np.array([breakdown.detection, breakdown.tv,
                                  breakdown.nps, breakdown.disappear])

        det_m, tv_m, nps_m, dis_m = sums / n
        total_m = (det_m + cfg.weights.lambda_tv * tv_m
                   + cfg.weights.lambda_nps * nps_m
                   + cfg.weights.mu_disappear * dis_m)
        rec = EpochRecord(epoch=epoch, detection=det_m, tv=tv_m, nps=nps_m,
                          disappear=dis_m, total=total_m,
                          seconds=time.perf_counter() - t0, rng_key=epoch_rng.seed)
        history.append(rec)
        logger.info("epoch %d: total %.4f detection %.4f lr %.4g",
                    epoch, total_m, det_m, lr)

        done = epoch + 1 >= cfg.epochs
        if cfg.stop_threshold > 0 and total_m < cfg.stop_threshold:
            logger.info("early stop: epoch-mean total %.4f < %.4f",
                        total_m, cfg.stop_threshold)
            stopped = True
        if ckpt_dir and (stopped or done or
                         (cfg.checkpoint_every > 0
                          and (epoch + 1) % cfg.checkpoint_every == 0)):
            name = "final" if (stopped or done) else f"epoch{epoch + 1:04d}"
            _save_checkpoint(ckpt_dir, name, patch_t.detach().numpy().copy(), aspect,
                             m_t.numpy().copy(), v_t.numpy().copy(), t_step,
                             epoch + 1, total_m, cfg, corpus_hash(train_set), history)
        if stopped:
            break

    final = Patch(np.clip(patch_t.detach().numpy(), 0.0, 1.0), aspect_hint=aspect)
    hist = TrainHistory(records=history, final_patch=final, stopped_early=stopped)
    if ckpt_dir:
        hist.write_csv(ckpt_dir / "history.csv")
    return final, hist


def train(init_patch: Patch, train_set: SceneSet, detector, cfg: TrainConfig,
          palette=None) -> tuple[Patch, TrainHistory]:
    """Optimize a patch against the detector over the training corpus."""
    cfg.validate()
    if not any(b.label == detector.descriptor.person_class_index
               for s in train_set for b in s.person_boxes):
        raise ValueError("training set contains no person boxes")
    palette = palette or default_palette()
    pixels = np.asarray(init_patch.pixels, dtype=np.float64)
    return _run(pixels, init_patch.aspect_hint, train_set, detector, cfg, palette,
                start_epoch=0, m=np.zeros_like(pixels), v=np.zeros_like(pixels),
                t_step=0, history=[])


def resume(checkpoint_path: str | Path, train_set: SceneSet, detector,
           cfg: TrainConfig | None = None, palette=None) -> tuple[Patch, TrainHistory]:
    """Continue training from a checkpoint; the concatenated history matches
    an uninterrupted run bitwise (loss columns; wall times differ)."""
    s = str(checkpoint_path)
    for suf in (".state.npz", ".meta.json", ".png"):
        if s.endswith(suf):
            s = s[:-len(suf)]
            break
    base = Path(s)
    meta_path = base.with_suffix(".meta.json")
    state_path = Path(str(base) + ".state.npz")
    if not meta_path.is_file() or not state_path.is_file():
        raise FileNotFoundError(f"incomplete checkpoint at {base}(.meta.json/.state.npz)")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))

    stored_cfg = TrainConfig.from_dict(meta["config"])
    if cfg is not None:
        if config_hash(cfg) != meta["config_hash"]:
            raise ValueError("config hash mismatch: checkpoint was written with a "
                             "different configuration")
    else:
        cfg = stored_cfg
    if corpus_hash(train_set) != meta["corpus_hash"]:
        raise ValueError("corpus hash mismatch: training set differs from the one "
                         "the checkpoint was trained on")

    with np.load(state_path) as st:
        pixels = st["pixels"].astype(np.float64)
        m = st["m"].astype(np.float64)
        v = st["v"].astype(np.float64)
        t_step = int(st["t_step"])
        epoch = int(st["epoch"])
        history = _history_from_arrays(st["history"], st["rng_keys"])

    aspect = float(meta.get("aspect_hint", DEFAULT_ASPECT))
    if epoch >= cfg.epochs:
        final = Patch(np.clip(pixels, 0, 1), aspect_hint=aspect)
        return final, TrainHistory(records=history, final_patch=final)
    palette = palette or default_palette()
    return _run(pixels, aspect, train_set, detector, cfg, palette,
                start_epoch=epoch, m=m, v=v, t_step=t_step, history=history)
