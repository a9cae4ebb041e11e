"""stealthpatch: adversarial patch synthesis and evaluation against
grid-based person detectors."""

from .core import (Constant, FromImage, Palette, Patch, PersonBox, Random,
                   Scene, SceneSet, SeedableRng, clamp_unit, load_scene_set,
                   new_patch)
from .detector import (DetectionGrid, DetectorDescriptor, RawGridOutput,
                       decode_grid, detect_persons, extract_person_score,
                       load_toy_detector, toy_detector_forward)
from .losses import (LossBreakdown, LossWeights, default_palette,
                     detection_loss, disappearance_loss, nps_loss,
                     total_objective, tv_loss)
from .trainer import TrainConfig, TrainHistory, resume, train
from .transforms import (EotConfig, TransformParams, apply_3d,
                         apply_conventional, batch_apply, place_patch,
                         sample_transform_params)
from .evaluation import (EvalConfig, EvalOutcome, SweepEntry, SweepSpec,
                         attack_success_rate, digital_eval, emit_report,
                         photo_eval, sweep)

__version__ = "0.1.0"
