"""Event-based sound event detection with a 1D detection transformer."""

from .geometry import (
    EventInstance,
    LabelVocabulary,
    Segment,
    ValidationError,
    boundary_to_segment,
    interval_giou,
    interval_iou,
    segment_to_boundary,
)
from .features import FeatureConfig, LogMelSpectrogram, Waveform, log_mel
from .data import (
    Batch,
    ClipAnnotation,
    ClipExample,
    SyntheticSceneSpec,
    TimedEvent,
    default_scene_spec,
    generate_scene,
    load_manifest,
    make_batches,
    save_manifest,
    weaken,
)
from .matching import (
    Assignment,
    FineTuneConfig,
    OneToManyAssignment,
    hungarian,
    match_cost,
    one_to_many,
)
from .model import ModelConfig, ModelOutput, SoundEventTransformer, positional_encoding
from .losses import LossBreakdown, LossWeights, mixed_batch_loss
from .postprocess import DecisionConfig, EventPrediction, de_overlap, decode, fuse
from .metrics import (
    EventBasedConfig,
    MetricsReport,
    event_based_f1,
    segment_based_f1,
    tagging_macro_f1,
)
from .training import (
    Checkpoint,
    TrainConfig,
    evaluate_checkpoint,
    load_checkpoint,
    lr_schedule,
    save_checkpoint,
    sweep,
    train_stage,
)

__version__ = "0.1.0"
