"""Two-stage training loop, evaluation protocol, and parameter sweeps.

The learning stage trains with one-to-one Hungarian matching; the
fine-tuning stage restarts from a learning-stage checkpoint at a lower
rate and expands matches one-to-many. All shuffling and sampling streams
are derived statelessly from (seed, epoch, batch, item), so a run is a
pure function of its config and checkpoints can resume a trajectory
exactly.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .data import (
    STRONG,
    Batch,
    ClipExample,
    ManifestRecord,
    collate,
    make_batches,
)
from .features import (
    FeatureConfig,
    NormalizationStats,
    load_features,
    log_mel,
    normalize,
)
from .geometry import LabelVocabulary, ValidationError
from .losses import LossBreakdown, LossWeights, mixed_batch_loss
from .matching import FineTuneConfig
from .metrics import (
    EventBasedConfig,
    MetricsReport,
    event_based_f1,
    segment_based_f1,
    tagging_macro_f1,
)
from .model import ModelConfig, ModelOutput, SoundEventTransformer
from .postprocess import DecisionConfig, decode_clip, prediction_record, predictions_to_timed_events

LEARNING = "learning"
FINETUNE = "finetune"


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs_learning: int = 200
    epochs_finetune: int = 50
    lr_learning: float = 3e-4
    lr_finetune: float = 3e-5
    epochs_drop: Optional[int] = None  # None = constant rate over the stage
    weight_decay: float = 1e-4
    grad_clip: float = 0.1
    seed: int = 0
    val_every: int = 20
    num_threads: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    finetune: FineTuneConfig = field(default_factory=FineTuneConfig)

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValidationError("batch size must be at least 1")
        if self.epochs_learning < 0 or self.epochs_finetune < 0:
            raise ValidationError("epoch counts must be non-negative")
        if self.lr_learning <= 0 or self.lr_finetune <= 0:
            raise ValidationError("learning rates must be positive")
        if self.epochs_drop is not None and self.epochs_drop <= 0:
            raise ValidationError("epochs_drop must be positive when set")

    def stage_epochs(self, stage: str) -> int:
        return self.epochs_learning if stage == LEARNING else self.epochs_finetune

    def stage_lr(self, stage: str) -> float:
        return self.lr_learning if stage == LEARNING else self.lr_finetune


def lr_schedule(epoch: int, eta0: float, epochs_drop: int) -> float:
    """Step decay: eta0 scaled by 0.1 for every completed epochs_drop span."""
    if epochs_drop <= 0:
        raise ValidationError("epochs_drop must be positive")
    if epoch < 0:
        raise ValidationError("epoch must be non-negative")
    return 0.1 ** (epoch // epochs_drop) * eta0


@dataclass
class Checkpoint:
    """Model parameters plus everything needed to evaluate or resume."""

    model_config: ModelConfig
    vocab: LabelVocabulary
    stage: str
    epoch: int
    params: Dict[str, torch.Tensor]
    optimizer_state: Optional[dict] = None
    torch_rng_state: Optional[torch.Tensor] = None
    best_metric: Optional[float] = None
    norm_stats: Optional[NormalizationStats] = None
    feature_config: Optional[FeatureConfig] = None
    last_params: Optional[Dict[str, torch.Tensor]] = None

    def build_model(self, use_last: bool = False) -> SoundEventTransformer:
        model = SoundEventTransformer(self.model_config)
        params = self.last_params if use_last and self.last_params else self.params
        dtype = next(iter(params.values())).dtype
        model.to(dtype)
        model.load_state_dict(params)
        return model


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    """Write <path>.pt (tensors) and <path>.json (readable metadata)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "params": ckpt.params,
        "optimizer_state": ckpt.optimizer_state,
        "torch_rng_state": ckpt.torch_rng_state,
        "last_params": ckpt.last_params,
    }
    pt_path = path if path.suffix == ".pt" else path.with_suffix(".pt")
    torch.save(blob, pt_path)
    meta = {
        "model_config": ckpt.model_config.to_dict(),
        "classes": list(ckpt.vocab.classes),
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "best_metric": ckpt.best_metric,
        "rng_state": (
            ckpt.torch_rng_state.numpy().tobytes().hex()
            if ckpt.torch_rng_state is not None
            else None
        ),
        "norm_stats": ckpt.norm_stats.to_dict() if ckpt.norm_stats else None,
        "feature_config": (
            _feature_config_to_dict(ckpt.feature_config) if ckpt.feature_config else None
        ),
    }
    pt_path.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    return pt_path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    pt_path = path if path.suffix == ".pt" else path.with_suffix(".pt")
    blob = torch.load(pt_path, weights_only=True)
    meta = json.loads(pt_path.with_suffix(".json").read_text())
    return Checkpoint(
        model_config=ModelConfig.from_dict(meta["model_config"]),
        vocab=LabelVocabulary(tuple(meta["classes"])),
        stage=meta["stage"],
        epoch=meta["epoch"],
        params=blob["params"],
        optimizer_state=blob.get("optimizer_state"),
        torch_rng_state=blob.get("torch_rng_state"),
        best_metric=meta.get("best_metric"),
        norm_stats=(
            NormalizationStats.from_dict(meta["norm_stats"])
            if meta.get("norm_stats")
            else None
        ),
        feature_config=(
            _feature_config_from_dict(meta["feature_config"])
            if meta.get("feature_config")
            else None
        ),
        last_params=blob.get("last_params"),
    )


def _feature_config_to_dict(cfg: FeatureConfig) -> dict:
    return {
        "sample_rate": cfg.sample_rate,
        "win_len": cfg.win_len,
        "hop": cfg.hop,
        "n_mels": cfg.n_mels,
        "fmin": cfg.fmin,
        "fmax": cfg.fmax,
        "window": cfg.window,
    }


def _feature_config_from_dict(d: dict) -> FeatureConfig:
    return FeatureConfig(**d)


class _JsonlLogger:
    def __init__(self, path: Optional[Union[str, Path]]):
        self._fh = None
        if path is not None:
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = path.open("w")

    def write(self, record: dict) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def train_stage(
    stage: str,
    config: TrainConfig,
    model_config: ModelConfig,
    vocab: LabelVocabulary,
    train_examples: Sequence[ClipExample],
    val_examples: Optional[Sequence[ClipExample]] = None,
    init: Optional[Checkpoint] = None,
    log_path: Optional[Union[str, Path]] = None,
    norm_stats: Optional[NormalizationStats] = None,
    feature_config: Optional[FeatureConfig] = None,
) -> Checkpoint:
    """Run one training stage and return the selected checkpoint.

    The fine-tuning stage requires a starting checkpoint. When validation
    examples are given, the checkpoint carrying the best event-based macro
    F1 (decoded without fusion) is returned; its ``last_params`` and
    optimizer/rng state always reflect the final epoch so a run can resume.
    """
    if stage not in (LEARNING, FINETUNE):
        raise ValidationError(f"unknown stage {stage!r}")
    if stage == FINETUNE and init is None:
        raise ValidationError("fine-tuning requires a learning-stage checkpoint")
    torch.set_num_threads(max(1, config.num_threads))
    torch.manual_seed(config.seed)

    model = SoundEventTransformer(model_config)
    start_epoch = 0
    resuming = init is not None and init.stage == stage
    if init is not None:
        model.load_state_dict(init.last_params or init.params)
        if resuming:
            start_epoch = init.epoch
            if init.torch_rng_state is not None:
                torch.set_rng_state(init.torch_rng_state)
        if norm_stats is None:
            norm_stats = init.norm_stats
        if feature_config is None:
            feature_config = init.feature_config

    n_epochs = config.stage_epochs(stage)
    eta0 = config.stage_lr(stage)
    drop = config.epochs_drop if config.epochs_drop is not None else max(1, n_epochs)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=eta0, weight_decay=config.weight_decay
    )
    if resuming and init.optimizer_state is not None:
        optimizer.load_state_dict(init.optimizer_state)

    finetune_cfg = config.finetune if stage == FINETUNE else None
    stage_ordinal = 0 if stage == LEARNING else 1
    logger = _JsonlLogger(log_path)
    best_metric: Optional[float] = None
    best_params: Optional[Dict[str, torch.Tensor]] = None

    try:
        for epoch in range(start_epoch, n_epochs):
            eta = lr_schedule(epoch, eta0, drop)
            for group in optimizer.param_groups:
                group["lr"] = eta
            model.train()
            batches = make_batches(
                train_examples,
                config.batch_size,
                shuffle_seed=[config.seed, stage_ordinal, epoch],
            )
            for batch_idx, batch in enumerate(batches):
                output = model(batch.specs, batch.pad_mask)
                if not (
                    torch.isfinite(output.boundaries).all()
                    and torch.isfinite(output.class_probs).all()
                    and torch.isfinite(output.tag_probs).all()
                ):
                    raise DivergenceError(
                        f"non-finite model output at stage={stage} epoch={epoch} "
                        f"step={batch_idx}"
                    )

                def rng_for_clip(b: int) -> np.random.Generator:
                    return np.random.default_rng(
                        [config.finetune.seed, epoch, batch_idx, b]
                    )

                loss, bd = mixed_batch_loss(
                    output,
                    batch.annotations,
                    vocab,
                    config.weights,
                    finetune=finetune_cfg,
                    rng_for_clip=rng_for_clip if finetune_cfg else None,
                )
                if not math.isfinite(float(loss.detach())):
                    raise DivergenceError(
                        f"non-finite loss at stage={stage} epoch={epoch} "
                        f"step={batch_idx}: {bd.to_dict()}"
                    )
                optimizer.zero_grad()
                loss.backward()
                if config.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                optimizer.step()
                logger.write(
                    {"epoch": epoch, "step": batch_idx, "lr": eta, **bd.to_dict()}
                )
            run_validation = val_examples is not None and (
                (epoch + 1) % config.val_every == 0 or epoch == n_epochs - 1
            )
            if run_validation:
                eb, _, _ = evaluate_model(
                    model,
                    val_examples,
                    vocab,
                    DecisionConfig(fusion=None),
                    batch_size=config.batch_size,
                )
                if best_metric is None or eb.macro_f1 > best_metric:
                    best_metric = eb.macro_f1
                    best_params = copy.deepcopy(model.state_dict())
    finally:
        logger.close()

    last_params = copy.deepcopy(model.state_dict())
    return Checkpoint(
        model_config=model_config,
        vocab=vocab,
        stage=stage,
        epoch=n_epochs,
        params=best_params if best_params is not None else last_params,
        optimizer_state=optimizer.state_dict(),
        torch_rng_state=torch.get_rng_state(),
        best_metric=best_metric,
        norm_stats=norm_stats,
        feature_config=feature_config,
        last_params=last_params,
    )


# ---------------------------------------------------------------------------
# Evaluation and prediction


def forward_examples(
    model: SoundEventTransformer,
    examples: Sequence[ClipExample],
    batch_size: int = 16,
) -> List[Tuple[ClipExample, np.ndarray, np.ndarray, np.ndarray]]:
    """Final-block (boundaries, class probs, tag probs) per clip, no grad."""
    model.eval()
    dtype = next(model.parameters()).dtype
    results = []
    with torch.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start : start + batch_size]
            batch = collate(chunk, dtype=dtype)
            out = model(batch.specs, batch.pad_mask)
            for i, ex in enumerate(chunk):
                results.append(
                    (
                        ex,
                        out.boundaries[-1, i].numpy(),
                        out.class_probs[-1, i].numpy(),
                        out.tag_probs[i].numpy(),
                    )
                )
    return results


def evaluate_model(
    model: SoundEventTransformer,
    examples: Sequence[ClipExample],
    vocab: LabelVocabulary,
    decision: DecisionConfig = DecisionConfig(),
    batch_size: int = 16,
    event_cfg: EventBasedConfig = EventBasedConfig(),
) -> Tuple[MetricsReport, MetricsReport, MetricsReport]:
    """Decode every clip and score it: (event-based, segment-based, tagging)."""
    preds_by_clip = {}
    refs_by_clip = {}
    clip_lens = {}
    tag_probs_by_clip = {}
    tag_refs_by_clip = {}
    for ex, boundaries, class_probs, tag_probs in forward_examples(
        model, examples, batch_size
    ):
        ann = ex.annotation
        events = decode_clip(boundaries, class_probs, tag_probs, ann.clip_len_s, decision)
        preds_by_clip[ann.clip_id] = predictions_to_timed_events(events, vocab)
        refs_by_clip[ann.clip_id] = list(ann.events)
        clip_lens[ann.clip_id] = ann.clip_len_s
        tag_probs_by_clip[ann.clip_id] = {
            vocab.name(c): float(p) for c, p in enumerate(tag_probs)
        }
        tag_refs_by_clip[ann.clip_id] = set(ann.weak_tags)
    eb = event_based_f1(preds_by_clip, refs_by_clip, event_cfg)
    sb = segment_based_f1(preds_by_clip, refs_by_clip, clip_lens)
    at = tagging_macro_f1(tag_probs_by_clip, tag_refs_by_clip, decision.tau_tag)
    return eb, sb, at


def evaluate_checkpoint(
    ckpt: Checkpoint,
    examples: Sequence[ClipExample],
    decision: DecisionConfig = DecisionConfig(),
    batch_size: int = 16,
) -> Tuple[MetricsReport, MetricsReport, MetricsReport]:
    for ex in examples:
        for ev in ex.annotation.events:
            if ev.label not in ckpt.vocab:
                raise ValidationError(
                    f"manifest label {ev.label!r} missing from checkpoint vocabulary"
                )
    model = ckpt.build_model()
    return evaluate_model(model, examples, ckpt.vocab, decision, batch_size)


def predict_records(
    ckpt: Checkpoint,
    examples: Sequence[ClipExample],
    decision: DecisionConfig = DecisionConfig(),
    batch_size: int = 16,
) -> List[dict]:
    """Decoded events and tag probabilities per clip, as exportable records."""
    model = ckpt.build_model()
    records = []
    for ex, boundaries, class_probs, tag_probs in forward_examples(
        model, examples, batch_size
    ):
        events = decode_clip(
            boundaries, class_probs, tag_probs, ex.annotation.clip_len_s, decision
        )
        records.append(
            prediction_record(ex.annotation.clip_id, events, tag_probs, ckpt.vocab)
        )
    return records


def count_decoded_events(
    ckpt: Checkpoint,
    examples: Sequence[ClipExample],
    decision: DecisionConfig = DecisionConfig(),
) -> int:
    return sum(len(rec["events"]) for rec in predict_records(ckpt, examples, decision))


# ---------------------------------------------------------------------------
# Sweeps


def sweep(
    base: Checkpoint,
    config: TrainConfig,
    train_examples: Sequence[ClipExample],
    eval_examples: Sequence[ClipExample],
    epsilons: Sequence[float],
    alphas: Sequence[Union[float, str]],
    strategies: Sequence[Optional[int]] = (None,),
    log_dir: Optional[Union[str, Path]] = None,
) -> List[dict]:
    """Fine-tune from the same base checkpoint at each (epsilon, alpha) point.

    Returns one row per (epsilon, alpha, strategy) with the three macro F1
    scores, in grid order.
    """
    rows = []
    for eps in epsilons:
        for alpha in alphas:
            ft = FineTuneConfig(epsilon=eps, alpha=alpha, seed=config.finetune.seed)
            cfg = replace(config, finetune=ft)
            log_path = None
            if log_dir is not None:
                log_path = Path(log_dir) / f"finetune_eps{eps}_alpha{alpha}.jsonl"
            ckpt = train_stage(
                FINETUNE,
                cfg,
                base.model_config,
                base.vocab,
                train_examples,
                init=base,
                log_path=log_path,
            )
            for strategy in strategies:
                eb, sb, at = evaluate_checkpoint(
                    ckpt, eval_examples, DecisionConfig(fusion=strategy)
                )
                rows.append(
                    {
                        "epsilon": eps,
                        "alpha": alpha,
                        "strategy": "none" if strategy is None else str(strategy),
                        "eb": eb.macro_f1,
                        "sb": sb.macro_f1,
                        "at": at.macro_f1,
                    }
                )
    return rows


def write_sweep_csv(rows: Sequence[dict], path: Union[str, Path]) -> None:
    import csv

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["epsilon", "alpha", "strategy", "eb", "sb", "at"]
        )
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Feature pipeline helpers


def examples_from_records(
    records: Sequence[ManifestRecord],
    feature_cfg: FeatureConfig,
    stats: Optional[NormalizationStats] = None,
    read_audio=None,
) -> List[ClipExample]:
    """Materialize features for manifest records from cache or audio."""
    from .data import read_wav  # local import to keep module load light

    reader = read_audio or read_wav
    examples = []
    for rec in records:
        if rec.features:
            spec = load_features(rec.features)
        elif rec.audio:
            spec = log_mel(reader(rec.audio), feature_cfg)
        else:
            raise ValidationError(
                f"record {rec.annotation.clip_id} has neither features nor audio"
            )
        if stats is not None:
            spec = normalize(spec, stats)
        examples.append(ClipExample(features=spec, annotation=rec.annotation))
    return examples
