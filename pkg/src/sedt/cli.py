"""Command line entry points: generate-data, train, eval, predict, sweep.

The train/eval/sweep commands read a flat JSON config whose keys mirror
the TrainConfig / ModelConfig / LossWeights / FineTuneConfig /
FeatureConfig field names, plus ``train_manifest`` / ``val_manifest``
paths and an optional explicit ``classes`` list.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import click
import numpy as np

from .data import (
    ClipExample,
    ManifestRecord,
    SyntheticSceneSpec,
    EventTemplate,
    default_scene_spec,
    generate_scene,
    load_manifest,
    read_wav,
    save_manifest,
    weaken,
    write_wav,
)
from .features import FeatureConfig, compute_normalization_stats, log_mel, normalize
from .geometry import LabelVocabulary, ValidationError
from .losses import LossWeights
from .matching import FineTuneConfig
from .metrics import format_report_table
from .model import BackboneStage, ModelConfig
from .postprocess import DecisionConfig, write_predictions
from .training import (
    FINETUNE,
    LEARNING,
    Checkpoint,
    TrainConfig,
    evaluate_checkpoint,
    examples_from_records,
    load_checkpoint,
    predict_records,
    save_checkpoint,
    sweep,
    train_stage,
    write_sweep_csv,
)


@dataclass
class ConfigBundle:
    train: TrainConfig
    model_kwargs: dict
    features: FeatureConfig
    train_manifest: Optional[str]
    val_manifest: Optional[str]
    classes: Optional[List[str]]
    normalize_features: bool


def _pick(flat: dict, cls) -> dict:
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in flat.items() if k in names}


def parse_config(flat: dict) -> ConfigBundle:
    weights = LossWeights(**_pick(flat, LossWeights))
    finetune = FineTuneConfig(
        epsilon=flat.get("epsilon", 1.0),
        alpha=flat.get("alpha", 1.0),
        seed=flat.get("seed", 0),
    )
    train_kwargs = _pick(flat, TrainConfig)
    train_kwargs.pop("weights", None)
    train_kwargs.pop("finetune", None)
    train = TrainConfig(**train_kwargs, weights=weights, finetune=finetune)
    model_kwargs = _pick(flat, ModelConfig)
    model_kwargs.pop("n_classes", None)
    if "backbone" in model_kwargs:
        model_kwargs["backbone"] = tuple(
            BackboneStage(*stage) for stage in model_kwargs["backbone"]
        )
    features = FeatureConfig(**_pick(flat, FeatureConfig))
    return ConfigBundle(
        train=train,
        model_kwargs=model_kwargs,
        features=features,
        train_manifest=flat.get("train_manifest"),
        val_manifest=flat.get("val_manifest"),
        classes=flat.get("classes"),
        normalize_features=flat.get("normalize", True),
    )


def load_config(path: str) -> ConfigBundle:
    return parse_config(json.loads(Path(path).read_text()))


def _vocabulary(bundle: ConfigBundle, records: Sequence[ManifestRecord]) -> LabelVocabulary:
    if bundle.classes:
        return LabelVocabulary(tuple(bundle.classes))
    labels = set()
    for rec in records:
        labels.update(ev.label for ev in rec.annotation.events)
        labels.update(rec.annotation.weak_tags)
    if not labels:
        raise ValidationError("no class names in manifest; set 'classes' in the config")
    return LabelVocabulary(tuple(sorted(labels)))


def _scene_from_json(raw: dict) -> SyntheticSceneSpec:
    templates = tuple(
        EventTemplate(
            label=t["label"],
            kind=t["kind"],
            duration_range_s=tuple(t["duration_range_s"]),
            freq_range_hz=tuple(t["freq_range_hz"]),
            chirp_down=t.get("chirp_down", False),
        )
        for t in raw["templates"]
    )
    kwargs = {
        k: raw[k]
        for k in ("events_per_clip", "snr_db", "clip_len_s", "sample_rate", "seed")
        if k in raw
    }
    for key in ("events_per_clip", "snr_db"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return SyntheticSceneSpec(templates=templates, **kwargs)


def _parse_fusion(value: str) -> Optional[int]:
    if value == "none":
        return None
    return int(value)


@click.group()
def main() -> None:
    """Event-based sound event detection pipeline."""


@main.command("generate-data")
@click.option("--spec", "spec_path", type=click.Path(exists=True), default=None,
              help="Scene spec JSON; defaults to the built-in five-class scene.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--num-clips", type=int, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--weak-fraction", type=float, default=0.0, show_default=True,
              help="Fraction of clips stored with weak labels only.")
def generate_data_cmd(spec_path, out_dir, num_clips, seed, weak_fraction):
    """Render a synthetic dataset: WAV clips plus a JSONL manifest."""
    if spec_path is not None:
        scene = _scene_from_json(json.loads(Path(spec_path).read_text()))
        scene = SyntheticSceneSpec(
            templates=scene.templates,
            events_per_clip=scene.events_per_clip,
            snr_db=scene.snr_db,
            clip_len_s=scene.clip_len_s,
            sample_rate=scene.sample_rate,
            seed=seed,
        )
    else:
        scene = default_scene_spec(seed=seed)
    out = Path(out_dir)
    audio_dir = out / "audio"
    records = []
    n_weak = int(round(weak_fraction * num_clips))
    for i in range(num_clips):
        wav, ann = generate_scene(scene, i)
        if i < n_weak:
            ann = weaken(ann)
        path = audio_dir / f"{ann.clip_id}.wav"
        write_wav(path, wav)
        records.append(ManifestRecord(annotation=ann, audio=str(path)))
    manifest_path = out / "manifest.jsonl"
    save_manifest(records, manifest_path)
    click.echo(f"wrote {num_clips} clips ({n_weak} weak) to {manifest_path}")


def _load_examples(
    bundle: ConfigBundle, manifest: str, vocab: LabelVocabulary, stats=None
) -> List[ClipExample]:
    records = load_manifest(manifest, vocab)
    return examples_from_records(records, bundle.features, stats=stats)


@main.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--stage", type=click.Choice([LEARNING, FINETUNE]), default=LEARNING,
              show_default=True)
@click.option("--from", "from_ckpt", type=click.Path(exists=False), default=None,
              help="Checkpoint to fine-tune or resume from.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
def train_cmd(config_path, stage, from_ckpt, out_dir):
    """Run one training stage and save the selected checkpoint."""
    bundle = load_config(config_path)
    if bundle.train_manifest is None:
        raise click.UsageError("config must set 'train_manifest'")
    init = load_checkpoint(from_ckpt) if from_ckpt else None
    records = load_manifest(bundle.train_manifest)
    vocab = init.vocab if init is not None else _vocabulary(bundle, records)
    raw_examples = _load_examples(bundle, bundle.train_manifest, vocab)
    stats = None
    if bundle.normalize_features:
        if init is not None and init.norm_stats is not None:
            stats = init.norm_stats
        else:
            stats = compute_normalization_stats([ex.features for ex in raw_examples])
        raw_examples = [
            ClipExample(features=normalize(ex.features, stats), annotation=ex.annotation)
            for ex in raw_examples
        ]
    val_examples = None
    if bundle.val_manifest:
        val_examples = _load_examples(bundle, bundle.val_manifest, vocab, stats=stats)

    model_config = ModelConfig(n_classes=vocab.size, **bundle.model_kwargs)
    out = Path(out_dir)
    ckpt = train_stage(
        stage,
        bundle.train,
        model_config,
        vocab,
        raw_examples,
        val_examples=val_examples,
        init=init,
        log_path=out / "train_log.jsonl",
        norm_stats=stats,
        feature_config=bundle.features,
    )
    path = save_checkpoint(ckpt, out / f"{stage}.pt")
    best = f", best val Eb {ckpt.best_metric:.4f}" if ckpt.best_metric is not None else ""
    click.echo(f"saved {path} after {ckpt.epoch} epochs{best}")


@main.command("eval")
@click.option("--ckpt", type=click.Path(exists=True), required=True)
@click.option("--manifest", type=click.Path(exists=True), required=True)
@click.option("--fusion", type=click.Choice(["none", "1", "2", "3"]), default="none",
              show_default=True)
@click.option("--report", "report_path", type=click.Path(), default=None)
def eval_cmd(ckpt, manifest, fusion, report_path):
    """Score a checkpoint on a manifest; prints Eb / Sb / At macro F1."""
    checkpoint = load_checkpoint(ckpt)
    records = load_manifest(manifest, checkpoint.vocab)
    features = checkpoint.feature_config or FeatureConfig()
    examples = examples_from_records(records, features, stats=checkpoint.norm_stats)
    decision = DecisionConfig(fusion=_parse_fusion(fusion))
    eb, sb, at = evaluate_checkpoint(checkpoint, examples, decision)
    click.echo(format_report_table(eb, sb, at))
    if report_path:
        report = {
            "fusion": fusion,
            "event_based": eb.to_dict(),
            "segment_based": sb.to_dict(),
            "tagging": at.to_dict(),
        }
        Path(report_path).parent.mkdir(parents=True, exist_ok=True)
        Path(report_path).write_text(json.dumps(report, indent=2))
        click.echo(f"report written to {report_path}")


@main.command("predict")
@click.option("--ckpt", type=click.Path(exists=True), required=True)
@click.option("--input", "input_path", type=click.Path(exists=True), required=True,
              help="A WAV file or a JSONL manifest.")
@click.option("--fusion", type=click.Choice(["none", "1", "2", "3"]), default="none",
              show_default=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def predict_cmd(ckpt, input_path, fusion, out_path):
    """Decode events for audio and write a JSONL prediction file."""
    checkpoint = load_checkpoint(ckpt)
    features = checkpoint.feature_config or FeatureConfig()
    input_path = Path(input_path)
    if input_path.suffix == ".wav":
        wav = read_wav(input_path)
        spec = log_mel(wav, features)
        if checkpoint.norm_stats is not None:
            spec = normalize(spec, checkpoint.norm_stats)
        from .data import ClipAnnotation

        ann = ClipAnnotation(clip_id=input_path.stem, clip_len_s=wav.duration_s)
        examples = [ClipExample(features=spec, annotation=ann)]
    else:
        records = load_manifest(input_path, checkpoint.vocab)
        examples = examples_from_records(records, features, stats=checkpoint.norm_stats)
    decision = DecisionConfig(fusion=_parse_fusion(fusion))
    records_out = predict_records(checkpoint, examples, decision)
    write_predictions(records_out, out_path)
    click.echo(f"wrote {len(records_out)} prediction records to {out_path}")


@main.command("sweep")
@click.option("--ckpt", type=click.Path(exists=True), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--epsilons", type=str, required=True, help="Comma-separated values.")
@click.option("--alphas", type=str, required=True,
              help="Comma-separated values; 'all' retains every admitted match.")
@click.option("--strategies", type=str, default="none", show_default=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def sweep_cmd(ckpt, config_path, epsilons, alphas, strategies, out_path):
    """Fine-tune per grid point from one base checkpoint and tabulate scores."""
    bundle = load_config(config_path)
    if bundle.train_manifest is None:
        raise click.UsageError("config must set 'train_manifest'")
    base = load_checkpoint(ckpt)
    train_examples = _load_examples(
        bundle, bundle.train_manifest, base.vocab, stats=base.norm_stats
    )
    eval_manifest = bundle.val_manifest or bundle.train_manifest
    eval_examples = _load_examples(bundle, eval_manifest, base.vocab, stats=base.norm_stats)
    eps_values = [float(x) for x in epsilons.split(",") if x]
    alpha_values = [x if x == "all" else float(x) for x in alphas.split(",") if x]
    strategy_values = [_parse_fusion(s) for s in strategies.split(",") if s]
    rows = sweep(
        base,
        bundle.train,
        train_examples,
        eval_examples,
        eps_values,
        alpha_values,
        strategy_values,
    )
    write_sweep_csv(rows, out_path)
    click.echo(f"wrote {len(rows)} rows to {out_path}")


if __name__ == "__main__":
    main()
