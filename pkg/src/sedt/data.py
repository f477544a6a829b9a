"""Synthetic soundscapes with exact labels, manifest IO, and batching.

Clips are rendered by mixing parametric event sources (tones, chirps,
noise bursts) over a white-noise background. Every random draw comes from
a generator seeded by (scene seed, clip index), so a clip is a pure
function of the spec and its index and the annotation matches the audio
exactly.
"""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .features import LogMelSpectrogram, Waveform
from .geometry import EventInstance, LabelVocabulary, Segment, ValidationError, segment_to_boundary

BACKGROUND_RMS = 0.05
FADE_S = 0.01

STRONG = "strong"
WEAK = "weak"


@dataclass(frozen=True)
class TimedEvent:
    """A labeled event in seconds."""

    label: str
    onset_s: float
    offset_s: float

    def __post_init__(self) -> None:
        if self.onset_s < 0 or self.offset_s < self.onset_s:
            raise ValidationError(
                f"bad event interval [{self.onset_s}, {self.offset_s}]"
            )


@dataclass(frozen=True)
class ClipAnnotation:
    """Strong and/or weak labels for one clip.

    Weak-only clips carry tags but no timed events; strongly labeled clips
    carry both, with tags covering at least the event classes.
    """

    clip_id: str
    clip_len_s: float
    events: Tuple[TimedEvent, ...] = ()
    weak_tags: frozenset = frozenset()
    supervision: str = STRONG

    def __post_init__(self) -> None:
        if self.clip_len_s <= 0:
            raise ValidationError("clip length must be positive")
        if self.supervision not in (STRONG, WEAK):
            raise ValidationError(f"unknown supervision {self.supervision!r}")
        events = tuple(self.events)
        for ev in events:
            if ev.offset_s > self.clip_len_s + 1e-9:
                raise ValidationError(
                    f"event [{ev.onset_s}, {ev.offset_s}] exceeds clip of "
                    f"{self.clip_len_s}s"
                )
        tags = frozenset(self.weak_tags)
        if events and not {ev.label for ev in events} <= tags:
            raise ValidationError("weak tags must cover the event classes")
        object.__setattr__(self, "events", events)
        object.__setattr__(self, "weak_tags", tags)


def weaken(ann: ClipAnnotation) -> ClipAnnotation:
    """Drop timed events, keeping only the set of classes that occurred."""
    tags = frozenset(ev.label for ev in ann.events) if ann.events else ann.weak_tags
    return replace(ann, events=(), weak_tags=tags, supervision=WEAK)


def annotation_to_instances(
    ann: ClipAnnotation, vocab: LabelVocabulary
) -> List[EventInstance]:
    """Timed events as normalized (class id, center, duration) targets."""
    instances = []
    for ev in ann.events:
        m, l = segment_to_boundary(Segment(ev.onset_s, ev.offset_s), ann.clip_len_s)
        instances.append(EventInstance(class_id=vocab.index(ev.label), center=m, duration=l))
    return instances


def tag_vector(ann: ClipAnnotation, vocab: LabelVocabulary) -> np.ndarray:
    """Multi-hot weak label vector over the vocabulary."""
    y = np.zeros(vocab.size, dtype=np.float64)
    for label in ann.weak_tags:
        y[vocab.index(label)] = 1.0
    return y


# ---------------------------------------------------------------------------
# Synthetic scene generation


@dataclass(frozen=True)
class EventTemplate:
    label: str
    kind: str  # tone | chirp | noise
    duration_range_s: Tuple[float, float]
    freq_range_hz: Tuple[float, float]
    chirp_down: bool = False

    def __post_init__(self) -> None:
        if self.kind not in ("tone", "chirp", "noise"):
            raise ValidationError(f"unknown event kind {self.kind!r}")
        lo, hi = self.duration_range_s
        if not 0 < lo <= hi:
            raise ValidationError(f"bad duration range {self.duration_range_s}")
        flo, fhi = self.freq_range_hz
        if not 0 <= flo <= fhi:
            raise ValidationError(f"bad frequency range {self.freq_range_hz}")


@dataclass(frozen=True)
class SyntheticSceneSpec:
    templates: Tuple[EventTemplate, ...]
    events_per_clip: Tuple[int, int] = (1, 4)
    snr_db: Tuple[float, float] = (6.0, 20.0)
    clip_len_s: float = 10.0
    sample_rate: int = 16000
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.templates:
            raise ValidationError("scene spec needs at least one template")
        lo, hi = self.events_per_clip
        if not 0 <= lo <= hi:
            raise ValidationError(f"bad events_per_clip range {self.events_per_clip}")
        slo, shi = self.snr_db
        if slo > shi:
            raise ValidationError(f"bad snr range {self.snr_db}")
        if self.clip_len_s <= 0 or self.sample_rate <= 0:
            raise ValidationError("clip length and sample rate must be positive")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")
        for t in self.templates:
            if t.freq_range_hz[1] > self.sample_rate / 2:
                raise ValidationError(f"template {t.label} exceeds Nyquist")
        object.__setattr__(self, "templates", tuple(self.templates))

    def vocabulary(self) -> LabelVocabulary:
        return LabelVocabulary(tuple(t.label for t in self.templates))


def default_scene_spec(**overrides) -> SyntheticSceneSpec:
    """Five separable classes that still overlap in time under polyphony."""
    templates = (
        EventTemplate("low_tone", "tone", (0.5, 1.5), (200.0, 400.0)),
        EventTemplate("high_tone", "tone", (0.5, 1.5), (1500.0, 3000.0)),
        EventTemplate("up_chirp", "chirp", (0.5, 1.5), (400.0, 2000.0)),
        EventTemplate("down_chirp", "chirp", (0.5, 1.5), (400.0, 2000.0), chirp_down=True),
        EventTemplate("noise_burst", "noise", (0.5, 1.5), (0.0, 8000.0)),
    )
    return SyntheticSceneSpec(templates=templates, **overrides)


def _fade_envelope(n: int, fade_n: int) -> np.ndarray:
    env = np.ones(n)
    fade_n = min(fade_n, n // 2)
    if fade_n > 0:
        ramp = 0.5 * (1.0 - np.cos(np.pi * np.arange(fade_n) / fade_n))
        env[:fade_n] = ramp
        env[-fade_n:] = ramp[::-1]
    return env


def _render_source(
    template: EventTemplate,
    duration_s: float,
    sample_rate: int,
    rms: float,
    rng: np.random.Generator,
) -> np.ndarray:
    n = max(1, int(round(duration_s * sample_rate)))
    t = np.arange(n) / sample_rate
    env = _fade_envelope(n, int(FADE_S * sample_rate))
    if template.kind == "tone":
        f = rng.uniform(*template.freq_range_hz)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        x = np.sqrt(2.0) * rms * np.sin(2.0 * np.pi * f * t + phase)
    elif template.kind == "chirp":
        f0, f1 = template.freq_range_hz
        if template.chirp_down:
            f0, f1 = f1, f0
        phase = rng.uniform(0.0, 2.0 * np.pi)
        inst = 2.0 * np.pi * (f0 * t + 0.5 * (f1 - f0) * t**2 / duration_s)
        x = np.sqrt(2.0) * rms * np.sin(inst + phase)
    else:  # noise
        x = rng.standard_normal(n)
        x *= rms / max(np.sqrt(np.mean(x**2)), 1e-12)
    return x * env


def generate_scene(
    spec: SyntheticSceneSpec, clip_index: int, return_sources: bool = False
):
    """Render clip ``clip_index`` of the scene.

    Returns (waveform, annotation), plus the list of isolated per-event
    source tracks when ``return_sources`` is set (each a full-clip-length
    array that is zero outside its labeled interval).
    """
    rng = np.random.default_rng([spec.seed, clip_index])
    sr = spec.sample_rate
    n_total = int(round(spec.clip_len_s * sr))
    clip = BACKGROUND_RMS * rng.standard_normal(n_total)

    lo, hi = spec.events_per_clip
    n_events = int(rng.integers(lo, hi + 1))
    events = []
    sources = []
    for _ in range(n_events):
        template = spec.templates[int(rng.integers(len(spec.templates)))]
        dur = float(rng.uniform(*template.duration_range_s))
        dur = min(dur, spec.clip_len_s)
        onset = float(rng.uniform(0.0, spec.clip_len_s - dur))
        snr = float(rng.uniform(*spec.snr_db))
        rms = BACKGROUND_RMS * 10.0 ** (snr / 20.0)
        source = _render_source(template, dur, sr, rms, rng)
        start = int(round(onset * sr))
        end = min(start + source.size, n_total)
        track = np.zeros(n_total)
        track[start:end] = source[: end - start]
        clip += track
        events.append(TimedEvent(template.label, onset, onset + (end - start) / sr))
        if return_sources:
            sources.append(track)

    ann = ClipAnnotation(
        clip_id=f"clip_{spec.seed}_{clip_index:05d}",
        clip_len_s=n_total / sr,
        events=tuple(events),
        weak_tags=frozenset(ev.label for ev in events),
        supervision=STRONG,
    )
    wav = Waveform(samples=clip, sample_rate=sr)
    if return_sources:
        return wav, ann, sources
    return wav, ann


def write_wav(path: str | Path, waveform: Waveform) -> None:
    """Write 16-bit PCM mono. Samples are clipped to [-1, 1] before scaling."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.clip(waveform.samples, -1.0, 1.0)
    pcm = np.round(pcm * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(waveform.sample_rate)
        f.writeframes(pcm.tobytes())


def read_wav(path: str | Path) -> Waveform:
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2:
            raise ValidationError(f"{path}: expected 16-bit mono PCM")
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    return Waveform(samples=samples, sample_rate=rate)


# ---------------------------------------------------------------------------
# Manifests


@dataclass(frozen=True)
class ManifestRecord:
    annotation: ClipAnnotation
    audio: Optional[str] = None
    features: Optional[str] = None


class ManifestError(ValueError):
    pass


def _record_to_json(rec: ManifestRecord) -> dict:
    ann = rec.annotation
    return {
        "clip_id": ann.clip_id,
        "audio": rec.audio,
        "features": rec.features,
        "duration_s": ann.clip_len_s,
        "events": [
            {"label": ev.label, "onset_s": ev.onset_s, "offset_s": ev.offset_s}
            for ev in ann.events
        ],
        "weak": sorted(ann.weak_tags),
        "supervision": ann.supervision,
    }


def save_manifest(records: Sequence[ManifestRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as f:
        for rec in records:
            f.write(json.dumps(_record_to_json(rec)) + "\n")


def load_manifest(
    path: str | Path, vocab: Optional[LabelVocabulary] = None
) -> List[ManifestRecord]:
    """Parse a JSONL manifest, rejecting invalid records with line numbers."""
    path = Path(path)
    records = []
    with path.open() as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed JSON ({exc})") from None
            try:
                records.append(_record_from_json(raw, vocab))
            except (ValidationError, KeyError, TypeError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
    return records


def _record_from_json(raw: dict, vocab: Optional[LabelVocabulary]) -> ManifestRecord:
    events = []
    for ev in raw.get("events", []):
        if vocab is not None and ev["label"] not in vocab:
            raise ValidationError(f"unknown class name {ev['label']!r}")
        events.append(TimedEvent(ev["label"], float(ev["onset_s"]), float(ev["offset_s"])))
    weak = raw.get("weak", [])
    if vocab is not None:
        for label in weak:
            if label not in vocab:
                raise ValidationError(f"unknown class name {label!r}")
    ann = ClipAnnotation(
        clip_id=raw["clip_id"],
        clip_len_s=float(raw["duration_s"]),
        events=tuple(events),
        weak_tags=frozenset(weak),
        supervision=raw.get("supervision", STRONG),
    )
    return ManifestRecord(annotation=ann, audio=raw.get("audio"), features=raw.get("features"))


# ---------------------------------------------------------------------------
# Batching


@dataclass(frozen=True)
class ClipExample:
    """A feature matrix paired with its annotation, ready for batching."""

    features: LogMelSpectrogram
    annotation: ClipAnnotation

    @property
    def clip_id(self) -> str:
        return self.annotation.clip_id


@dataclass
class Batch:
    """Padded spectrogram batch. ``pad_mask`` is True exactly on padding."""

    specs: torch.Tensor  # (B, T_max, n_mels)
    pad_mask: torch.Tensor  # (B, T_max) bool
    annotations: List[ClipAnnotation]

    @property
    def size(self) -> int:
        return self.specs.shape[0]

    @property
    def supervision(self) -> List[str]:
        return [ann.supervision for ann in self.annotations]


def collate(examples: Sequence[ClipExample], dtype: torch.dtype = torch.float32) -> Batch:
    if not examples:
        raise ValidationError("cannot collate an empty batch")
    t_max = max(ex.features.n_frames for ex in examples)
    n_mels = examples[0].features.n_mels
    specs = torch.zeros(len(examples), t_max, n_mels, dtype=dtype)
    mask = torch.ones(len(examples), t_max, dtype=torch.bool)
    for i, ex in enumerate(examples):
        t = ex.features.n_frames
        specs[i, :t] = torch.as_tensor(ex.features.values, dtype=dtype)
        mask[i, :t] = False
    return Batch(specs=specs, pad_mask=mask, annotations=[ex.annotation for ex in examples])


def make_batches(
    examples: Sequence[ClipExample],
    batch_size: int,
    shuffle_seed: Optional[Union[int, Sequence[int]]] = None,
    dtype: torch.dtype = torch.float32,
) -> Iterator[Batch]:
    """Yield each example exactly once, in seeded order, padded per batch."""
    if batch_size < 1:
        raise ValidationError("batch size must be at least 1")
    order = np.arange(len(examples))
    if shuffle_seed is not None:
        np.random.default_rng(shuffle_seed).shuffle(order)
    for start in range(0, len(examples), batch_size):
        chunk = [examples[i] for i in order[start : start + batch_size]]
        yield collate(chunk, dtype=dtype)
