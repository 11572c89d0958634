"""Speaker labeling from a few annotated seconds per speaker.

Enrollment builds one centroid per speaker from annotated spans; the rest
of the audio is labeled window-by-window by cosine similarity, smoothed
by neighborhood majority, and merged into segments. The default embedder
is a deterministic spectral-band profile so no model weights are needed;
pre-computed embedding windows are accepted as a synthetic pass-through.
"""

from __future__ import annotations

import io
import json
import math
import wave
from collections import Counter
from dataclasses import dataclass, replace
from typing import Any, Optional

import numpy as np

from annolab.kernels import band_energies, dft_basis
from annolab.model import (
    ExecutionMode,
    InputKind,
    OutputKind,
    PluginManifest,
    TaskKind,
    TaskSpec,
)
from annolab.plugins import CancelProbe, LogFn, PluginInputError, TaskCancelled

UNKNOWN_LABEL = "unknown"

FRAME_S = 0.025
FRAME_HOP_S = 0.010
MIN_RATE = 8_000
MAX_RATE = 48_000


@dataclass(frozen=True)
class DiarizeConfig:
    window_s: float = 1.0
    hop_s: float = 0.5
    unknown_threshold: float = 0.25
    smooth_k: int = 3
    embedding_dim: int = 16

    def __post_init__(self) -> None:
        if not (0 < self.hop_s <= self.window_s):
            raise ValueError("hop_s must be in (0, window_s]")
        if self.smooth_k < 1 or self.smooth_k % 2 == 0:
            raise ValueError("smooth_k must be odd and positive")
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be positive")

    @classmethod
    def from_params(cls, params: dict[str, Any]) -> "DiarizeConfig":
        kwargs = {}
        for name, caster in (
            ("window_s", float),
            ("hop_s", float),
            ("unknown_threshold", float),
            ("smooth_k", int),
            ("embedding_dim", int),
        ):
            if name in params:
                kwargs[name] = caster(params[name])
        try:
            return cls(**kwargs)
        except ValueError as exc:
            raise PluginInputError(str(exc)) from exc


@dataclass(frozen=True)
class EmbeddingWindow:
    start_s: float
    end_s: float
    vec: np.ndarray

    @property
    def center_s(self) -> float:
        return (self.start_s + self.end_s) / 2.0


@dataclass(frozen=True)
class SpeakerProfile:
    label: str
    centroid: np.ndarray
    support_s: float


@dataclass(frozen=True)
class Segment:
    label: str
    start_s: float
    end_s: float
    mean_score: float


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity; zero vectors are dissimilar to everything."""
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


# --- acoustic embedder ----------------------------------------------------------


def parse_wav(data: bytes) -> tuple[np.ndarray, int]:
    """PCM16 mono WAV bytes -> (float64 samples in [-1, 1], sample rate)."""
    try:
        reader = wave.open(io.BytesIO(data), "rb")
    except (wave.Error, EOFError) as exc:
        raise PluginInputError(f"not a RIFF WAV file: {exc}") from exc
    with reader:
        if reader.getcomptype() != "NONE":
            raise PluginInputError("compressed WAV is not supported")
        if reader.getnchannels() != 1:
            raise PluginInputError("audio must be mono")
        if reader.getsampwidth() != 2:
            raise PluginInputError("audio must be 16-bit PCM")
        rate = reader.getframerate()
        if not MIN_RATE <= rate <= MAX_RATE:
            raise PluginInputError(f"sample rate {rate} outside [{MIN_RATE}, {MAX_RATE}]")
        raw = reader.readframes(reader.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if samples.size == 0:
        raise PluginInputError("audio contains no samples")
    return samples, rate


_BASIS_CACHE: dict[tuple[int, int, int, int], tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def _mel_filterbank(n_bins: int, rate: int, dft_len: int, n_bands: int) -> np.ndarray:
    def mel(f: np.ndarray) -> np.ndarray:
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def imel(m: np.ndarray) -> np.ndarray:
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    points = imel(np.linspace(0.0, float(mel(np.array(rate / 2.0))), n_bands + 2))
    bin_freqs = np.arange(n_bins) * rate / dft_len
    bank = np.zeros((n_bins, n_bands))
    for b in range(n_bands):
        left, center, right = points[b], points[b + 1], points[b + 2]
        rising = (bin_freqs - left) / (center - left)
        falling = (right - bin_freqs) / (right - center)
        bank[:, b] = np.maximum(0.0, np.minimum(rising, falling))
    return bank


def _analysis_tables(
    frame_len: int, rate: int, n_bands: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dft_len = max(512, frame_len)
    key = (frame_len, dft_len, rate, n_bands)
    tables = _BASIS_CACHE.get(key)
    if tables is None:
        cos_b, sin_b = dft_basis(frame_len, dft_len)
        bank = _mel_filterbank(dft_len // 2 + 1, rate, dft_len, n_bands)
        tables = (cos_b, sin_b, bank)
        _BASIS_CACHE[key] = tables
    return tables


def embed_windows(wav_data: bytes, config: DiarizeConfig) -> list[EmbeddingWindow]:
    """Deterministic spectral-band embedding of fixed-duration windows.

    25 ms frames at a 10 ms hop are windowed (Hann), transformed by direct
    DFT at 512-point resolution (longer when a frame exceeds 512 samples),
    and reduced to log energies of mel-spaced triangular bands. A window's
    vector is the L2-normalized mean of its frame vectors; frames of exact
    digital silence contribute zero vectors. A trailing span of at most
    half a window is dropped.
    """
    samples, rate = parse_wav(wav_data)
    frame_len = round(FRAME_S * rate)
    hop_len = round(FRAME_HOP_S * rate)
    duration = samples.size / rate

    n_frames = (samples.size - frame_len) // hop_len + 1 if samples.size >= frame_len else 0
    centers = np.empty(0)
    feats = np.empty((0, config.embedding_dim))
    if n_frames > 0:
        starts = np.arange(n_frames) * hop_len
        frames = samples[starts[:, None] + np.arange(frame_len)]
        cos_b, sin_b, bank = _analysis_tables(frame_len, rate, config.embedding_dim)
        feats = band_energies(frames, np.hanning(frame_len), cos_b, sin_b, bank)
        silent = ~np.any(frames != 0.0, axis=1)
        feats[silent] = 0.0
        centers = (starts + frame_len / 2.0) / rate

    windows: list[EmbeddingWindow] = []
    i = 0
    while True:
        t = i * config.hop_s
        if duration - t <= config.window_s / 2.0:
            break
        i += 1
        mask = (centers >= t) & (centers < t + config.window_s)
        if not np.any(mask):
            continue
        mean = feats[mask].mean(axis=0)
        norm = float(np.linalg.norm(mean))
        vec = mean / norm if norm > 0.0 else mean
        windows.append(EmbeddingWindow(start_s=t, end_s=min(t + config.window_s, duration), vec=vec))
    return windows


# --- enrollment / classification ------------------------------------------------

Annotation = tuple[str, float, float]  # (label, start_s, end_s)


def enroll(
    windows: list[EmbeddingWindow],
    annotations: list[Annotation],
    log: Optional[LogFn] = None,
) -> list[SpeakerProfile]:
    """Average the windows inside each speaker's annotated spans.

    A window belongs to a span when its center lies inside it. Profiles
    come back sorted by label; speakers with under 2 s of support get a
    log warning but still enroll.
    """
    if not annotations:
        raise PluginInputError("no enrollment annotations given")
    members: dict[str, list[EmbeddingWindow]] = {}
    support: dict[str, float] = {}
    for label, start, end in annotations:
        if not label:
            raise PluginInputError("annotation with an empty speaker label")
        if not (end > start):
            raise PluginInputError(f"annotation for {label!r} has a nonpositive span")
        inside = [w for w in windows if start <= w.center_s < end]
        if not inside:
            raise PluginInputError(
                f"annotation for {label!r} over [{start}, {end}) overlaps no window"
            )
        members.setdefault(label, []).extend(inside)
        support[label] = support.get(label, 0.0) + (end - start)

    profiles = []
    for label in sorted(members):
        vecs = np.stack([w.vec for w in members[label]])
        mean = vecs.mean(axis=0)
        norm = float(np.linalg.norm(mean))
        if norm == 0.0:
            raise PluginInputError(f"enrollment for {label!r} covers only silence")
        if log is not None and support[label] < 2.0:
            log(f"warning: speaker {label!r} has only {support[label]:.2f}s of enrollment\n")
        profiles.append(SpeakerProfile(label=label, centroid=mean / norm, support_s=support[label]))
    return profiles


def classify(
    windows: list[EmbeddingWindow], profiles: list[SpeakerProfile], tau: float
) -> list[tuple[str, float]]:
    """Per-window argmax-cosine label, or "unknown" below the threshold.

    Ties go to the lexicographically smaller label.
    """
    if not profiles:
        raise PluginInputError("classification requires at least one speaker profile")
    ordered = sorted(profiles, key=lambda p: p.label)
    out: list[tuple[str, float]] = []
    for w in windows:
        best_label = ordered[0].label
        best_score = -math.inf
        for p in ordered:
            score = cosine(w.vec, p.centroid)
            if score > best_score:
                best_label, best_score = p.label, score
        out.append((best_label if best_score >= tau else UNKNOWN_LABEL, best_score))
    return out


def smooth(labels: list[str], smooth_k: int) -> list[str]:
    """Majority vote in a centered window of smooth_k original labels.

    Single pass: neighborhoods always read the input list, never already
    smoothed values. Ties keep the original label.
    """
    if smooth_k < 1 or smooth_k % 2 == 0:
        raise ValueError("smooth_k must be odd and positive")
    if smooth_k == 1 or len(labels) <= 1:
        return list(labels)
    half = smooth_k // 2
    out = []
    for i in range(len(labels)):
        counts = Counter(labels[max(0, i - half): i + half + 1])
        top = max(counts.values())
        winners = [label for label, n in counts.items() if n == top]
        out.append(winners[0] if len(winners) == 1 else labels[i])
    return out


def merge_segments(
    windows: list[EmbeddingWindow], labels: list[str], scores: list[float]
) -> list[Segment]:
    """Merge equal-label runs; overlap between neighbors goes to the later
    segment (the earlier one is clipped at the later's first window start)."""
    if not windows:
        return []
    if not (len(windows) == len(labels) == len(scores)):
        raise ValueError("windows, labels and scores must align")
    segments: list[Segment] = []
    run_start = 0
    for i in range(1, len(labels) + 1):
        if i < len(labels) and labels[i] == labels[run_start]:
            continue
        run = slice(run_start, i)
        segments.append(
            Segment(
                label=labels[run_start],
                start_s=windows[run_start].start_s,
                end_s=windows[i - 1].end_s,
                mean_score=float(np.mean(scores[run])),
            )
        )
        run_start = i
    for i in range(len(segments) - 1):
        if segments[i].end_s > segments[i + 1].start_s:
            segments[i] = replace(segments[i], end_s=segments[i + 1].start_s)
    return segments


def diarize_windows(
    windows: list[EmbeddingWindow],
    annotations: list[Annotation],
    config: DiarizeConfig,
    log: Optional[LogFn] = None,
) -> list[Segment]:
    profiles = enroll(windows, annotations, log)
    labeled = classify(windows, profiles, config.unknown_threshold)
    labels = smooth([label for label, _ in labeled], config.smooth_k)
    return merge_segments(windows, labels, [score for _, score in labeled])


def diarize_wav(
    wav_data: bytes,
    annotations: list[Annotation],
    config: DiarizeConfig,
    log: Optional[LogFn] = None,
) -> list[Segment]:
    return diarize_windows(embed_windows(wav_data, config), annotations, config, log)


# --- wire formats ----------------------------------------------------------------


def windows_to_doc(windows: list[EmbeddingWindow]) -> dict[str, Any]:
    dim = len(windows[0].vec) if windows else 0
    return {
        "dim": dim,
        "windows": [
            {"start": w.start_s, "end": w.end_s, "vec": [float(x) for x in w.vec]}
            for w in windows
        ],
    }


def windows_from_doc(doc: Any) -> list[EmbeddingWindow]:
    if not isinstance(doc, dict) or "dim" not in doc or "windows" not in doc:
        raise PluginInputError("embedding windows document must have dim and windows")
    dim = doc["dim"]
    out = []
    for i, item in enumerate(doc["windows"]):
        try:
            start, end, vec = float(item["start"]), float(item["end"]), item["vec"]
        except (KeyError, TypeError, ValueError) as exc:
            raise PluginInputError(f"window #{i} is malformed: {exc}") from exc
        if len(vec) != dim:
            raise PluginInputError(f"window #{i} has {len(vec)} dims, expected {dim}")
        if not end > start:
            raise PluginInputError(f"window #{i} has a nonpositive span")
        arr = np.asarray(vec, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise PluginInputError(f"window #{i} has non-finite values")
        out.append(EmbeddingWindow(start_s=start, end_s=end, vec=arr))
    return out


def annotations_from_doc(items: Any) -> list[Annotation]:
    if not isinstance(items, list) or not items:
        raise PluginInputError("annotations must be a nonempty list")
    out = []
    for i, item in enumerate(items):
        try:
            out.append((str(item["speaker"]), float(item["start"]), float(item["end"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise PluginInputError(f"annotation #{i} is malformed: {exc}") from exc
    return out


def segments_to_doc(segments: list[Segment]) -> list[dict[str, Any]]:
    return [
        {
            "label": s.label,
            "start": round(s.start_s, 3),
            "end": round(s.end_s, 3),
            "score": s.mean_score,
        }
        for s in segments
    ]


def profiles_to_doc(profiles: list[SpeakerProfile]) -> dict[str, Any]:
    dim = len(profiles[0].centroid) if profiles else 0
    return {
        "format": "speaker-profiles",
        "dim": dim,
        "profiles": [
            {
                "label": p.label,
                "centroid": [float(x) for x in p.centroid],
                "support_s": p.support_s,
            }
            for p in profiles
        ],
    }


def profiles_from_doc(doc: Any) -> list[SpeakerProfile]:
    if not isinstance(doc, dict) or doc.get("format") != "speaker-profiles":
        raise PluginInputError("not a speaker profiles document")
    out = []
    for item in doc["profiles"]:
        out.append(
            SpeakerProfile(
                label=str(item["label"]),
                centroid=np.asarray(item["centroid"], dtype=np.float64),
                support_s=float(item["support_s"]),
            )
        )
    return out


# --- service/worker integration ---------------------------------------------------

PLUGIN_ID = "diarize"
WAV_TASK = "diarize"
WINDOWS_TASK = "diarize-windows"
ENROLL_TASK = "enroll"

MANIFEST = PluginManifest(
    plugin_id=PLUGIN_ID,
    version="1.0.0",
    execution=ExecutionMode.IN_PROCESS,
    tasks=(
        TaskSpec(
            task_name=WAV_TASK,
            kind=TaskKind.PREDICT,
            input_kind=InputKind.WAV_AUDIO,
            output_kind=OutputKind.SEGMENTS,
            queue_class="cpu-light",
            supports_finetune=True,
            languages=("*",),
        ),
        TaskSpec(
            task_name=WINDOWS_TASK,
            kind=TaskKind.PREDICT,
            input_kind=InputKind.EMBEDDING_WINDOWS,
            output_kind=OutputKind.SEGMENTS,
            queue_class="cpu-light",
            supports_finetune=True,
            languages=("*",),
        ),
        TaskSpec(
            task_name=ENROLL_TASK,
            kind=TaskKind.TRAIN,
            input_kind=InputKind.ENROLLMENT_ANNOTATIONS,
            output_kind=OutputKind.MODEL_ARTIFACT,
            queue_class="cpu-light",
            supports_finetune=False,
            languages=("*",),
        ),
    ),
)


def _input_windows(task_name: str, input_bytes: bytes, config: DiarizeConfig) -> list[EmbeddingWindow]:
    if task_name == WAV_TASK:
        return embed_windows(input_bytes, config)
    try:
        doc = json.loads(input_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise PluginInputError(f"invalid embedding windows JSON: {exc}") from exc
    return windows_from_doc(doc)


def execute(
    task_name: str,
    artifact_doc: Optional[dict],
    input_bytes: bytes,
    params: dict[str, Any],
    log: LogFn,
    should_cancel: CancelProbe,
) -> bytes:
    config = DiarizeConfig.from_params(params)

    if task_name == ENROLL_TASK:
        try:
            doc = json.loads(input_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise PluginInputError(f"invalid enrollment JSON: {exc}") from exc
        if not isinstance(doc, dict) or "windows" not in doc or "annotations" not in doc:
            raise PluginInputError("enrollment document needs windows and annotations")
        windows = windows_from_doc(doc["windows"])
        annotations = annotations_from_doc(doc["annotations"])
        if should_cancel():
            raise TaskCancelled()
        profiles = enroll(windows, annotations, log)
        log(f"enrolled {len(profiles)} speaker(s) from {len(windows)} window(s)\n")
        return json.dumps(profiles_to_doc(profiles)).encode("utf-8")

    if task_name not in (WAV_TASK, WINDOWS_TASK):
        raise PluginInputError(f"unknown task {task_name!r}")

    windows = _input_windows(task_name, input_bytes, config)
    log(f"embedded {len(windows)} window(s)\n")
    if should_cancel():
        raise TaskCancelled()

    if artifact_doc is not None:
        profiles = profiles_from_doc(artifact_doc)
        labeled = classify(windows, profiles, config.unknown_threshold)
        labels = smooth([label for label, _ in labeled], config.smooth_k)
        segments = merge_segments(windows, labels, [score for _, score in labeled])
    else:
        annotations = annotations_from_doc(params.get("annotations"))
        segments = diarize_windows(windows, annotations, config, log)
    log(f"produced {len(segments)} segment(s)\n")
    return json.dumps(segments_to_doc(segments)).encode("utf-8")
