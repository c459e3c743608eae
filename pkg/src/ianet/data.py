"""Feature files, annotation ingestion and the synthetic grounding-task generator."""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class FormatError(DataError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class GroundingSample:
    sample_id: str
    video: np.ndarray  # T x d_in_video
    query: np.ndarray  # N x d_in_query
    segment: tuple[float, float] | None  # clip units; None marks a distractor

    @property
    def T(self) -> int:
        return self.video.shape[0]

    @property
    def is_distractor(self) -> bool:
        return self.segment is None


# ---------------------------------------------------------------------------
# binary feature files

FEATURE_MAGIC = b"IANF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def write_feature_file(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise DataError(f"feature arrays must be 2-D, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_feature_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: truncated header", len(buf))
    magic, version, rows, cols = _HEADER.unpack_from(buf)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", 0)
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", 4)
    need = _HEADER.size + rows * cols * 4
    if len(buf) < need:
        raise FormatError(f"{path}: payload truncated, expected {need} bytes", len(buf))
    if len(buf) > need:
        raise FormatError(f"{path}: {len(buf) - need} trailing bytes", need)
    return np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=_HEADER.size).reshape(rows, cols).astype(np.float32)


# ---------------------------------------------------------------------------
# annotations (JSON lines)


def _segment_from_record(rec: dict, T: int) -> tuple[float, float] | None:
    if rec.get("segment") is not None:
        s, e = rec["segment"]
    elif rec.get("segment_seconds") is not None:
        cps = rec.get("clips_per_second")
        if not cps:
            raise DataError(f"{rec.get('sample_id')}: segment_seconds needs clips_per_second")
        s, e = (x * cps for x in rec["segment_seconds"])
    else:
        return None
    s, e = float(s), float(e)
    if not 0 <= s < e <= T:
        raise DataError(f"{rec.get('sample_id')}: segment ({s}, {e}) outside [0, {T}]")
    return s, e


def load_dataset(annotation_path) -> list[GroundingSample]:
    root = Path(annotation_path).parent
    samples = []
    with open(annotation_path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sid = rec["sample_id"]
                T = int(rec["T"])
                video = read_feature_file(root / rec["video_feature_path"])
                query = read_feature_file(root / rec["query_feature_path"])
            except (KeyError, json.JSONDecodeError, OSError) as exc:
                raise DataError(f"{annotation_path}:{lineno}: {exc}") from exc
            if video.shape[0] != T:
                raise DataError(f"{sid}: annotation says T={T} but video features have {video.shape[0]} rows")
            if query.shape[0] < 1:
                raise DataError(f"{sid}: empty query")
            samples.append(GroundingSample(sid, video, query, _segment_from_record(rec, T)))
    if not samples:
        raise DataError(f"{annotation_path}: no samples")
    return samples


def write_dataset(samples: Sequence[GroundingSample], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        vname, qname = f"{s.sample_id}.video.ianf", f"{s.sample_id}.query.ianf"
        write_feature_file(out / vname, s.video)
        write_feature_file(out / qname, s.query)
        lines.append(json.dumps({
            "sample_id": s.sample_id,
            "video_feature_path": vname,
            "query_feature_path": qname,
            "T": s.T,
            "segment": None if s.segment is None else [s.segment[0], s.segment[1]],
        }))
    ann = out / "annotations.jsonl"
    ann.write_text("\n".join(lines) + "\n")
    return ann


# ---------------------------------------------------------------------------
# synthetic task


@dataclass(frozen=True)
class SynthSpec:
    num_samples: int = 64
    T_min: int = 24
    T_max: int = 32
    N_min: int = 5
    N_max: int = 8
    d_in_video: int = 32
    d_in_query: int = 24
    d_latent: int = 8
    rho: float = 0.8
    word_noise: float = 0.3
    seg_min: int = 4
    seg_max: int = 12
    decoys: int = 1
    background: str = "noise"
    distractor_count: int = 0
    seed: int = 0
    id_prefix: str = "s"

    def __post_init__(self):
        checks = {
            "num_samples": self.num_samples >= 1,
            "T_min": 1 <= self.T_min <= self.T_max,
            "N_min": 1 <= self.N_min <= self.N_max,
            "d_in_video": self.d_in_video >= 1,
            "d_in_query": self.d_in_query >= 1,
            "d_latent": self.d_latent >= 1,
            "rho": 0 < self.rho <= 1,
            "word_noise": self.word_noise >= 0,
            "seg_min": 1 <= self.seg_min <= self.seg_max and self.seg_min <= self.T_min,
            "decoys": self.decoys >= 0,
            "background": self.background in ("noise", "concepts"),
            "distractor_count": 0 <= self.distractor_count <= self.num_samples,
        }
        for name, ok in checks.items():
            if not ok:
                raise DataError(f"invalid SynthSpec field {name!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        for k in d:
            if k not in names:
                raise DataError(f"unknown SynthSpec field {k!r}")
        for f in dataclasses.fields(cls):
            if f.name in d and not isinstance(d[f.name], type(f.default)) and not (
                isinstance(f.default, float) and isinstance(d[f.name], int) and not isinstance(d[f.name], bool)
            ):
                raise DataError(f"invalid SynthSpec field {f.name!r}: expected {type(f.default).__name__}")
        return cls(**d)


@dataclass
class SynthWorld:
    """Fixed latent-to-feature projections shared by every sample of a dataset."""

    to_video: np.ndarray  # d_latent x d_in_video
    to_query: np.ndarray  # d_latent x d_in_query


@dataclass
class SynthDataset:
    samples: list[GroundingSample]
    world: SynthWorld
    latents: list[np.ndarray]
    spec: SynthSpec


def make_world(spec: SynthSpec) -> SynthWorld:
    rng = np.random.default_rng([spec.seed, 0])
    k = spec.d_latent
    return SynthWorld(rng.normal(size=(k, spec.d_in_video)) / np.sqrt(k),
                      rng.normal(size=(k, spec.d_in_query)) / np.sqrt(k))


def _free_span(rng, T: int, length: int, taken: np.ndarray):
    starts = [s for s in range(T - length + 1) if not taken[s:s + length].any()]
    if not starts:
        return None
    return int(starts[rng.integers(len(starts))])


def _plant(rng, spec: SynthSpec, world: SynthWorld, clips, taken, start: int, length: int) -> None:
    other = rng.normal(size=spec.d_latent)
    clips[start:start + length] = (spec.rho * (other @ world.to_video)
                                   + (1 - spec.rho) * rng.normal(size=(length, spec.d_in_video)))
    taken[start:start + length] = True


def synthesize(spec: SynthSpec, world: SynthWorld | None = None) -> SynthDataset:
    """Draw a dataset where each query's latent code is planted in one clip span.

    Words are noisy projections of the latent code; clips inside the segment
    mix the projected code (weight rho) with noise; other clips are noise,
    apart from ``decoys`` spans carrying unrelated latent codes.  With
    ``background="concepts"`` every non-segment clip carries an unrelated
    code, so only cross-modal matching identifies the segment.  The last
    ``distractor_count`` samples contain no matching span at all.
    """
    world = world or make_world(spec)
    rng = np.random.default_rng([spec.seed, 1])
    samples, latents = [], []
    n_real = spec.num_samples - spec.distractor_count
    for i in range(spec.num_samples):
        T = int(rng.integers(spec.T_min, spec.T_max + 1))
        N = int(rng.integers(spec.N_min, spec.N_max + 1))
        c = rng.normal(size=spec.d_latent)
        words = (c + spec.word_noise * rng.normal(size=(N, spec.d_latent))) @ world.to_query
        clips = rng.normal(size=(T, spec.d_in_video))
        taken = np.zeros(T, dtype=bool)
        segment = None
        if i < n_real:
            length = int(rng.integers(spec.seg_min, min(spec.seg_max, T) + 1))
            start = int(rng.integers(0, T - length + 1))
            clips[start:start + length] = (spec.rho * (c @ world.to_video)
                                           + (1 - spec.rho) * rng.normal(size=(length, spec.d_in_video)))
            taken[start:start + length] = True
            segment = (float(start), float(start + length))
        for _ in range(spec.decoys):
            length = int(rng.integers(spec.seg_min, min(spec.seg_max, T) + 1))
            start = _free_span(rng, T, length, taken)
            if start is not None:
                _plant(rng, spec, world, clips, taken, start, length)
        if spec.background == "concepts":
            # every remaining clip shows some unrelated latent code
            t = 0
            while t < T:
                if taken[t]:
                    t += 1
                    continue
                run = int(np.argmax(taken[t:])) if taken[t:].any() else T - t
                length = min(run, int(rng.integers(spec.seg_min, spec.seg_max + 1)))
                _plant(rng, spec, world, clips, taken, t, length)
                t += length
        samples.append(GroundingSample(f"{spec.id_prefix}{i:05d}", clips.astype(np.float32),
                                       words.astype(np.float32), segment))
        latents.append(c)
    return SynthDataset(samples, world, latents, spec)


def centroid_oracle(sample: GroundingSample, world: SynthWorld, rho: float) -> tuple[float, float] | None:
    """Training-free localiser that knows the generator's projections.

    Recovers the latent code from the words, assigns every clip to the nearer
    of two centroids (planted signal vs. zero-mean noise) and returns the
    longest run of signal clips.
    """
    c_hat = np.linalg.lstsq(world.to_query.T, sample.query.mean(axis=0), rcond=None)[0]
    centre = rho * (c_hat @ world.to_video)
    x = sample.video.astype(np.float64)
    hit = ((x - centre) ** 2).sum(axis=1) < (x ** 2).sum(axis=1)
    best, run_start, best_span = 0, None, None
    for t in range(len(hit) + 1):
        if t < len(hit) and hit[t]:
            if run_start is None:
                run_start = t
        elif run_start is not None:
            if t - run_start > best:
                best, best_span = t - run_start, (float(run_start), float(t))
            run_start = None
    return best_span


def in_segment_mask(sample: GroundingSample) -> np.ndarray:
    mask = np.zeros(sample.T, dtype=bool)
    if sample.segment is not None:
        s, e = sample.segment
        idx = np.arange(sample.T)
        mask = (idx + 1 > s) & (idx < e)
    return mask


def dataset_signature(samples: Sequence[GroundingSample]) -> str:
    import hashlib

    h = hashlib.sha256()
    for s in samples:
        h.update(s.sample_id.encode())
        h.update(s.video.tobytes())
        h.update(s.query.tobytes())
        h.update(repr(s.segment).encode())
    return h.hexdigest()

