"""Snippet-feature datasets: FEAT1 binary I/O, JSON-lines ground truth and a
synthetic generator of untrimmed videos with planted action segments.

FEAT1 layout (little-endian)::

    b"FEAT1"  u32 version=1  u32 N
    repeat N times:
        u16 id_len, id bytes (UTF-8), u32 T, u32 feature_dim,
        T*feature_dim float32, row-major
"""
from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"FEAT1"
VERSION = 1


class FeatureFormatError(ValueError):
    """Bad magic or unsupported version."""


class CorruptFileError(ValueError):
    """Payload shorter or longer than the header promises."""


class ValidationError(ValueError):
    """Data violates a dataset invariant."""


@dataclass
class SnippetFeatureSet:
    video_id: str
    features: np.ndarray  # T x feature_dim

    @property
    def T(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass
class Dataset:
    videos: list
    K: int

    def __post_init__(self):
        validate_dataset(self)

    def __len__(self):
        return len(self.videos)

    @property
    def ids(self) -> list:
        return [v.video_id for v in self.videos]

    @property
    def feature_dim(self) -> int:
        return self.videos[0].feature_dim

    def stacked(self) -> np.ndarray:
        """N x T x D array; requires every video to share T."""
        Ts = {v.T for v in self.videos}
        if len(Ts) != 1:
            raise ValidationError("videos have different snippet counts; resample to a fixed T first")
        return np.stack([v.features for v in self.videos]).astype(np.float64)


def validate_dataset(ds: Dataset) -> None:
    if not ds.videos:
        raise ValidationError("dataset has no videos")
    if ds.K < 2:
        raise ValidationError(f"K={ds.K} must be at least 2")
    seen = set()
    dim = ds.videos[0].feature_dim
    for v in ds.videos:
        if v.video_id in seen:
            raise ValidationError(f"duplicate video id {v.video_id!r}")
        seen.add(v.video_id)
        if v.features.ndim != 2 or v.T < 1:
            raise ValidationError(f"{v.video_id}: features must be a nonempty T x D matrix")
        if v.feature_dim != dim:
            raise ValidationError(f"{v.video_id}: feature_dim {v.feature_dim} != {dim}")
        if not np.all(np.isfinite(v.features)):
            raise ValidationError(f"{v.video_id}: non-finite feature values")


def concat_streams(rgb, flow):
    """Join RGB and optical-flow snippet features along the feature axis."""
    rgb = np.asarray(rgb)
    flow = np.asarray(flow)
    if rgb.ndim != 2 or rgb.shape != flow.shape:
        raise ValueError(f"stream shapes differ: {rgb.shape} vs {flow.shape}")
    return np.concatenate([rgb, flow], axis=1)


# --------------------------------------------------------------------------
# FEAT1 binary format

def save_features(ds: Dataset, path) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(ds.videos))]
    for v in ds.videos:
        vid = v.video_id.encode("utf-8")
        chunks.append(struct.pack("<H", len(vid)))
        chunks.append(vid)
        chunks.append(struct.pack("<II", v.T, v.feature_dim))
        chunks.append(np.ascontiguousarray(v.features, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptFileError(f"truncated payload at byte {self.pos} (need {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_features(path, K: int) -> Dataset:
    """Read a FEAT1 file. ``K`` is the declared number of action classes."""
    r = _Reader(Path(path).read_bytes())
    if r.buf[:len(MAGIC)] != MAGIC:
        raise FeatureFormatError("missing FEAT1 magic")
    r.pos = len(MAGIC)
    version, n = r.unpack("<II")
    if version != VERSION:
        raise FeatureFormatError(f"unsupported FEAT1 version {version}")
    videos = []
    for _ in range(n):
        (id_len,) = r.unpack("<H")
        try:
            vid = r.take(id_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptFileError(f"video id is not UTF-8: {exc}") from exc
        T, dim = r.unpack("<II")
        raw = r.take(4 * T * dim)
        feats = np.frombuffer(raw, dtype="<f4").reshape(T, dim).astype(np.float32)
        videos.append(SnippetFeatureSet(vid, feats))
    if r.pos != len(r.buf):
        raise CorruptFileError(f"{len(r.buf) - r.pos} trailing bytes after last video")
    return Dataset(videos, K)


def load_feature_streams(rgb_path, flow_path, K: int) -> Dataset:
    """Build a dataset from separate RGB and flow FEAT1 files with matching ids."""
    rgb = load_features(rgb_path, K)
    flow = {v.video_id: v for v in load_features(flow_path, K).videos}
    videos = []
    for v in rgb.videos:
        if v.video_id not in flow:
            raise ValidationError(f"{v.video_id} has no flow stream")
        videos.append(SnippetFeatureSet(v.video_id, concat_streams(v.features, flow[v.video_id].features)))
    return Dataset(videos, K)


# --------------------------------------------------------------------------
# Ground truth

@dataclass(frozen=True)
class Segment:
    start: float
    end: float
    label: int


@dataclass
class GroundTruth:
    """Per-video action segments. ``unit`` is ``"snippet"`` or ``"seconds"``;
    ``seconds_per_snippet`` converts seconds to snippet indices."""

    segments: dict = field(default_factory=dict)  # video_id -> list[Segment]
    unit: str = "snippet"
    seconds_per_snippet: float | None = None

    def __eq__(self, other):
        return (isinstance(other, GroundTruth) and self.unit == other.unit
                and self.seconds_per_snippet == other.seconds_per_snippet
                and {k: list(v) for k, v in self.segments.items()}
                == {k: list(v) for k, v in other.segments.items()})

    def validate(self, K: int | None = None, lengths: dict | None = None) -> None:
        if self.unit not in ("snippet", "seconds"):
            raise ValidationError(f"unknown unit {self.unit!r}")
        for vid, segs in self.segments.items():
            for s in segs:
                if not s.start < s.end:
                    raise ValidationError(f"{vid}: segment start {s.start} >= end {s.end}")
                if s.start < 0:
                    raise ValidationError(f"{vid}: negative segment start")
                if K is not None and not 0 <= s.label < K:
                    raise ValidationError(f"{vid}: label {s.label} outside [0, {K})")
                if lengths is not None and vid in lengths:
                    if self.to_snippets(s.end) > lengths[vid] + 1e-9:
                        raise ValidationError(f"{vid}: segment ends past the video extent")

    def to_snippets(self, value: float) -> float:
        if self.unit == "snippet":
            return value
        if not self.seconds_per_snippet:
            raise ValidationError("seconds-based ground truth needs seconds_per_snippet")
        return value / self.seconds_per_snippet

    def in_snippets(self) -> "GroundTruth":
        if self.unit == "snippet":
            return self
        segs = {vid: [Segment(self.to_snippets(s.start), self.to_snippets(s.end), s.label) for s in ss]
                for vid, ss in self.segments.items()}
        return GroundTruth(segs, "snippet", None)

    def video_labels(self, ids) -> np.ndarray:
        """Dominant class per video (most covered duration, ties to the lower id).
        Videos without segments get -1."""
        out = np.full(len(ids), -1, dtype=np.int64)
        for i, vid in enumerate(ids):
            cover = Counter()
            for s in self.segments.get(vid, []):
                cover[s.label] += s.end - s.start
            if cover:
                out[i] = min(cover, key=lambda c: (-cover[c], c))
        return out


def save_ground_truth(gt: GroundTruth, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for vid, segs in gt.segments.items():
            rec = {"video_id": vid,
                   "segments": [{"start": s.start, "end": s.end, "label": s.label} for s in segs],
                   "unit": gt.unit}
            if gt.seconds_per_snippet is not None:
                rec["seconds_per_snippet"] = gt.seconds_per_snippet
            fh.write(json.dumps(rec) + "\n")


def load_ground_truth(path, K: int | None = None, seconds_per_snippet: float | None = None) -> GroundTruth:
    segments = {}
    units = set()
    sps = seconds_per_snippet
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                vid = rec["video_id"]
                segs = [Segment(s["start"], s["end"], int(s["label"])) for s in rec["segments"]]
                units.add(rec.get("unit", "snippet"))
                if sps is None and "seconds_per_snippet" in rec:
                    sps = float(rec["seconds_per_snippet"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed ground-truth line ({exc})") from exc
            if vid in segments:
                raise ValidationError(f"{path}:{lineno}: duplicate video id {vid!r}")
            segments[vid] = segs
    if len(units) > 1:
        raise ValidationError(f"mixed units in {path}: {sorted(units)}")
    gt = GroundTruth(segments, units.pop() if units else "snippet", sps)
    gt.validate(K)
    return gt


# --------------------------------------------------------------------------
# Synthetic data

@dataclass
class SynthConfig:
    K: int = 10
    videos_per_class: int = 40
    T: int = 50
    feature_dim: int = 32
    separation: float = 10.0
    action_noise: float = 1.0
    background_noise: float = 1.0
    actions_per_video: tuple = (1, 3)
    action_length: tuple = (3, 8)
    label_mode: str = "balanced"  # or "uniform"
    seed: int = 0

    def validate(self):
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if self.separation <= 0:
            raise ValueError("separation must be positive")
        if self.action_noise < 0 or self.background_noise < 0:
            raise ValueError("noise scales must be nonnegative")
        a_lo, a_hi = self.actions_per_video
        l_lo, l_hi = self.action_length
        if not (1 <= a_lo <= a_hi and 1 <= l_lo <= l_hi):
            raise ValueError("count/length ranges must be positive and ordered")
        # worst case: most segments at longest length, one-snippet gaps between them
        if a_hi * l_hi + (a_hi - 1) > self.T:
            raise ValueError(f"{a_hi} actions of length {l_hi} do not fit in T={self.T}")
        if self.label_mode not in ("balanced", "uniform"):
            raise ValueError(f"unknown label_mode {self.label_mode!r}")


def synthetic_centers(cfg: SynthConfig, rng: np.random.Generator) -> tuple:
    """Class centers and background center, pairwise ``separation`` apart
    whenever K + 1 <= feature_dim."""
    n = cfg.K + 1
    G = rng.standard_normal((cfg.feature_dim, n))
    if n <= cfg.feature_dim:
        Q, _ = np.linalg.qr(G)
        dirs = Q[:, :n].T
    else:
        dirs = (G / np.linalg.norm(G, axis=0)).T
    pts = dirs * (cfg.separation / np.sqrt(2.0))
    return pts[:cfg.K], pts[cfg.K]


def _place_segments(rng, T, lengths):
    """Random non-touching placement of segments with the given lengths."""
    n = len(lengths)
    free = T - sum(lengths) - (n - 1)
    # split `free` spare snippets into n+1 gaps
    cuts = np.sort(rng.integers(0, free + 1, size=n))
    gaps = np.diff(np.concatenate([[0], cuts, [free]]))
    starts = []
    pos = gaps[0]
    for j, L in enumerate(lengths):
        starts.append(int(pos))
        pos += L + 1 + gaps[j + 1]
    return starts


def generate_synthetic(cfg: SynthConfig, id_prefix: str = "vid", split: int | None = None):
    """Videos with Gaussian-blob action snippets on a shared background.

    Returns ``(Dataset, GroundTruth)``; every video holds segments of a single
    class, recorded in snippet units as half-open ``[start, end)``. Passing a
    ``split`` number draws a fresh set of videos around the same centers, for
    held-out evaluation.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    centers, bg = synthetic_centers(cfg, rng)
    if split is not None:
        rng = np.random.default_rng([cfg.seed, split])
    N = cfg.K * cfg.videos_per_class
    if cfg.label_mode == "balanced":
        labels = np.repeat(np.arange(cfg.K), cfg.videos_per_class)
        labels = rng.permutation(labels)
    else:
        labels = rng.integers(0, cfg.K, size=N)
    width = len(str(N - 1))
    videos, segments = [], {}
    for n in range(N):
        y = int(labels[n])
        X = bg + cfg.background_noise * rng.standard_normal((cfg.T, cfg.feature_dim))
        count = int(rng.integers(cfg.actions_per_video[0], cfg.actions_per_video[1] + 1))
        lengths = [int(x) for x in rng.integers(cfg.action_length[0], cfg.action_length[1] + 1, size=count)]
        starts = _place_segments(rng, cfg.T, lengths)
        segs = []
        for s, L in zip(starts, lengths):
            X[s:s + L] = centers[y] + cfg.action_noise * rng.standard_normal((L, cfg.feature_dim))
            segs.append(Segment(s, s + L, y))
        vid = f"{id_prefix}_{n:0{width}d}"
        videos.append(SnippetFeatureSet(vid, X))
        segments[vid] = segs
    return Dataset(videos, cfg.K), GroundTruth(segments, "snippet")


def action_mask(gt: GroundTruth, video_id: str, T: int) -> np.ndarray:
    m = np.zeros(T, dtype=bool)
    for s in gt.in_snippets().segments.get(video_id, []):
        m[int(np.floor(s.start)):int(np.ceil(s.end))] = True
    return m
