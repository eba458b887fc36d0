"""Diarization scoring: posterior decoding, collar DER, per-block probes."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.ndimage import median_filter
from scipy.optimize import linear_sum_assignment

FRAME_STEP_SEC = 0.1
DEFAULT_COLLAR = 0.25
DEFAULT_RESOLUTION = 0.01
DEFAULT_THRESHOLD = 0.5
DEFAULT_MEDIAN = 11


class UndefinedMetricError(ValueError):
    pass


class SegmentFormatError(ValueError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}, line {lineno}: {msg}")
        self.lineno = lineno


class Segment(NamedTuple):
    recording_id: str
    start: float
    end: float
    speaker: str


@dataclass
class DerCounts:
    """Scored quantities in resolution frames (speaker-weighted)."""
    ref_speech: int = 0
    miss: int = 0
    false_alarm: int = 0
    confusion: int = 0
    excluded: int = 0
    resolution: float = DEFAULT_RESOLUTION

    def __iadd__(self, other: "DerCounts"):
        self.ref_speech += other.ref_speech
        self.miss += other.miss
        self.false_alarm += other.false_alarm
        self.confusion += other.confusion
        self.excluded += other.excluded
        return self

    def report(self) -> "DerReport":
        if self.ref_speech == 0:
            raise UndefinedMetricError("DER is undefined: reference contains no scored speech")
        n = self.ref_speech
        ms, fa, cf = self.miss / n, self.false_alarm / n, self.confusion / n
        return DerReport((self.miss + self.false_alarm + self.confusion) / n, ms, fa, cf,
                         n * self.resolution, self.excluded * self.resolution)


@dataclass
class DerReport:
    der: float
    miss: float
    false_alarm: float
    confusion: float
    scored_speech_sec: float
    excluded_collar_sec: float

    def as_lines(self, prefix="") -> list[str]:
        return [f"{prefix}DER={self.der:.4f}", f"{prefix}miss={self.miss:.4f}",
                f"{prefix}false_alarm={self.false_alarm:.4f}", f"{prefix}confusion={self.confusion:.4f}",
                f"{prefix}scored_speech_sec={self.scored_speech_sec:.2f}",
                f"{prefix}excluded_collar_sec={self.excluded_collar_sec:.2f}"]


# ---------------------------------------------------------------- segment files


def read_segments(path) -> list[Segment]:
    segs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise SegmentFormatError(path, lineno, f"expected 4 fields, got {len(parts)}")
            try:
                start, end = float(parts[1]), float(parts[2])
            except ValueError:
                raise SegmentFormatError(path, lineno, "start/end are not numbers") from None
            if not (np.isfinite(start) and np.isfinite(end)) or start < 0:
                raise SegmentFormatError(path, lineno, "times must be finite and non-negative")
            if end <= start:
                raise SegmentFormatError(path, lineno, f"non-positive duration ({start} -> {end})")
            segs.append(Segment(parts[0], start, end, parts[3]))
    return segs


def write_segments(path, segs):
    with open(path, "w", encoding="utf-8") as fh:
        for s in segs:
            fh.write(f"{s.recording_id} {s.start:.3f} {s.end:.3f} {s.speaker}\n")


# ---------------------------------------------------------------- decoding


def overlap_ratio(Y) -> float:
    """Frames with two or more active speakers over frames with at least one."""
    Y = np.asarray(Y)
    if Y.ndim != 2 or Y.shape[1] < 2:
        raise ValueError(f"overlap ratio needs a T x S label matrix with S >= 2, got {Y.shape}")
    n = Y.sum(axis=1)
    speech = int((n >= 1).sum())
    if speech == 0:
        raise UndefinedMetricError("overlap ratio is undefined without speech frames")
    return int((n >= 2).sum()) / speech


def activity_to_segments(active: np.ndarray, frame_step_sec, recording_id="rec", speakers=None):
    T, S = active.shape
    speakers = speakers or [f"spk{s}" for s in range(S)]
    segs = []
    for s in range(S):
        a = np.concatenate([[0], active[:, s].astype(np.int8), [0]])
        d = np.diff(a)
        for b, e in zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)):
            segs.append(Segment(recording_id, b * frame_step_sec, e * frame_step_sec, speakers[s]))
    segs.sort(key=lambda x: (x.start, x.speaker))
    return segs


def binarize(posterior, threshold=DEFAULT_THRESHOLD, median_window=DEFAULT_MEDIAN) -> np.ndarray:
    if median_window < 1 or median_window % 2 == 0:
        raise ValueError(f"median window must be a positive odd integer, got {median_window}")
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    b = (np.asarray(posterior) > threshold).astype(np.uint8)
    if median_window > 1:
        b = median_filter(b, size=(median_window, 1), mode="nearest")
    return b


def decode(posterior, threshold=DEFAULT_THRESHOLD, median_window=DEFAULT_MEDIAN,
           frame_step_sec=FRAME_STEP_SEC, recording_id="rec"):
    return activity_to_segments(binarize(posterior, threshold, median_window),
                                frame_step_sec, recording_id)


# ---------------------------------------------------------------- DER


def _to_frames(t, res):
    return int(round(t / res))


def _activity(segs, speakers, n, res):
    A = np.zeros((n, len(speakers)), dtype=bool)
    col = {s: i for i, s in enumerate(speakers)}
    for s in segs:
        A[_to_frames(s.start, res):_to_frames(s.end, res), col[s.speaker]] = True
    return A


def best_mapping(overlap: np.ndarray) -> list[tuple[int, int]]:
    """One-to-one (ref, hyp) pairs maximizing total overlap."""
    R, H = overlap.shape
    if min(R, H) == 0:
        return []
    if max(R, H) <= 6:
        best, best_val = None, -1
        if R <= H:
            for hs in permutations(range(H), R):
                v = sum(overlap[r, h] for r, h in enumerate(hs))
                if v > best_val:
                    best, best_val = list(enumerate(hs)), v
        else:
            for rs in permutations(range(R), H):
                v = sum(overlap[r, h] for h, r in enumerate(rs))
                if v > best_val:
                    best, best_val = [(r, h) for h, r in enumerate(rs)], v
        return best
    rows, cols = linear_sum_assignment(-overlap)
    return list(zip(rows.tolist(), cols.tolist()))


def der_counts(ref, hyp, collar_sec=DEFAULT_COLLAR, resolution_sec=DEFAULT_RESOLUTION) -> DerCounts:
    if collar_sec < 0:
        raise ValueError(f"collar must be >= 0, got {collar_sec}")
    res = resolution_sec
    total = DerCounts(resolution=res)
    recordings = sorted({s.recording_id for s in ref} | {s.recording_id for s in hyp})
    for rec in recordings:
        r = [s for s in ref if s.recording_id == rec]
        h = [s for s in hyp if s.recording_id == rec]
        n = max([_to_frames(s.end, res) for s in r + h] + [0])
        R = _activity(r, sorted({s.speaker for s in r}), n, res)
        Hm = _activity(h, sorted({s.speaker for s in h}), n, res)
        scored = np.ones(n, dtype=bool)
        c = _to_frames(collar_sec, res)
        if c > 0:
            for s in r:
                for b in (_to_frames(s.start, res), _to_frames(s.end, res)):
                    scored[max(0, b - c):max(0, b + c)] = False
        R, Hm = R[scored], Hm[scored]
        overlap = R.T.astype(np.int64) @ Hm.astype(np.int64)
        nr, nh = R.sum(axis=1), Hm.sum(axis=1)
        correct = np.zeros(len(R), dtype=np.int64)
        for i, j in best_mapping(overlap):
            correct += R[:, i] & Hm[:, j]
        total += DerCounts(int(nr.sum()), int(np.maximum(nr - nh, 0).sum()),
                           int(np.maximum(nh - nr, 0).sum()),
                           int((np.minimum(nr, nh) - correct).sum()), int((~scored).sum()), res)
    return total


def der(ref, hyp, collar_sec=DEFAULT_COLLAR, resolution_sec=DEFAULT_RESOLUTION) -> DerReport:
    """Frame-discretized DER; the collar is applied around reference boundaries only."""
    return der_counts(ref, hyp, collar_sec, resolution_sec).report()


# ---------------------------------------------------------------- model probes


def _posteriors_by_block(config, params, dialogues, blocks, batch=32):
    from .model import head, head_name, run

    out = {p: [] for p in blocks}
    for i in range(0, len(dialogues), batch):
        chunk = dialogues[i:i + batch]
        lengths = {d.T for d in chunk}
        groups = [chunk] if len(lengths) == 1 else [[d] for d in chunk]
        for g in groups:
            X = np.stack([d.features for d in g])
            res = run(X, config, params, want_all_blocks=False)
            for p in blocks:
                name = head_name(config, p)
                if not config.shared_head and config.aux_mode == "none":
                    name = head_name(config, config.P)
                y = head(res.embeddings[p], params, name).data
                out[p].extend(y[k] for k in range(len(g)))
    return out


def score_dialogues(posteriors, dialogues, threshold=DEFAULT_THRESHOLD,
                    median_window=DEFAULT_MEDIAN, collar_sec=DEFAULT_COLLAR):
    """Per-recording DerCounts for a list of T x S posteriors."""
    counts = []
    for post, d in zip(posteriors, dialogues):
        ref = activity_to_segments(d.labels, FRAME_STEP_SEC, d.id)
        hyp = decode(post, threshold, median_window, FRAME_STEP_SEC, d.id)
        counts.append(der_counts(ref, hyp, collar_sec))
    return counts


def aggregate(counts) -> DerReport:
    total = DerCounts(resolution=counts[0].resolution if counts else DEFAULT_RESOLUTION)
    for c in counts:
        total += c
    return total.report()


def evaluate(config, params, dialogues, threshold=DEFAULT_THRESHOLD,
             median_window=DEFAULT_MEDIAN, collar_sec=DEFAULT_COLLAR):
    """(aggregate DerReport, per-recording DerCounts) for the final block."""
    posts = _posteriors_by_block(config, params, dialogues, [config.P])[config.P]
    counts = score_dialogues(posts, dialogues, threshold, median_window, collar_sec)
    return aggregate(counts), counts


def probe_blocks(config, params, dialogues, threshold=DEFAULT_THRESHOLD,
                 median_window=DEFAULT_MEDIAN, collar_sec=DEFAULT_COLLAR) -> list[float]:
    """Corpus DER of every block's posteriors, blocks 1..P.

    Models trained without auxiliary heads reuse the final head on every block.
    """
    blocks = list(range(1, config.P + 1))
    posts = _posteriors_by_block(config, params, dialogues, blocks)
    return [aggregate(score_dialogues(posts[p], dialogues, threshold, median_window, collar_sec)).der
            for p in blocks]


def dump_embeddings(config, params, X, p, path=None, labels=None) -> np.ndarray:
    """E^p for one recording; written as a matrix text file (labels alongside as ``.lab``)."""
    from .features import write_labels, write_matrix
    from .model import forward

    if not 1 <= p <= config.P:
        raise ValueError(f"block index must lie in 1..{config.P}, got {p}")
    E = forward(X, config, params)[0][p].data
    if path is not None:
        write_matrix(path, E, fmt="%.9g")
        if labels is not None:
            write_labels(Path(str(path) + ".lab"), np.asarray(labels))
    return E
