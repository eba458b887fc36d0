"""Feature-level two-speaker dialogue simulator.

Each speaker alternates speech and pause runs with geometric durations.  The
mean pause length is tuned by bisection until the measured overlap ratio is
close to the requested one.  Features are the sum of the active speakers'
per-dialogue signature vectors plus Gaussian noise.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .features import FEAT_DIM, read_labels, read_matrix, write_labels, write_matrix
from .metrics import overlap_ratio

log = logging.getLogger(__name__)

OVERLAP_TOL = 0.05
MAX_OVERLAP = 0.95


class TuningError(RuntimeError):
    pass


@dataclass(frozen=True)
class DialogueSpec:
    num_speakers: int = 2
    total_frames: int = 200
    mean_utt_frames: float = 20.0
    mean_pause_frames: float = 10.0
    target_overlap: float = 0.34
    seed: int = 0
    noise_std: float = 0.5
    speaker_sig_std: float = 1.0
    feat_dim: int = FEAT_DIM

    def __post_init__(self):
        if self.total_frames < 50:
            raise ValueError(f"total_frames must be >= 50, got {self.total_frames}")
        if not 0 <= self.target_overlap < 1:
            raise ValueError(f"target_overlap must lie in [0, 1), got {self.target_overlap}")
        if self.mean_utt_frames <= 0 or self.mean_pause_frames <= 0:
            raise ValueError("mean durations must be positive")
        if self.num_speakers < 2:
            raise ValueError(f"num_speakers must be >= 2, got {self.num_speakers}")
        if self.noise_std < 0 or self.speaker_sig_std < 0:
            raise ValueError("standard deviations must be non-negative")


@dataclass
class Dialogue:
    id: str
    labels: np.ndarray
    features: np.ndarray
    measured_overlap: float
    seed: int

    @property
    def T(self) -> int:
        return self.labels.shape[0]


def _geometric(u: np.ndarray, mean: float, min_len: int) -> np.ndarray:
    """Inverse-CDF geometric durations with the given mean, support {min_len, ...}."""
    extra = mean - min_len
    if extra <= 0:
        return np.full(u.shape, min_len, dtype=np.int64)
    q = extra / (1.0 + extra)  # continuation probability
    return min_len + np.floor(np.log1p(-u) / math.log(q)).astype(np.int64)


def _render(u_state, u_speech, u_pause, T, mean_utt, mean_pause) -> np.ndarray:
    """One speaker's activity track from fixed uniforms (common random numbers)."""
    speech = _geometric(u_speech, mean_utt, 1)
    pause = _geometric(u_pause, mean_pause, 0)
    track = np.zeros(T, dtype=np.uint8)
    on = u_state < mean_utt / (mean_utt + mean_pause)
    t, i = 0, 0
    while t < T:
        if on:
            n = int(speech[i % len(speech)])
            track[t:t + n] = 1
        else:
            n = int(pause[i % len(pause)])
        t += n
        on = not on
        i += on  # next pair after completing a speech+pause cycle
    return track


def _labels_for(uniforms, T, mean_utt, mean_pause) -> np.ndarray:
    return np.stack([_render(*u, T, mean_utt, mean_pause) for u in uniforms], axis=1)


def _measure(labels) -> float:
    try:
        return overlap_ratio(labels)
    except ValueError:
        return 0.0


def gen_labels(spec: DialogueSpec) -> np.ndarray:
    """T x S binary activity matrix with overlap ratio within 0.05 of the target."""
    if spec.target_overlap >= MAX_OVERLAP:
        raise TuningError(f"target overlap {spec.target_overlap} is not attainable (limit {MAX_OVERLAP})")
    T, S = spec.total_frames, spec.num_speakers
    base = np.random.SeedSequence([spec.seed, 0])
    for attempt, child in enumerate(base.spawn(16)):
        rng = np.random.default_rng(child)
        uniforms = [(rng.random(), rng.random(T + 1), rng.random(T + 1)) for _ in range(S)]
        # overlap shrinks as pauses lengthen; search log(mean pause)
        lo, hi = math.log(1e-3), math.log(1e3 * spec.mean_utt_frames)
        best, best_err = None, math.inf
        for _ in range(48):
            mid = 0.5 * (lo + hi)
            lab = _labels_for(uniforms, T, spec.mean_utt_frames, math.exp(mid))
            rho = _measure(lab)
            err = abs(rho - spec.target_overlap)
            if err < best_err and lab.any():
                best, best_err = lab, err
            if rho > spec.target_overlap:
                lo = mid
            else:
                hi = mid
        if best is not None and best_err <= OVERLAP_TOL:
            return best
        log.debug("seed %d attempt %d missed target by %.3f", spec.seed, attempt, best_err)
    raise TuningError(f"could not reach overlap {spec.target_overlap} +/- {OVERLAP_TOL} (seed {spec.seed})")


def speaker_signatures(spec: DialogueSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 1])
    return rng.normal(0.0, spec.speaker_sig_std, size=(spec.num_speakers, spec.feat_dim))


def labels_to_features(labels: np.ndarray, spec: DialogueSpec) -> np.ndarray:
    mu = speaker_signatures(spec)
    rng = np.random.default_rng([spec.seed, 2])
    noise = rng.normal(0.0, 1.0, size=(labels.shape[0], spec.feat_dim)) * spec.noise_std
    return (labels.astype(np.float64) @ mu + noise).astype(np.float32)


def gen_dialogue(spec: DialogueSpec, id: str | None = None) -> Dialogue:
    labels = gen_labels(spec)
    feats = labels_to_features(labels, spec)
    return Dialogue(id or f"dlg{spec.seed:08d}", labels, feats, overlap_ratio(labels), spec.seed)


def make_dialogues(n: int, spec: DialogueSpec, prefix="dlg") -> list[Dialogue]:
    """``n`` dialogues with seeds ``spec.seed + i``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return [gen_dialogue(replace(spec, seed=spec.seed + i), f"{prefix}{i:05d}") for i in range(n)]


# ---------------------------------------------------------------- on-disk corpus

MANIFEST = "manifest.txt"


def gen_corpus(n: int, spec: DialogueSpec, out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"{out}: cannot create corpus directory ({e.strerror})") from e
    dialogues = make_dialogues(n, spec)
    lines = ["# " + " ".join(f"{k}={v}" for k, v in asdict(spec).items())]
    for d in dialogues:
        for path, write in ((out / f"{d.id}.feat", lambda p: write_matrix(p, d.features)),
                            (out / f"{d.id}.lab", lambda p: write_labels(p, d.labels))):
            try:
                write(path)
            except OSError as e:
                raise OSError(f"{path}: {e.strerror}") from e
        lines.append(f"{d.id} {d.seed} {d.T} {d.measured_overlap:.6f}")
    manifest = out / MANIFEST
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def read_manifest(corpus_dir):
    """Returns (spec or None, [(id, seed, T, rho), ...])."""
    path = Path(corpus_dir) / MANIFEST
    spec, rows = None, []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            kv = dict(tok.split("=", 1) for tok in line[1:].split())
            if kv:
                spec = _spec_from_strings(kv)
            continue
        if not line.strip():
            continue
        rid, seed, T, rho = line.split()
        rows.append((rid, int(seed), int(T), float(rho)))
    return spec, rows


def _spec_from_strings(kv: dict) -> DialogueSpec:
    types = {k: type(v) for k, v in asdict(DialogueSpec()).items()}
    return DialogueSpec(**{k: types[k](v) for k, v in kv.items() if k in types})


def load_corpus(corpus_dir) -> list[Dialogue]:
    d = Path(corpus_dir)
    _, rows = read_manifest(d)
    out = []
    for rid, seed, T, rho in rows:
        feats = read_matrix(d / f"{rid}.feat")
        labels = read_labels(d / f"{rid}.lab")
        if feats.shape[0] != T or labels.shape[0] != T:
            raise ValueError(f"{d / rid}: manifest says T={T}, files have {feats.shape[0]}/{labels.shape[0]}")
        out.append(Dialogue(rid, labels, feats, rho, seed))
    return out
