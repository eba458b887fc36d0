"""Adam + warm-up training loop, chunked batching, checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import losses
from . import tensor as tn
from .metrics import aggregate, score_dialogues
from .model import ModelConfig, init_params, run

log = logging.getLogger(__name__)

MAGIC = b"RXEE"
FORMAT_VERSION = 1


class DivergenceError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    chunk_frames: int = 500
    batch_size: int = 8
    warmup_steps: int = 25000
    lr_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    grad_clip: float = 5.0
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if self.epochs < 0 or self.batch_size < 1 or self.chunk_frames < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and chunk_frames >= 1 required")
        if not 0 <= self.val_fraction < 1:
            raise ValueError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def noam_lr(step: int, D: int, warmup: int, k: float = 1.0) -> float:
    if step < 1:
        raise ValueError(f"learning-rate step must be >= 1, got {step}")
    return k * D ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place so the global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm and norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1=0.9, beta2=0.98, eps=1e-9, grad_clip=5.0):
    """One bias-corrected Adam update, in place on the parameter arrays."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in parameter {name!r}")
    clip_gradients(grads, grad_clip)
    state.step += 1
    t = state.step
    c1, c2 = 1 - beta1 ** t, 1 - beta2 ** t
    for name, g in grads.items():
        p = params[name]
        data = p.data if isinstance(p, tn.Tensor) else p
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(data)
            state.v[name] = np.zeros_like(data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(data.dtype)


# ---------------------------------------------------------------- data plumbing


def make_chunks(dialogues, chunk_frames):
    """(features, labels) windows of at most ``chunk_frames`` frames."""
    out = []
    for d in dialogues:
        for s in range(0, d.T, chunk_frames):
            out.append((d.features[s:s + chunk_frames], d.labels[s:s + chunk_frames]))
    return out


def split_validation(dialogues, fraction, seed):
    n_val = int(round(len(dialogues) * fraction))
    if n_val == 0 or len(dialogues) - n_val < 1:
        return list(dialogues), []
    order = np.random.default_rng([seed, 7]).permutation(len(dialogues))
    val = set(order[:n_val].tolist())
    return ([d for i, d in enumerate(dialogues) if i not in val],
            [d for i, d in enumerate(dialogues) if i in val])


def batch_loss(batch, config: ModelConfig, params, rng):
    """Loss over one batch (equal-length chunks share a forward pass)."""
    groups: dict[int, list] = {}
    for X, Y in batch:
        groups.setdefault(len(X), []).append((X, Y))
    n = len(batch)
    terms, parts = [], np.zeros(3)
    dtype = params["embed.linear.w"].data.dtype
    for items in groups.values():
        X = np.stack([x for x, _ in items]).astype(dtype)
        Y = np.stack([y for _, y in items])
        out = run(X, config, params, train=True, rng=rng)
        rep = losses.total_loss(Y, out.posteriors, config, out.logits)
        w = len(items) / n
        terms.append(tn.scale(rep.total, w))
        parts += w * np.array([rep.total.item(), rep.diar.item(), rep.aux.item()])
    return (terms[0] if len(terms) == 1 else tn.add_scalars(terms)), parts


@dataclass
class TrainResult:
    config: ModelConfig
    train_config: TrainConfig
    params: dict
    best_params: dict
    state: AdamState
    log: list  # (epoch, total, diar, aux, val_der)
    rng_state: dict | None = None


def _snapshot(params):
    return {k: v.data.copy() for k, v in params.items()}


def validation_der(config, params, dialogues):
    from .metrics import _posteriors_by_block

    posts = _posteriors_by_block(config, params, dialogues, [config.P])[config.P]
    return aggregate(score_dialogues(posts, dialogues, 0.5, 1, 0.25)).der


def train(config: ModelConfig, tc: TrainConfig, corpus, params=None, state=None,
          run_dir=None, log_every=0) -> TrainResult:
    """Train on a list of dialogues; returns final/best parameters and the epoch log.

    With ``run_dir`` set, ``loss.log``, ``best.ckpt`` and ``final.ckpt`` are written there.
    """
    rng = np.random.default_rng([tc.seed, 1])
    if params is None:
        params = init_params(config, seed=tc.seed)
    state = state or AdamState()
    train_set, val_set = split_validation(corpus, tc.val_fraction, tc.seed)
    chunks = make_chunks(train_set, tc.chunk_frames)
    if not chunks:
        raise ValueError("training corpus is empty")
    run_dir = Path(run_dir) if run_dir else None
    if run_dir:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "loss.log").write_text("", encoding="utf-8")
    history, best_der, best = [], math.inf, _snapshot(params)
    last_good = _snapshot(params)
    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(len(chunks))
        sums, nb = np.zeros(3), 0
        for b in range(0, len(order), tc.batch_size):
            batch = [chunks[i] for i in order[b:b + tc.batch_size]]
            with tn.Tape() as tape:
                loss, parts = batch_loss(batch, config, params, rng)
            if not np.isfinite(loss.item()):
                _abort(config, tc, last_good, state, run_dir, epoch)
            tape.backward(loss)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            for p in params.values():
                p.grad = None
            lr = noam_lr(state.step + 1, config.D, tc.warmup_steps, tc.lr_scale)
            try:
                adam_step(params, grads, state, lr, tc.beta1, tc.beta2, tc.adam_eps, tc.grad_clip)
            except DivergenceError:
                _abort(config, tc, last_good, state, run_dir, epoch)
            sums += parts
            nb += 1
            if log_every and nb % log_every == 0:
                log.info("epoch %d batch %d loss %.4f", epoch, nb, parts[0])
        mean = sums / max(nb, 1)
        val = validation_der(config, params, val_set) if val_set else float("nan")
        history.append((epoch, *mean.tolist(), val))
        log.info("epoch %d total %.5f diar %.5f aux %.5f val_der %.4f", epoch, *mean, val)
        last_good = _snapshot(params)
        if not val_set or val < best_der:
            best_der, best = val, _snapshot(params)
            if run_dir:
                save_checkpoint(run_dir / "best.ckpt", config, params, state, tc, rng)
        if run_dir:
            with open(run_dir / "loss.log", "a", encoding="utf-8") as fh:
                fh.write(format_log_line(history[-1]) + "\n")
    if run_dir:
        save_checkpoint(run_dir / "final.ckpt", config, params, state, tc, rng)
        if tc.epochs == 0:
            save_checkpoint(run_dir / "best.ckpt", config, params, state, tc, rng)
    return TrainResult(config, tc, params, best, state, history, rng.bit_generator.state)


def format_log_line(row) -> str:
    epoch, total, diar, aux, val = row
    return f"{epoch} {total:.6f} {diar:.6f} {aux:.6f} {val:.6f}"


def _abort(config, tc, last_good, state, run_dir, epoch):
    if run_dir:
        params = {k: tn.Tensor(v) for k, v in last_good.items()}
        save_checkpoint(run_dir / "last_good.ckpt", config, params, state, tc)
    raise DivergenceError(f"loss diverged (non-finite) during epoch {epoch}")


def finetune(checkpoint: "Checkpoint", corpus, tc: TrainConfig, config: ModelConfig | None = None,
             run_dir=None) -> TrainResult:
    """Continue training from a checkpoint with a fresh optimizer state."""
    if config is not None and config != checkpoint.config:
        raise CheckpointError("finetune: model config differs from the checkpoint's")
    params = {k: tn.parameter(v.copy(), name=k) for k, v in checkpoint.params.items()}
    return train(checkpoint.config, tc, corpus, params=params, state=AdamState(), run_dir=run_dir)


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict  # name -> float32 array
    state: AdamState
    train_config: dict
    rng_state: dict | None = None

    def tensors(self) -> dict:
        return {k: tn.parameter(v.copy(), name=k) for k, v in self.params.items()}


def _record(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(path, config: ModelConfig, params, state: AdamState, tc=None, rng=None):
    """Little-endian container: magic, version, JSON header, tensor records, CRC32."""
    meta = {"model": config.to_dict(), "train": tc.to_dict() if tc else {},
            "adam_step": state.step,
            "rng": rng.bit_generator.state if rng is not None else None}
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    recs = []
    for name, p in params.items():
        recs.append(_record(name, p.data if isinstance(p, tn.Tensor) else p))
    for name in sorted(state.m):
        recs.append(_record(f"adam.m/{name}", state.m[name]))
        recs.append(_record(f"adam.v/{name}", state.v[name]))
    body = (MAGIC + struct.pack("<I", FORMAT_VERSION) + struct.pack("<I", len(meta_raw)) + meta_raw
            + struct.pack("<I", len(recs)) + b"".join(recs))
    blob = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: CRC mismatch")
    off = 8
    (n,) = struct.unpack_from("<I", blob, off)
    off += 4
    meta = json.loads(blob[off:off + n].decode("utf-8"))
    off += n
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + ln].decode("utf-8")
        off += ln
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
        off += 4 * size
    state = AdamState(step=meta.get("adam_step", 0))
    params = {}
    for name, arr in tensors.items():
        if name.startswith("adam.m/"):
            state.m[name[7:]] = arr
        elif name.startswith("adam.v/"):
            state.v[name[7:]] = arr
        else:
            params[name] = arr
    return Checkpoint(ModelConfig.from_dict(meta["model"]), params, state, meta.get("train", {}), meta.get("rng"))
