"""Permutation-invariant diarization loss and the two auxiliary-loss variants.

Posterior arguments may be tensors (gradients flow) or plain arrays.  They
are either a single chunk (T x S) or a batch of equal-length chunks
(B x T x S); in the batched case every chunk gets its own permutation and the
loss is the mean over chunks.  The selected permutation is a constant for
the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations
from typing import Optional

import numpy as np

from . import tensor as tn
from .tensor import SIGMOID_EPS, Tensor

MAX_SPEAKERS = 6


class PermutationLimitError(ValueError):
    pass


@dataclass
class LossReport:
    total: Tensor
    diar: Tensor
    aux: Tensor
    phi_main: object
    phi_per_block: Optional[dict] = field(default=None)


def _as_tensor(p) -> Tensor:
    return p if isinstance(p, Tensor) else Tensor(p, dtype=np.float64)


def bce(y, p, eps=SIGMOID_EPS) -> float:
    """Sum over speakers of the binary cross-entropy of one frame."""
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if y.shape != p.shape:
        raise tn.DimensionError(f"bce: labels {y.shape} vs posteriors {p.shape}")
    p = np.clip(p, eps, 1 - eps)
    return float(-(y * np.log(p) + (1 - y) * np.log1p(-p)).sum())


def all_permutations(S: int) -> list[tuple]:
    if S > MAX_SPEAKERS:
        raise PermutationLimitError(
            f"exhaustive search limit: S={S} exceeds {MAX_SPEAKERS} speakers")
    return list(permutations(range(S)))


def permutation_costs(Y: np.ndarray, P_hat: np.ndarray, eps=SIGMOID_EPS) -> np.ndarray:
    """Summed cross-entropy of every column permutation of ``Y``, in lexicographic order.

    Works on the last two axes; returns shape (..., S!).
    """
    Y = np.asarray(Y, dtype=np.float64)
    P = np.clip(np.asarray(P_hat, dtype=np.float64), eps, 1 - eps)
    lp, lq = np.log(P), np.log1p(-P)
    perms = all_permutations(Y.shape[-1])
    # cost[phi] = -sum_t sum_s Y[t, phi(s)] log P[t, s] + (1 - Y[t, phi(s)]) log(1 - P[t, s])
    # pairwise[a, b] = -sum_t Y[t, a] log P[t, b] + (1 - Y[t, a]) log(1 - P[t, b])
    pair = -(np.swapaxes(Y, -1, -2) @ lp + np.swapaxes(1 - Y, -1, -2) @ lq)
    S = Y.shape[-1]
    return np.stack([sum(pair[..., phi[s], s] for s in range(S)) for phi in perms], axis=-1)


def best_permutation(Y, P_hat) -> tuple:
    costs = permutation_costs(Y, P_hat)
    # argmin returns the first minimum, i.e. the lexicographically smallest mapping
    return all_permutations(Y.shape[-1])[int(np.argmin(costs))]


def _fixed_perm_loss(Y: np.ndarray, post, perms, logits=None) -> Tensor:
    """Mean per-element cross-entropy with each chunk's labels permuted by ``perms``."""
    Y = np.asarray(Y)
    if Y.ndim == 2:
        target = Y[:, list(perms[0])]
    else:
        target = np.stack([Y[b][:, list(phi)] for b, phi in enumerate(perms)])
    n = target.size
    if logits is not None:
        return tn.sigmoid_bce(logits, target, weight=1.0 / n)
    return tn.bce(_as_tensor(post), target, weight=1.0 / n)


def _select(Y, post) -> list[tuple]:
    P = post.data if isinstance(post, Tensor) else np.asarray(post)
    Y = np.asarray(Y)
    if Y.shape != P.shape:
        raise tn.DimensionError(f"labels {Y.shape} vs posteriors {P.shape}")
    perms = all_permutations(Y.shape[-1])
    costs = permutation_costs(Y, P).reshape(-1, len(perms))
    return [perms[int(i)] for i in np.argmin(costs, axis=-1)]


def diarization_loss(Y, P_hat, logits=None):
    """Permutation-invariant loss; returns (loss, phi).

    ``phi`` is a tuple for a single chunk or a list of tuples for a batch.
    ``logits``, when given, is used for the fused cross-entropy gradient.
    """
    perms = _select(Y, P_hat)
    loss = _fixed_perm_loss(Y, P_hat, perms, logits)
    return loss, (perms[0] if np.ndim(Y) == 2 else perms)


def shared_aux_loss(Y, posteriors, phi_P, logits=None) -> Tensor:
    """Lower blocks scored against the labels permuted by the final block's phi."""
    if not posteriors:
        return Tensor(0.0, dtype=np.float64)
    perms = [phi_P] if np.ndim(Y) == 2 else list(phi_P)
    terms = [_fixed_perm_loss(Y, post, perms, None if logits is None else logits[i])
             for i, post in enumerate(posteriors)]
    return tn.scale(tn.add_scalars(terms), 1.0 / len(terms))


def indiv_aux_loss(Y, posteriors, logits=None):
    """Lower blocks each with their own optimal permutation; returns (loss, phis)."""
    if not posteriors:
        return Tensor(0.0, dtype=np.float64), []
    terms, phis = [], []
    for i, post in enumerate(posteriors):
        loss, phi = diarization_loss(Y, post, None if logits is None else logits[i])
        terms.append(loss)
        phis.append(phi)
    return tn.scale(tn.add_scalars(terms), 1.0 / len(terms)), phis


def total_loss(Y, posteriors: dict, config, logits: Optional[dict] = None) -> LossReport:
    """``L_d + lambda * L_aux`` from a {block: posterior} mapping.

    Block ``config.P`` must be present; blocks 1..P-1 are required when an
    auxiliary loss is configured.
    """
    P = config.P
    if P not in posteriors:
        raise tn.ContractError(f"final-block posterior (block {P}) missing")
    lg = logits or {}
    diar, phi = diarization_loss(Y, posteriors[P], lg.get(P))
    zero = Tensor(0.0, dtype=diar.data.dtype)
    if config.aux_mode == "none" or P == 1:
        return LossReport(diar, diar, zero, phi)
    lower = list(range(1, P))
    missing = [p for p in lower if p not in posteriors]
    if missing:
        raise tn.ContractError(f"aux_mode={config.aux_mode} needs posteriors for blocks {missing}")
    posts = [posteriors[p] for p in lower]
    low_logits = [lg[p] for p in lower] if all(p in lg for p in lower) else None
    per_block = None
    if config.aux_mode == "shared":
        aux = shared_aux_loss(Y, posts, phi, low_logits)
    else:
        aux, phis = indiv_aux_loss(Y, posts, low_logits)
        per_block = dict(zip(lower, phis))
    total = tn.add_scalars([diar, tn.scale(aux, config.lam)]) if config.lam else diar
    return LossReport(total, diar, aux, phi, per_block)
