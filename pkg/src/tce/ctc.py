"""CTC loss, an exhaustive alignment oracle, and greedy decoding.

The loss marginalizes over every frame-level path whose collapse
(merge adjacent duplicates, then drop blanks) equals the target label,
via the forward-backward recursion over the blank-augmented label, all
in log space. Class 0 is reserved for blank. The brute-force oracle
enumerates all L^T paths and is the independent reference the loss is
tested against.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor, _accum, _make, linear, permute, reshape

NEG_INF = -np.inf


class CtcError(ValueError):
    """Label/logit combination the loss cannot score."""


@dataclass(frozen=True)
class Alphabet:
    """Ordered symbol set; class 0 is the blank, symbol i maps to class i+1."""

    symbols: str

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError(f"alphabet symbols must be unique: {self.symbols!r}")

    @property
    def blank_index(self) -> int:
        return 0

    @property
    def num_classes(self) -> int:
        """Symbol count plus the blank."""
        return len(self.symbols) + 1

    def encode(self, text: str) -> tuple[int, ...]:
        try:
            return tuple(self.symbols.index(ch) + 1 for ch in text)
        except ValueError:
            bad = next(ch for ch in text if ch not in self.symbols)
            raise ValueError(f"character {bad!r} not in alphabet {self.symbols!r}") from None

    def decode(self, indices: Iterable[int]) -> str:
        out = []
        for i in indices:
            if not 1 <= i < self.num_classes:
                raise ValueError(f"class index {i} out of range for alphabet of {len(self.symbols)}")
            out.append(self.symbols[i - 1])
        return "".join(out)


@dataclass(frozen=True)
class LabelSeq:
    """A target string with its non-blank class indices."""

    indices: tuple[int, ...]
    text: str

    @classmethod
    def from_text(cls, alphabet: Alphabet, text: str) -> "LabelSeq":
        return cls(indices=alphabet.encode(text), text=text)

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def min_frames(self) -> int:
        """Shortest logit sequence that can emit this label: one frame per
        symbol plus a separating blank per adjacent repeat."""
        repeats = sum(1 for a, b in zip(self.indices, self.indices[1:]) if a == b)
        return len(self.indices) + repeats


DIGITS = Alphabet("0123456789")


def collapse(path: Sequence[int], blank: int = 0) -> tuple[int, ...]:
    """Merge adjacent duplicates, then drop blanks."""
    out = []
    prev = None
    for k in path:
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return tuple(out)


def project_logits(seq: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-timestep affine map from (N, C, T) features to (N, T, L) scores."""
    n, c, t = seq.shape
    flat = reshape(permute(seq, (0, 2, 1)), (n * t, c))
    return reshape(linear(flat, weight, bias), (n, t, weight.shape[0]))


def _extended_labels(labels: Sequence[LabelSeq], num_classes: int):
    """Blank-augmented label matrix plus masks, padded to the longest label."""
    n = len(labels)
    s_max = max(2 * len(l) + 1 for l in labels)
    ext = np.zeros((n, s_max), dtype=np.int64)
    s_len = np.zeros(n, dtype=np.int64)
    for i, lab in enumerate(labels):
        for k in lab.indices:
            if not 1 <= k < num_classes:
                raise CtcError(f"sample {i}: label class {k} out of range (L={num_classes})")
        s_len[i] = 2 * len(lab) + 1
        ext[i, 1:s_len[i]:2] = lab.indices
    valid = np.arange(s_max)[None, :] < s_len[:, None]
    skip = np.zeros((n, s_max), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != 0) & (ext[:, 2:] != ext[:, :-2]) & valid[:, 2:]
    return ext, s_len, valid, skip


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def ctc_loss(logits: Tensor, labels: Sequence[LabelSeq]) -> Tensor:
    """Mean negative log-probability of the labels under the logits.

    ``logits`` is (N, T, L) with L = alphabet size + blank. Returns a
    scalar tensor whose backward pass produces the exact forward-backward
    gradient with respect to the logits. Internals run in float64.
    """
    if logits.data.ndim != 3:
        raise CtcError(f"logits must be (N, T, L), got {logits.shape}")
    n, t_len, num_classes = logits.shape
    if len(labels) != n:
        raise CtcError(f"{len(labels)} labels for batch of {n}")
    for i, lab in enumerate(labels):
        if len(lab) == 0:
            raise CtcError(f"sample {i}: empty label")
        if lab.min_frames > t_len:
            raise CtcError(
                f"sample {i}: label {lab.text!r} needs {lab.min_frames} frames, only {t_len} available")

    logp = _log_softmax(logits.data.astype(np.float64))
    ext, s_len, valid, skip = _extended_labels(labels, num_classes)
    s_max = ext.shape[1]
    # emit[n, t, s] = log p(class ext[n, s] at frame t)
    emit = np.take_along_axis(logp, np.broadcast_to(ext[:, None, :], (n, t_len, s_max)), axis=2)

    def shift1(a):
        return np.concatenate([np.full((n, 1), NEG_INF), a[:, :-1]], axis=1)

    def shift2_fwd(a):
        shifted = np.concatenate([np.full((n, 2), NEG_INF), a[:, :-2]], axis=1)
        return np.where(skip, shifted, NEG_INF)

    alpha = np.full((n, t_len, s_max), NEG_INF)
    a = np.full((n, s_max), NEG_INF)
    a[:, 0] = emit[:, 0, 0]
    a[:, 1] = emit[:, 0, 1]
    a = np.where(valid, a, NEG_INF)
    alpha[:, 0] = a
    for t in range(1, t_len):
        a = np.logaddexp(np.logaddexp(a, shift1(a)), shift2_fwd(a)) + emit[:, t]
        a = np.where(valid, a, NEG_INF)
        alpha[:, t] = a

    rows = np.arange(n)
    log_p = np.logaddexp(alpha[rows, -1, s_len - 1], alpha[rows, -1, s_len - 2])
    per_sample = -log_p
    loss_value = per_sample.mean()

    # beta[n, t, s]: log-probability of completing the label from frame t
    # onward, including the emission at t
    def shift1_back(b):
        return np.concatenate([b[:, 1:], np.full((n, 1), NEG_INF)], axis=1)

    def shift2_back(b):
        shifted = np.concatenate([b[:, 2:], np.full((n, 2), NEG_INF)], axis=1)
        allowed = np.concatenate([skip[:, 2:], np.zeros((n, 2), dtype=bool)], axis=1)
        return np.where(allowed, shifted, NEG_INF)

    beta = np.full((n, t_len, s_max), NEG_INF)
    b = np.full((n, s_max), NEG_INF)
    b[rows, s_len - 1] = emit[rows, t_len - 1, s_len - 1]
    b[rows, s_len - 2] = emit[rows, t_len - 1, s_len - 2]
    beta[:, t_len - 1] = b
    for t in range(t_len - 2, -1, -1):
        b = np.logaddexp(np.logaddexp(b, shift1_back(b)), shift2_back(b)) + emit[:, t]
        b = np.where(valid, b, NEG_INF)
        beta[:, t] = b

    # posterior mass per (frame, class): logsumexp of alpha+beta-emit over
    # the augmented-label positions carrying that class
    occupancy = alpha + beta - emit
    class_mass = np.full((n, t_len, num_classes), NEG_INF)
    n_idx, t_idx, s_idx = np.broadcast_arrays(
        rows[:, None, None], np.arange(t_len)[None, :, None], ext[:, None, :])
    np.logaddexp.at(class_mass, (n_idx.ravel(), t_idx.ravel(),
                                 np.broadcast_to(ext[:, None, :], occupancy.shape).ravel()),
                    occupancy.ravel())
    del s_idx
    with np.errstate(invalid="ignore"):
        grad = np.exp(logp) - np.exp(class_mass - log_p[:, None, None])
    grad /= n
    grad = np.nan_to_num(grad, nan=0.0, posinf=0.0, neginf=0.0)

    if not np.isfinite(loss_value):
        raise CtcError("non-finite CTC loss")
    out_data = np.asarray(loss_value, dtype=logits.data.dtype)
    grad = grad.astype(logits.data.dtype)

    def _bwd(g):
        if logits.requires_grad:
            _accum(logits, grad * g)

    return _make(out_data, (logits,), _bwd, "ctc_loss")


def ctc_brute_force(frame_probs, label: LabelSeq | Sequence[int]) -> float:
    """Total probability of the label by enumerating every frame path.

    ``frame_probs`` is (T, L) per-frame class probabilities. Exponential
    in T; refuses T > 10. This is the verification oracle: deliberately
    the dumbest possible implementation.
    """
    probs = frame_probs.data if isinstance(frame_probs, Tensor) else np.asarray(frame_probs)
    if probs.ndim != 2:
        raise ValueError(f"frame_probs must be (T, L), got {probs.shape}")
    t_len, num_classes = probs.shape
    if t_len > 10:
        raise ValueError(f"brute force enumerates L^T paths; T={t_len} is too large (max 10)")
    target = tuple(label.indices) if isinstance(label, LabelSeq) else tuple(label)
    rows = [list(map(float, probs[t])) for t in range(t_len)]
    total = 0.0
    for path in itertools.product(range(num_classes), repeat=t_len):
        if collapse(path) == target:
            total += math.prod(rows[t][k] for t, k in enumerate(path))
    return total


def greedy_decode(logits, alphabet: Alphabet) -> list[str]:
    """Best-path decode: per-frame argmax (ties to the lowest class),
    merge adjacent duplicates, drop blanks."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if arr.ndim != 3:
        raise ValueError(f"logits must be (N, T, L), got {arr.shape}")
    picks = arr.argmax(axis=2)
    return [alphabet.decode(collapse(row.tolist())) for row in picks]
