"""Erasure objectives on continuation logits and their closed-form gradients.

All losses average over the continuation positions of each sequence and
then take an unweighted mean over sequences. Prefix positions never
contribute.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch

from .model import Vocabulary
from .tensor import check_finite, log_softmax, softmax

LOSS_KINDS = ("EM", "NLL", "LS", "GA", "DI")


@dataclass(frozen=True)
class LossConfig:
    kind: str
    gamma: float | None = None

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        needs_gamma = self.kind in ("LS", "DI")
        if needs_gamma != (self.gamma is not None):
            raise ValueError(f"gamma must be given iff kind is LS or DI (kind={self.kind})")
        if self.gamma is not None and self.gamma < 0:
            raise ValueError("gamma must be nonnegative")


@dataclass(frozen=True)
class ForgetSequence:
    """Token ids split into a prefix of length ``p`` and the continuation."""

    tokens: tuple[int, ...]
    p: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if self.p < 1 or self.q < 1:
            raise ValueError(f"need p >= 1 and q >= 1, got p={self.p}, q={self.q}")

    @property
    def q(self) -> int:
        return len(self.tokens) - self.p

    @property
    def prefix(self) -> tuple[int, ...]:
        return self.tokens[: self.p]

    @property
    def continuation(self) -> tuple[int, ...]:
        return self.tokens[self.p :]

    @classmethod
    def from_text(cls, text: str | bytes, prefix_ratio: float = 0.5) -> "ForgetSequence":
        ids = Vocabulary.encode(text)
        return cls(tuple(ids), max(1, int(len(ids) * prefix_ratio)))


class SequenceBatch:
    """Right-padded batch of ForgetSequences."""

    def __init__(self, sequences: Sequence[ForgetSequence], context_length: int | None = None):
        if not sequences:
            raise ValueError("empty batch")
        self.sequences = list(sequences)
        lens = [len(s.tokens) for s in self.sequences]
        if context_length is not None and max(lens) > context_length:
            raise ValueError("sequence longer than context length")
        T = max(lens)
        self.tokens = torch.full((len(lens), T), Vocabulary.pad, dtype=torch.long)
        for i, s in enumerate(self.sequences):
            self.tokens[i, : len(s.tokens)] = torch.tensor(s.tokens)
        self.p = torch.tensor([s.p for s in self.sequences])
        self.q = torch.tensor([s.q for s in self.sequences])
        self.lengths = torch.tensor(lens)

    def __len__(self) -> int:
        return len(self.sequences)

    def continuation_index(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(logit positions, targets, mask), each ``[B, Qmax]``."""
        Q = int(self.q.max())
        offs = torch.arange(Q)[None]
        mask = offs < self.q[:, None]
        tgt_pos = (self.p[:, None] + offs).clamp(max=self.tokens.shape[1] - 1)
        targets = self.tokens.gather(1, tgt_pos)
        return tgt_pos - 1, targets, mask


def continuation_logits(model, batch: SequenceBatch) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Logits predicting each continuation token: ``[B, Q, V]``, targets, mask."""
    logits = model(batch.tokens)
    pos, targets, mask = batch.continuation_index()
    V = logits.shape[-1]
    picked = logits.gather(1, pos[..., None].expand(-1, -1, V))
    return picked, targets, mask


def _as_batch(x: torch.Tensor, *rest):
    """Lift ``[q, V]`` inputs to ``[1, q, V]``."""
    if x.dim() == 2:
        return (x[None],) + tuple(None if r is None else r[None] for r in rest)
    return (x,) + rest


def _reduce(per_pos: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    if mask is None:
        return per_pos.mean(dim=-1).mean()
    m = mask.to(per_pos.dtype)
    per_seq = (per_pos * m).sum(-1) / m.sum(-1).clamp_min(1)
    return per_seq.mean()


def em_loss(logits: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over positions of sum_y p log p; minimizing it maximizes entropy."""
    check_finite(logits.detach(), "logits")
    (logits, mask) = _as_batch(logits, mask)
    logp = log_softmax(logits)
    neg_entropy = (logp.exp() * logp).sum(-1)
    return _reduce(neg_entropy, mask)


def nll_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    check_finite(logits.detach(), "logits")
    targets = torch.as_tensor(targets)
    if targets.numel() and int(targets.max()) >= logits.shape[-1]:
        raise ValueError("target id outside vocabulary")
    (logits, targets, mask) = _as_batch(logits, targets, mask)
    logp = log_softmax(logits)
    nll = -logp.gather(-1, targets[..., None]).squeeze(-1)
    return _reduce(nll, mask)


def ga_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Gradient ascent objective: the negated NLL."""
    return -nll_loss(logits, targets, mask)


def ls_loss(logits: torch.Tensor, gamma: float, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Label-smoothing term ``-gamma * sum_j log p_j`` per position."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    check_finite(logits.detach(), "logits")
    (logits, mask) = _as_batch(logits, mask)
    return _reduce(-gamma * log_softmax(logits).sum(-1), mask)


def di_teacher_distribution(teacher_logits: torch.Tensor, targets: torch.Tensor, gamma: float) -> torch.Tensor:
    """softmax(teacher + gamma) on every non-target coordinate."""
    bump = torch.full_like(teacher_logits, gamma)
    bump.scatter_(-1, targets[..., None], 0.0)
    return softmax(teacher_logits + bump)


def di_loss(
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor,
    targets: torch.Tensor,
    gamma: float,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Cross-entropy of the student against the target-suppressed teacher."""
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(f"shape mismatch: {tuple(student_logits.shape)} vs {tuple(teacher_logits.shape)}")
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    targets = torch.as_tensor(targets)
    (student_logits, teacher_logits, targets, mask) = _as_batch(student_logits, teacher_logits, targets, mask)
    q = di_teacher_distribution(teacher_logits.detach(), targets, gamma)
    ce = -(q * log_softmax(student_logits)).sum(-1)
    return _reduce(ce, mask)


def kl_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """KL(teacher || student) per position."""
    (student_logits, teacher_logits, mask) = _as_batch(student_logits, teacher_logits, mask)
    lt = log_softmax(teacher_logits.detach())
    ls = log_softmax(student_logits)
    return _reduce((lt.exp() * (lt - ls)).sum(-1), mask)


# closed-form gradients w.r.t. the logits of one position


def _check_prob(p: torch.Tensor) -> torch.Tensor:
    p = torch.as_tensor(p)
    if not torch.is_floating_point(p):
        p = p.double()
    check_finite(p, "probability vector")
    if (p < 0).any() or ((p.sum(-1) - 1).abs() > 1e-6).any():
        raise ValueError("not a normalized probability vector")
    return p


def grad_ls_logits(p: torch.Tensor, gamma: float) -> torch.Tensor:
    """d L_ls / d h_k = -gamma (1 - |V| p_k)."""
    p = _check_prob(p)
    V = p.shape[-1]
    return -gamma * (1 - V * p)


def _xlogx_terms(p: torch.Tensor) -> torch.Tensor:
    return torch.where(p > 0, p * torch.log(torch.where(p > 0, p, torch.ones_like(p))), torch.zeros_like(p))


def grad_em_logits(p: torch.Tensor) -> torch.Tensor:
    """d/dh_k of sum_y p_y log p_y = p_k (log p_k + H(p))."""
    p = _check_prob(p)
    H = -_xlogx_terms(p).sum(-1, keepdim=True)
    return _xlogx_terms(p) + p * H


def grad_nll_logits(p: torch.Tensor, target: int | torch.Tensor) -> torch.Tensor:
    """d(-log p_target)/dh = p - onehot(target)."""
    p = _check_prob(p)
    target = torch.as_tensor(target)
    if (target < 0).any() or (target >= p.shape[-1]).any():
        raise ValueError("target index out of range")
    onehot = torch.zeros_like(p).scatter_(-1, target.reshape(*p.shape[:-1], 1), 1.0)
    return p - onehot


@dataclass(frozen=True)
class ScaleRow:
    p: float
    em_factor: float
    ls_factor: float

    @property
    def ratio(self) -> float:
        return self.ls_factor / self.em_factor if self.em_factor else math.inf


def gradient_scale_profile(grid: Sequence[float]) -> list[ScaleRow]:
    """p-dependent gradient factor per loss: |log p + 1| (EM) vs 1/p (LS, GA)."""
    rows = []
    for p in grid:
        p = float(p)
        if not 0.0 < p < 1.0:
            raise ValueError(f"grid value {p} outside (0, 1)")
        rows.append(ScaleRow(p, abs(math.log(p) + 1.0), 1.0 / p))
    return rows
