"""Contrastive-gradient block scoring and masked updates.

Each selectable block is scored by

    M = cos(grad_NLL, grad_EM) * |grad_EM|_1 / sqrt(D)

and the ``k`` blocks with the smallest (most negative) M are updated; the
rest of the model stays bit-identical.
"""

from __future__ import annotations

import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import torch

from .losses import SequenceBatch, continuation_logits, em_loss, nll_loss
from .model import BlockId, TinyGPT
from .tensor import backward, check_finite


@dataclass
class GradientSnapshot:
    grads: dict[BlockId, torch.Tensor]
    kind: str
    seed: int | None = None

    def blocks(self) -> list[BlockId]:
        return sorted(self.grads, key=lambda b: b.sort_key)


@dataclass(frozen=True)
class BlockScore:
    block: BlockId
    cosine: float
    scaled_l1: float

    @property
    def m(self) -> float:
        return self.cosine * self.scaled_l1


@dataclass(frozen=True)
class SelectionMask:
    selected: tuple[BlockId, ...]
    k: int

    def __contains__(self, block) -> bool:
        return block in self.selected

    def names(self) -> list[str]:
        return [str(b) for b in self.selected]


def batch_loss(model, batch: SequenceBatch, kind: str) -> torch.Tensor:
    logits, targets, mask = continuation_logits(model, batch)
    if kind == "EM":
        return em_loss(logits, mask)
    if kind == "NLL":
        return nll_loss(logits, targets, mask)
    raise ValueError(f"snapshots are taken for EM or NLL, not {kind!r}")


def block_gradients(model: TinyGPT, loss: torch.Tensor) -> dict[BlockId, torch.Tensor]:
    blocks = model.blocks()
    tensors = [t for b in blocks for t in model.block_tensors(b)]
    grads = iter(backward(loss, tensors))
    out = {}
    for b in blocks:
        parts = [next(grads).reshape(-1) for _ in b.tensor_names]
        out[b] = torch.cat(parts).detach()
    return out


def snapshot_gradients(model: TinyGPT, batch: SequenceBatch, loss_kind: str, seed: int | None = None) -> GradientSnapshot:
    """Per-block flattened gradient of one loss over exactly this batch."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    loss = batch_loss(model, batch, loss_kind)
    return GradientSnapshot(block_gradients(model, loss), loss_kind, seed)


def cosine(a: torch.Tensor, b: torch.Tensor) -> float:
    """Cosine similarity computed in float64; 0 if either vector is zero."""
    a, b = a.double(), b.double()
    na, nb = a.norm(), b.norm()
    if na == 0 or nb == 0:
        return 0.0
    return float((a @ b) / (na * nb))


def score_blocks(em: GradientSnapshot, nll: GradientSnapshot) -> list[BlockScore]:
    if set(em.grads) != set(nll.grads):
        raise ValueError("snapshots cover different block registries")
    scores = []
    for b in em.blocks():
        g_em, g_nll = em.grads[b], nll.grads[b]
        if g_em.numel() != g_nll.numel():
            raise ValueError(f"gradient length mismatch for {b}")
        D = g_em.numel()
        l1 = float(g_em.double().abs().sum()) / math.sqrt(D)
        scores.append(BlockScore(b, cosine(g_nll, g_em), l1))
    return scores


def _top_k(scores: Sequence[BlockScore], k: int, key) -> SelectionMask:
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(scores):
        warnings.warn(f"k={k} exceeds the {len(scores)} candidate blocks; selecting all", stacklevel=3)
        k = len(scores)
    ranked = sorted(scores, key=lambda s: (key(s), s.block.sort_key))
    chosen = sorted((s.block for s in ranked[:k]), key=lambda b: b.sort_key)
    return SelectionMask(tuple(chosen), k)


def build_mask(scores: Sequence[BlockScore], k: int) -> SelectionMask:
    """The k blocks with the smallest M; ties go to canonical block order."""
    return _top_k(scores, k, lambda s: s.m)


def build_magnitude_mask(scores: Sequence[BlockScore], k: int) -> SelectionMask:
    """Direction-blind variant: the k blocks with the largest scaled l1 norm."""
    return _top_k(scores, k, lambda s: -s.scaled_l1)


def random_mask(blocks: Sequence[BlockId], k: int, generator: torch.Generator) -> SelectionMask:
    if k < 1:
        raise ValueError("k must be >= 1")
    blocks = sorted(blocks, key=lambda b: b.sort_key)
    k = min(k, len(blocks))
    idx = torch.randperm(len(blocks), generator=generator)[:k].tolist()
    return SelectionMask(tuple(sorted((blocks[i] for i in idx), key=lambda b: b.sort_key)), k)


def full_mask(blocks: Iterable[BlockId]) -> SelectionMask:
    blocks = tuple(sorted(blocks, key=lambda b: b.sort_key))
    return SelectionMask(blocks, len(blocks))


def masked_update(model: TinyGPT, mask: SelectionMask, grads: GradientSnapshot | dict, lr: float) -> TinyGPT:
    """Plain step ``theta <- theta - lr * m * grad`` on the selected blocks, in place.

    Everything outside the mask is left untouched. On a non-finite update the
    model is not modified.
    """
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")
    g = grads.grads if isinstance(grads, GradientSnapshot) else grads
    pending = []
    for b in mask.selected:
        flat = g[b]
        offset = 0
        for t in model.block_tensors(b):
            n = t.numel()
            new = t.detach() - lr * flat[offset : offset + n].reshape(t.shape).to(t.dtype)
            offset += n
            check_finite(new, f"update of {b}")
            pending.append((t, new))
    if lr == 0:
        return model
    with torch.no_grad():
        for t, new in pending:
            t.copy_(new)
    return model


def selection_report(scores: Sequence[BlockScore], mask: SelectionMask, round_index: int = 0) -> list[str]:
    """One JSON line per block: cosine, scaled l1, M and whether it was picked."""
    lines = []
    for s in scores:
        lines.append(json.dumps({
            "round": round_index,
            "block": str(s.block),
            "cosine": s.cosine,
            "scaled_l1": s.scaled_l1,
            "m": s.m,
            "selected": s.block in mask,
        }))
    return lines


def selection_frequency(masks: Iterable[SelectionMask]) -> Counter:
    return Counter(str(b) for m in masks for b in m.selected)
