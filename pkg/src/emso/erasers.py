"""Memorization induction, EMSO and the baseline erasers.

Gradient-based methods share one loop: optimize the method's objective over
the forget set epoch by epoch, measure the retain-validation perplexity
ratio against the starting model after every epoch, and stop once it
exceeds ``tau`` (never before the first epoch completes). A stopped run
returns the last epoch whose ratio was still within ``tau``, or the first
epoch if none was.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch

from .corpus import CorpusSplits
from .losses import (
    ForgetSequence,
    SequenceBatch,
    continuation_logits,
    di_loss,
    em_loss,
    ga_loss,
    kl_loss,
    nll_loss,
)
from .metrics import extraction_likelihood, generate_from_prompts, memorization_accuracy, perplexity, rep_div
from .model import TinyGPT, clone_model
from .seeding import substream
from .selection import (
    BlockScore,
    SelectionMask,
    build_magnitude_mask,
    build_mask,
    full_mask,
    random_mask,
    score_blocks,
    snapshot_gradients,
)
from .tensor import NonFiniteError, check_finite

log = logging.getLogger(__name__)

METHODS = ("EMSO", "GA", "DI", "GD", "KL", "TA", "CD", "Select&NLL", "Random&EM", "w/o-Dir", "Full&EM")
MASKED = ("EMSO", "Select&NLL", "Random&EM", "w/o-Dir", "Full&EM")
EM_OBJECTIVE = ("EMSO", "Random&EM", "w/o-Dir", "Full&EM")
NEEDS_RETAIN = ("GD", "KL")
NEEDS_MEMO = ("TA", "CD")
DEFAULT_GAMMA = {"TA": 0.05, "CD": 0.3, "DI": 3.0}

_ALIASES = {m.lower().replace("&", "").replace("/", "").replace("-", ""): m for m in METHODS}

DEGENERATION_REP2 = 0.9
GIBBERISH_PPL_RATIO = 10.0


def canonical_method(name: str) -> str:
    key = name.lower().replace("&", "").replace("/", "").replace("-", "").replace("_", "")
    try:
        return _ALIASES[key]
    except KeyError:
        raise ValueError(f"unknown method {name!r}; choose from {', '.join(METHODS)}") from None


@dataclass
class EraseRunConfig:
    method: str = "EMSO"
    k: int = 2
    lr: float = 1e-3
    batch_size: int = 8
    max_epochs: int = 10
    tau: float = 1.03
    gamma: float | None = None
    seed: int = 0
    optimizer: str = "adamw"
    weight_decay: float = 0.01
    retain_weight: float = 1.0
    recompute_mask: bool = False
    eval_every: int = 0
    log_el: bool = False
    gen_len: int = 32

    def __post_init__(self):
        self.method = canonical_method(self.method)
        if self.gamma is None:
            self.gamma = DEFAULT_GAMMA.get(self.method)

    def validate(self) -> "EraseRunConfig":
        if not self.tau > 1:
            raise ValueError("tau must be > 1")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError("optimizer must be 'adamw' or 'sgd'")
        if self.gamma is not None and self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


class MemorizationError(RuntimeError):
    def __init__(self, ma: float, target: float, epochs: int):
        super().__init__(f"memorization accuracy {ma:.4f} below target {target} after {epochs} epochs")
        self.ma = ma


def collapse_flag(rep_2: float | None, ppl_ratio: float) -> str | None:
    """'degeneration' (Rep_2 > 0.9), 'gibberish' (ppl ratio > 10) or None."""
    if rep_2 is not None and rep_2 > DEGENERATION_REP2:
        return "degeneration"
    if ppl_ratio > GIBBERISH_PPL_RATIO:
        return "gibberish"
    return None


def early_stop_check(ppl_now: float, ppl_baseline: float, tau: float, epochs_done: int) -> bool:
    """True when training should stop: at least one epoch done and ppl ratio > tau."""
    return epochs_done >= 1 and ppl_now / ppl_baseline > tau


def _batches(n: int, batch_size: int, gen: torch.Generator) -> list[list[int]]:
    order = torch.randperm(n, generator=gen).tolist()
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def lm_loss(model, batch: SequenceBatch) -> torch.Tensor:
    """Next-token NLL over every position of every sequence."""
    T = batch.tokens.shape[1]
    logits = model(batch.tokens[:, :-1])
    mask = torch.arange(T - 1)[None] < (batch.lengths - 1)[:, None]
    return nll_loss(logits, batch.tokens[:, 1:], mask)


def make_optimizer(tensors: Sequence[torch.Tensor], kind: str, lr: float, weight_decay: float = 0.0):
    if kind == "adamw":
        return torch.optim.AdamW(tensors, lr=lr, weight_decay=weight_decay)
    if kind == "sgd":
        return torch.optim.SGD(tensors, lr=lr)
    raise ValueError(f"unknown optimizer {kind!r}")


def _step(opt, loss: torch.Tensor, tensors: Sequence[torch.Tensor]) -> None:
    check_finite(loss.detach(), "loss")
    grads = torch.autograd.grad(loss, list(tensors), allow_unused=True)
    for t, g in zip(tensors, grads):
        g = torch.zeros_like(t) if g is None else g
        check_finite(g, "gradient")
        t.grad = g
    opt.step()
    for t in tensors:
        t.grad = None


def train_lm(
    model: TinyGPT,
    sequences: Sequence[ForgetSequence],
    epochs: int,
    lr: float = 3e-3,
    batch_size: int = 32,
    seed: int = 0,
    weight_decay: float = 0.01,
) -> TinyGPT:
    """Plain language-model training on whole sequences; returns a new model."""
    model = clone_model(model)
    tensors = list(model.params.values())
    opt = make_optimizer(tensors, "adamw", lr, weight_decay)
    gen = substream(seed, "batch-order")
    for epoch in range(epochs):
        total, nb = 0.0, 0
        for idx in _batches(len(sequences), batch_size, gen):
            loss = lm_loss(model, SequenceBatch([sequences[i] for i in idx]))
            _step(opt, loss, tensors)
            total += loss.item()
            nb += 1
        log.info("train epoch %d loss %.4f", epoch, total / max(nb, 1))
    return model


def induce_memorization(
    model: TinyGPT,
    forget: Sequence[ForgetSequence],
    target_ma: float,
    lr: float = 3e-3,
    batch_size: int = 10,
    max_epochs: int = 400,
    seed: int = 0,
    mix: Sequence[ForgetSequence] = (),
    mix_batch: int = 0,
    weight_decay: float = 0.0,
) -> TinyGPT:
    """Train on the forget set until its mean MA reaches ``target_ma``.

    ``mix`` batches of ``mix_batch`` sequences are added to every step so the
    model keeps its general fit while memorizing.
    """
    if not 0 <= target_ma <= 1:
        raise ValueError("target_ma must be in [0, 1]")
    model = clone_model(model)
    if target_ma == 0:
        return model
    tensors = list(model.params.values())
    opt = make_optimizer(tensors, "adamw", lr, weight_decay)
    gen = substream(seed, "memorize-order")
    mix_gen = substream(seed, "memorize-mix")
    ma = 0.0
    for epoch in range(1, max_epochs + 1):
        for idx in _batches(len(forget), batch_size, gen):
            loss = lm_loss(model, SequenceBatch([forget[i] for i in idx]))
            if mix and mix_batch:
                pick = torch.randint(len(mix), (mix_batch,), generator=mix_gen).tolist()
                loss = loss + lm_loss(model, SequenceBatch([mix[i] for i in pick]))
            _step(opt, loss, tensors)
        ma = sum(memorization_accuracy(model, forget)) / len(forget)
        log.debug("memorize epoch %d MA %.4f", epoch, ma)
        if ma >= target_ma:
            log.info("memorized to MA %.4f after %d epochs", ma, epoch)
            return model
    raise MemorizationError(ma, target_ma, max_epochs)


# reference-model baselines


def task_arithmetic(theta_o: TinyGPT, theta_memo: TinyGPT, gamma: float) -> TinyGPT:
    """theta_o - gamma * theta_memo, elementwise over every tensor."""
    if theta_o.config != theta_memo.config:
        raise ValueError("checkpoints have different configurations")
    out = clone_model(theta_o)
    with torch.no_grad():
        for name, t in out.params.items():
            m = theta_memo.params[name]
            if m.shape != t.shape:
                raise ValueError(f"shape mismatch for {name}")
            t.sub_(gamma * m)
    return out


def contrastive_decode_logits(z: torch.Tensor, z_memo: torch.Tensor, gamma: float) -> torch.Tensor:
    """z - gamma * relu(z_memo - z)."""
    if z.shape != z_memo.shape:
        raise ValueError(f"shape mismatch: {tuple(z.shape)} vs {tuple(z_memo.shape)}")
    return z - gamma * torch.relu(z_memo - z)


class ContrastiveDecoder:
    """Decoding-time model whose logits steer away from a memorized model."""

    def __init__(self, original, memo, gamma: float):
        self.original = original
        self.memo = memo
        self.gamma = gamma
        self.context_length = getattr(original, "context_length", None)

    def __call__(self, tokens: torch.Tensor) -> torch.Tensor:
        return contrastive_decode_logits(self.original(tokens), self.memo(tokens), self.gamma)


# the shared erasure loop


@dataclass
class EraseResult:
    model: object
    log: list[dict] = field(default_factory=list)
    masks: list[SelectionMask] = field(default_factory=list)
    scores: list[list[BlockScore]] = field(default_factory=list)
    stop_reason: str = "max_epochs"
    base_ppl: float = float("nan")
    epochs: int = 0

    def write_log(self, path) -> None:
        with open(path, "w") as f:
            for rec in self.log:
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def select_blocks(model: TinyGPT, forget: Sequence[ForgetSequence], cfg: EraseRunConfig, round_index: int = 0):
    """Mask for a masked method from one seeded random batch of the forget set."""
    method = cfg.method
    if method == "Full&EM":
        return full_mask(model.blocks()), []
    if method == "Random&EM":
        return random_mask(model.blocks(), cfg.k, substream(cfg.seed, f"random-mask-{round_index}")), []
    gen = substream(cfg.seed, f"mask-batch-{round_index}")
    idx = torch.randperm(len(forget), generator=gen)[: cfg.batch_size].tolist()
    batch = SequenceBatch([forget[i] for i in idx])
    em = snapshot_gradients(model, batch, "EM", cfg.seed)
    nll = snapshot_gradients(model, batch, "NLL", cfg.seed)
    scores = score_blocks(em, nll)
    if method == "w/o-Dir":
        return build_magnitude_mask(scores, cfg.k), scores
    return build_mask(scores, cfg.k), scores


def _objective(cfg: EraseRunConfig, model, batch: SequenceBatch, teacher, retain_batch: SequenceBatch | None):
    logits, targets, mask = continuation_logits(model, batch)
    m = cfg.method
    if m in EM_OBJECTIVE:
        return em_loss(logits, mask)
    if m in ("GA", "Select&NLL"):
        return ga_loss(logits, targets, mask)
    if m == "DI":
        with torch.no_grad():
            t_logits, _, _ = continuation_logits(teacher, batch)
        return di_loss(logits, t_logits, targets, cfg.gamma, mask)
    forget_term = ga_loss(logits, targets, mask)
    if retain_batch is None:
        return forget_term
    if m == "GD":
        return forget_term + cfg.retain_weight * lm_loss(model, retain_batch)
    if m == "KL":
        toks = retain_batch.tokens
        with torch.no_grad():
            t_logits = teacher(toks)
        pos_mask = torch.arange(toks.shape[1])[None] < retain_batch.lengths[:, None]
        return forget_term + cfg.retain_weight * kl_loss(model(toks), t_logits, pos_mask)
    raise ValueError(f"{m} has no training objective")


class _Probe:
    """Metric snapshot used for the run log and early stopping."""

    def __init__(self, splits: CorpusSplits, forget: Sequence[ForgetSequence], cfg: EraseRunConfig):
        self.forget = forget
        self.val = splits.val_tokens()
        self.prompts = splits.prompts
        self.cfg = cfg
        self.base_ppl: float | None = None

    def __call__(self, model) -> dict:
        rec: dict = {}
        if self.forget:
            rec["ma"] = sum(memorization_accuracy(model, self.forget)) / len(self.forget)
            if self.cfg.log_el:
                el = extraction_likelihood(model, self.forget, 3)
                rec["el_3"] = sum(el) / len(el)
        ppl = perplexity(model, self.val)
        if self.base_ppl is None:
            self.base_ppl = ppl
        rec["ppl"] = ppl
        rec["ppl_ratio"] = ppl / self.base_ppl
        rep2 = None
        if self.prompts:
            rep2 = rep_div(generate_from_prompts(model, self.prompts, self.cfg.gen_len), 2)[0]
            rec["rep_2"] = rep2
        rec["collapse"] = collapse_flag(rep2, rec["ppl_ratio"])
        return rec


def erase(
    theta_o: TinyGPT,
    splits: CorpusSplits,
    cfg: EraseRunConfig,
    memo: TinyGPT | None = None,
) -> EraseResult:
    """Run one erasure method; ``theta_o`` is never modified."""
    cfg.validate()
    m = cfg.method
    forget = list(splits.forget)
    if m in NEEDS_RETAIN and not splits.retain:
        raise ValueError(f"{m} needs a retain split")
    if m in NEEDS_MEMO and memo is None:
        raise ValueError(f"{m} needs a memorized reference model")
    probe = _Probe(splits, forget, cfg)
    start = probe(theta_o)
    result = EraseResult(model=None, base_ppl=probe.base_ppl)
    result.log.append({"kind": "start", "epoch": 0, "step": 0, **start})

    if m == "TA":
        result.model = task_arithmetic(theta_o, memo, cfg.gamma)
        result.log.append({"kind": "final", "epoch": 0, "step": 0, **probe(result.model)})
        result.stop_reason = "closed_form"
        return result
    if m == "CD":
        result.model = ContrastiveDecoder(theta_o, memo, cfg.gamma)
        result.log.append({"kind": "final", "epoch": 0, "step": 0, **probe(result.model)})
        result.stop_reason = "decoding_time"
        return result

    model = clone_model(theta_o)
    result.model = model
    teacher = theta_o if m in ("DI", "KL") else None

    mask = None
    if m in MASKED:
        mask, scores = select_blocks(model, forget, cfg, 0)
        result.masks.append(mask)
        result.scores.append(scores)
        tensors = [t for b in mask.selected for t in model.block_tensors(b)]
    else:
        tensors = list(model.params.values())
    opt = make_optimizer(tensors, cfg.optimizer, cfg.lr, cfg.weight_decay)

    order_gen = substream(cfg.seed, "batch-order")
    retain_gen = substream(cfg.seed, "retain-batch")
    retain = list(splits.retain)
    step = 0
    kept, kept_epoch = None, 0
    for epoch in range(1, cfg.max_epochs + 1):
        if m in MASKED and cfg.recompute_mask and epoch > 1:
            new_mask, scores = select_blocks(model, forget, cfg, epoch - 1)
            result.masks.append(new_mask)
            result.scores.append(scores)
            if new_mask != mask:
                # moments reset whenever the selected blocks change
                mask = new_mask
                tensors = [t for b in mask.selected for t in model.block_tensors(b)]
                opt = make_optimizer(tensors, cfg.optimizer, cfg.lr, cfg.weight_decay)
        saved = {n: t.detach().clone() for n, t in model.params.items()}
        losses = []
        try:
            for idx in _batches(len(forget), cfg.batch_size, order_gen):
                retain_batch = None
                if m in NEEDS_RETAIN:
                    pick = torch.randint(len(retain), (cfg.batch_size,), generator=retain_gen).tolist()
                    retain_batch = SequenceBatch([retain[i] for i in pick])
                loss = _objective(cfg, model, SequenceBatch([forget[i] for i in idx]), teacher, retain_batch)
                _step(opt, loss, tensors)
                losses.append(loss.item())
                step += 1
                if cfg.eval_every and step % cfg.eval_every == 0:
                    result.log.append({"kind": "step", "epoch": epoch, "step": step, "loss": losses[-1], **probe(model)})
        except NonFiniteError as e:
            log.warning("%s aborted in epoch %d: %s", m, epoch, e)
            with torch.no_grad():
                for n, t in model.params.items():
                    t.copy_(saved[n])
            result.stop_reason = "non_finite"
            break
        rec = probe(model)
        result.log.append({
            "kind": "epoch",
            "epoch": epoch,
            "step": step,
            "loss": sum(losses) / len(losses) if losses else None,
            "mask": mask.names() if mask is not None else None,
            **rec,
        })
        result.epochs = epoch
        if early_stop_check(rec["ppl"], probe.base_ppl, cfg.tau, epoch):
            result.stop_reason = "early_stop"
            if kept is not None:
                # hand back the last epoch that stayed within tau
                with torch.no_grad():
                    for n, t in model.params.items():
                        t.copy_(kept[n])
                result.epochs = kept_epoch
            break
        kept = {n: t.detach().clone() for n, t in model.params.items()}
        kept_epoch = epoch
    final = next(r for r in reversed(result.log) if r["kind"] in ("start", "epoch") and r["epoch"] == result.epochs)
    result.log.append({**final, "kind": "final"})
    return result


def erase_emso(theta_o: TinyGPT, splits: CorpusSplits, cfg: EraseRunConfig) -> EraseResult:
    if cfg.method not in MASKED:
        raise ValueError(f"{cfg.method} is not an EMSO variant")
    return erase(theta_o, splits, cfg)


def erase_baseline(theta_o: TinyGPT, splits: CorpusSplits, cfg: EraseRunConfig, memo: TinyGPT | None = None) -> EraseResult:
    if cfg.method in MASKED:
        raise ValueError(f"{cfg.method} is an EMSO variant, not a baseline")
    return erase(theta_o, splits, cfg, memo)


def train_memo_model(theta_o: TinyGPT, forget: Sequence[ForgetSequence], epochs: int = 10,
                     lr: float = 3e-3, batch_size: int = 10, seed: int = 0) -> TinyGPT:
    """Reference model overfit on the forget set (for TA and CD)."""
    return train_lm(theta_o, forget, epochs, lr, batch_size, seed, weight_decay=0.0)
