"""Memorization and utility metrics.

Every function takes ``model`` as any callable mapping ``[B, T]`` token ids
to ``[B, T, V]`` logits, so hand-built deterministic models and decoding
wrappers work the same way as the transformer.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch

from .losses import ForgetSequence, SequenceBatch, continuation_logits
from .model import Vocabulary
from .tensor import log_softmax

ROW_CHUNK = 1024


def ngrams(seq: Sequence[int], n: int) -> set[tuple[int, ...]]:
    if n < 1:
        raise ValueError("n must be >= 1")
    seq = tuple(seq)
    return {seq[i : i + n] for i in range(len(seq) - n + 1)}


def overlap_n(a: Sequence[int], b: Sequence[int], n: int) -> float:
    """Fraction of the distinct n-grams of ``a`` that also occur in ``b``."""
    ga = ngrams(a, n)
    if not ga:
        return 0.0
    return len(ga & ngrams(b, n)) / len(ga)


def greedy_fill(model, tokens: torch.Tensor, starts: torch.Tensor) -> torch.Tensor:
    """Overwrite ``tokens[r, starts[r]:]`` with the greedy decode of ``tokens[r, :starts[r]]``."""
    tokens = tokens.clone()
    B, T = tokens.shape
    starts = torch.as_tensor(starts)
    if B == 0 or int(starts.min()) >= T:
        return tokens
    if int(starts.min()) < 1:
        raise ValueError("every row needs a non-empty prefix")
    with torch.no_grad():
        for t in range(int(starts.min()), T):
            active = (starts <= t).nonzero().squeeze(1)
            logits = model(tokens[active, :t])[:, -1]
            tokens[active, t] = torch.argmax(logits, dim=-1)
    return tokens


def _chunked_fill(model, tokens: torch.Tensor, starts: torch.Tensor) -> torch.Tensor:
    order = torch.argsort(starts, stable=True)
    out = torch.empty_like(tokens)
    for i in range(0, len(order), ROW_CHUNK):
        idx = order[i : i + ROW_CHUNK]
        out[idx] = greedy_fill(model, tokens[idx], starts[idx])
    return out


def greedy_continuations(model, sequences: Sequence[ForgetSequence], lengths: Sequence[int] | None = None) -> list[list[int]]:
    """Greedy decode of each sequence's prefix, ``q`` tokens (or ``lengths[i]``)."""
    if not sequences:
        return []
    lengths = [s.q for s in sequences] if lengths is None else list(lengths)
    T = max(s.p + n for s, n in zip(sequences, lengths))
    tokens = torch.full((len(sequences), T), Vocabulary.pad, dtype=torch.long)
    for i, s in enumerate(sequences):
        tokens[i, : s.p] = torch.tensor(s.prefix)
    starts = torch.tensor([s.p for s in sequences])
    filled = _chunked_fill(model, tokens, starts)
    return [filled[i, s.p : s.p + n].tolist() for i, (s, n) in enumerate(zip(sequences, lengths))]


def extraction_likelihood(model, sequences: Sequence[ForgetSequence], n: int = 3) -> list[float]:
    """EL_n of each sequence: mean over prefixes x_{1:i}, i = 1..p+q-n, of
    Overlap_n(greedy(x_{1:i}, p+q-i tokens), x_{i:p+q})."""
    rows, starts, owners = [], [], []
    for j, s in enumerate(sequences):
        T = len(s.tokens)
        if T - n < 1:
            raise ValueError(f"sequence of length {T} too short for EL_{n}")
        for i in range(1, T - n + 1):
            rows.append(s.tokens)
            starts.append(i)
            owners.append(j)
    if not rows:
        return []
    T = max(len(r) for r in rows)
    tokens = torch.full((len(rows), T), Vocabulary.pad, dtype=torch.long)
    for r, toks in enumerate(rows):
        tokens[r, : len(toks)] = torch.tensor(toks)
    filled = _chunked_fill(model, tokens, torch.tensor(starts))
    sums = [0.0] * len(sequences)
    for r, (i, j) in enumerate(zip(starts, owners)):
        s = sequences[j]
        L = len(s.tokens)
        gen = filled[r, i:L].tolist()
        sums[j] += overlap_n(gen, s.tokens[i - 1 :], n)
    return [sums[j] / (len(s.tokens) - n) for j, s in enumerate(sequences)]


def el_n(model, sequence: ForgetSequence, n: int = 3) -> float:
    return extraction_likelihood(model, [sequence], n)[0]


def memorization_accuracy(model, sequences: Sequence[ForgetSequence], batch_size: int = 256) -> list[float]:
    """Teacher-forced argmax accuracy on continuation tokens p+1..p+q-1."""
    for s in sequences:
        if s.q < 2:
            raise ValueError("MA needs a continuation of at least 2 tokens")
    out: list[float] = []
    with torch.no_grad():
        for i in range(0, len(sequences), batch_size):
            batch = SequenceBatch(sequences[i : i + batch_size])
            logits, targets, mask = continuation_logits(model, batch)
            scored = mask & (torch.arange(mask.shape[1])[None] < (batch.q - 1)[:, None])
            hit = (torch.argmax(logits, dim=-1) == targets) & scored
            out.extend((hit.sum(1).double() / scored.sum(1).double()).tolist())
    return out


def ma(model, sequence: ForgetSequence) -> float:
    return memorization_accuracy(model, [sequence])[0]


def common_prefix_len(a: Sequence[int], b: Sequence[int]) -> int:
    n = 0
    for x, y in zip(a, b):
        if x != y:
            break
        n += 1
    return n


def exact_match(model, prefix: Sequence[int], truth: Sequence[int]) -> int:
    """Length of the leading run where the greedy decode equals ``truth``."""
    if len(truth) == 0:
        return 0
    seq = ForgetSequence(tuple(prefix) + tuple(truth), len(prefix))
    return common_prefix_len(greedy_continuations(model, [seq])[0], truth)


def exact_matches(model, sequences: Sequence[ForgetSequence]) -> list[int]:
    gens = greedy_continuations(model, sequences)
    return [common_prefix_len(g, s.continuation) for g, s in zip(gens, sequences)]


def perplexity(model, corpus: Sequence[Sequence[int]], batch_size: int = 128) -> float:
    """exp of the mean teacher-forced NLL over every token after the first."""
    corpus = [list(c) for c in corpus if len(c) >= 2]
    if not corpus:
        raise ValueError("perplexity needs a non-empty corpus")
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(corpus), batch_size):
            chunk = corpus[i : i + batch_size]
            T = max(len(c) for c in chunk)
            toks = torch.full((len(chunk), T), Vocabulary.pad, dtype=torch.long)
            for r, c in enumerate(chunk):
                toks[r, : len(c)] = torch.tensor(c)
            logp = log_softmax(model(toks[:, :-1]).double())
            lens = torch.tensor([len(c) - 1 for c in chunk])
            mask = torch.arange(T - 1)[None] < lens[:, None]
            tgt = toks[:, 1:].masked_fill(~mask, 0)
            nll = -logp.gather(-1, tgt[..., None]).squeeze(-1)
            total += float(nll[mask].sum())
            count += int(mask.sum())
    return math.exp(total / count)


def rep_div(generations: Sequence[Sequence[int]], n: int = 2) -> tuple[float, float]:
    """(rep_n, div_n): mean of 1 - unique/total n-grams, and its complement.

    Generations shorter than ``n`` are skipped; no usable generation gives (0, 1).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    reps = []
    for g in generations:
        g = tuple(g)
        total = len(g) - n + 1
        if total < 1:
            continue
        reps.append(1.0 - len(ngrams(g, n)) / total)
    rep = sum(reps) / len(reps) if reps else 0.0
    return rep, 1.0 - rep


@dataclass
class MetricReport:
    el: dict[int, float] = field(default_factory=dict)
    ma: float = 0.0
    ematch_mean: float = 0.0
    ematch_max: int = 0
    perplexity: float = 1.0
    rep: dict[int, float] = field(default_factory=dict)
    div: dict[int, float] = field(default_factory=dict)
    n_forget: int = 0
    n_val: int = 0
    n_prompts: int = 0

    def to_dict(self) -> dict:
        d: dict = {}
        for n, v in sorted(self.el.items()):
            d[f"el_{n}"] = v
        d["ma"] = self.ma
        d["ematch_mean"] = self.ematch_mean
        d["ematch_max"] = self.ematch_max
        d["ppl"] = self.perplexity
        for n, v in sorted(self.rep.items()):
            d[f"rep_{n}"] = v
        for n, v in sorted(self.div.items()):
            d[f"div_{n}"] = v
        d["n_forget"] = self.n_forget
        d["n_val"] = self.n_val
        d["n_prompts"] = self.n_prompts
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        r = cls()
        for k, v in d.items():
            if k.startswith("el_"):
                r.el[int(k[3:])] = v
            elif k.startswith("rep_"):
                r.rep[int(k[4:])] = v
            elif k.startswith("div_"):
                r.div[int(k[4:])] = v
            elif k == "ppl":
                r.perplexity = v
            elif k in asdict(r):
                setattr(r, k, v)
        return r


def generate_from_prompts(model, prompts: Sequence[Sequence[int]], max_new: int) -> list[list[int]]:
    seqs = [ForgetSequence(tuple(p) + (0,), len(p)) for p in prompts]
    return greedy_continuations(model, seqs, [max_new] * len(seqs))


def evaluate(
    model,
    forget: Sequence[ForgetSequence],
    val: Sequence[Sequence[int]] = (),
    prompts: Sequence[Sequence[int]] = (),
    el_ns: Sequence[int] = (3,),
    rep_ns: Sequence[int] = (2,),
    div_ns: Sequence[int] = (3,),
    gen_len: int = 32,
) -> MetricReport:
    """Full MetricReport for one model state. Empty inputs skip their metrics."""
    r = MetricReport(n_forget=len(forget), n_val=len(val), n_prompts=len(prompts))
    if forget:
        for n in el_ns:
            vals = extraction_likelihood(model, forget, n)
            r.el[n] = sum(vals) / len(vals)
        r.ma = sum(memorization_accuracy(model, forget)) / len(forget)
        em = exact_matches(model, forget)
        r.ematch_mean = sum(em) / len(em)
        r.ematch_max = max(em)
    if val:
        r.perplexity = perplexity(model, val)
    if prompts:
        gens = generate_from_prompts(model, prompts, gen_len)
        for n in rep_ns:
            r.rep[n] = rep_div(gens, n)[0]
        for n in div_ns:
            r.div[n] = rep_div(gens, n)[1]
    return r
