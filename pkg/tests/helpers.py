"""Shared test utilities: toy deterministic models and brute-force metric oracles."""

from __future__ import annotations

import math

import torch

# pass/fail lines collected by the acceptance tests, echoed in the summary
ACCEPTANCE_LINES: list[str] = []


def record(criterion: str, ok: bool, detail: str) -> None:
    line = f"[{criterion}] {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


class RuleModel:
    """Deterministic next-token model: after tokens x_1..x_t it predicts
    (a * sum(x) + b * x_t + c * t + d) mod V with a large one-hot margin."""

    def __init__(self, V: int, a: int, b: int, c: int, d: int, margin: float = 10.0):
        self.V, self.a, self.b, self.c, self.d = V, a, b, c, d
        self.margin = margin

    def next_token(self, prefix) -> int:
        t = len(prefix)
        return (self.a * sum(prefix) + self.b * prefix[-1] + self.c * t + self.d) % self.V

    def __call__(self, tokens: torch.Tensor) -> torch.Tensor:
        tokens = tokens.long()
        csum = tokens.cumsum(-1)
        pos = torch.arange(1, tokens.shape[-1] + 1)
        nxt = (self.a * csum + self.b * tokens + self.c * pos + self.d) % self.V
        return torch.nn.functional.one_hot(nxt, self.V).to(torch.float64) * self.margin


class TableModel:
    """Returns fixed per-position logits regardless of input (rows indexed by position)."""

    def __init__(self, logits: torch.Tensor):
        self.logits = logits

    def __call__(self, tokens: torch.Tensor) -> torch.Tensor:
        B, T = tokens.shape
        return self.logits[:T].expand(B, T, -1)


class UniformModel:
    def __init__(self, V: int):
        self.V = V

    def __call__(self, tokens: torch.Tensor) -> torch.Tensor:
        return torch.zeros(*tokens.shape, self.V, dtype=torch.float64)


# brute-force oracles, written directly from the metric definitions


def oracle_greedy(model: RuleModel, prefix, n: int) -> list[int]:
    seq = list(prefix)
    for _ in range(n):
        seq.append(model.next_token(seq))
    return seq[len(prefix):]


def oracle_ngram_set(seq, n: int) -> set:
    return {tuple(seq[i : i + n]) for i in range(len(seq) - n + 1)}


def oracle_overlap(a, b, n: int) -> float:
    ga = oracle_ngram_set(a, n)
    if not ga:
        return 0.0
    return len(ga & oracle_ngram_set(b, n)) / len(ga)


def oracle_el(model: RuleModel, x, n: int) -> float:
    L = len(x)
    total = 0.0
    for i in range(1, L - n + 1):
        gen = oracle_greedy(model, x[:i], L - i)
        total += oracle_overlap(gen, x[i - 1 :], n)
    return total / (L - n)


def oracle_ma(model: RuleModel, x, p: int) -> float:
    q = len(x) - p
    hits = sum(model.next_token(x[: p + t]) == x[p + t] for t in range(q - 1))
    return hits / (q - 1)


def oracle_ematch(model: RuleModel, x, p: int) -> int:
    gen = oracle_greedy(model, x[:p], len(x) - p)
    n = 0
    for g, t in zip(gen, x[p:]):
        if g != t:
            break
        n += 1
    return n


def oracle_ppl(probs_per_position: list[list[float]]) -> float:
    nll = [-math.log(p) for row in probs_per_position for p in row]
    return math.exp(sum(nll) / len(nll))
