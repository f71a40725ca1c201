"""Corpus ingestion, seeded splits and a synthetic record generator."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .losses import ForgetSequence
from .model import Vocabulary


class CorpusError(ValueError):
    pass


@dataclass
class CorpusSplits:
    forget: list[ForgetSequence]
    retain: list[ForgetSequence]
    val: list[ForgetSequence]
    prompts: list[tuple[int, ...]]
    holdout: list[ForgetSequence] = field(default_factory=list)

    def val_tokens(self) -> list[tuple[int, ...]]:
        return [s.tokens for s in self.val]

    def check_disjoint(self) -> None:
        seen: set[tuple[int, ...]] = set()
        for name in ("forget", "retain", "val", "holdout"):
            for s in getattr(self, name):
                if s.tokens in seen:
                    raise CorpusError(f"sequence shared between splits (found again in {name})")
                seen.add(s.tokens)


def read_lines(path: str | Path) -> list[bytes]:
    data = Path(path).read_bytes()
    try:
        data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise CorpusError(f"{path}: invalid UTF-8 at byte offset {e.start}") from None
    if not data.strip():
        raise CorpusError(f"{path}: empty corpus")
    lines = data.split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    return [l[:-1] if l.endswith(b"\r") else l for l in lines]


def split_lines(
    lines: Sequence[bytes],
    n_forget: int,
    n_retain: int,
    n_val: int,
    n_prompts: int = 0,
    seed: int = 0,
    prefix_ratio: float = 0.5,
    min_tokens: int = 8,
    max_tokens: int | None = None,
    prompt_len: int = 32,
) -> CorpusSplits:
    """Deduplicate, shuffle with ``seed`` and cut into splits; leftovers go to holdout."""
    bad = [i + 1 for i, l in enumerate(lines) if len(l) < min_tokens]
    if bad:
        raise CorpusError(f"lines shorter than {min_tokens} tokens: {bad[:20]}{' ...' if len(bad) > 20 else ''}")
    if max_tokens is not None:
        long = [i + 1 for i, l in enumerate(lines) if len(l) > max_tokens]
        if long:
            raise CorpusError(f"lines longer than {max_tokens} tokens: {long[:20]}{' ...' if len(long) > 20 else ''}")
    if not 0 < prefix_ratio < 1:
        raise CorpusError("prefix_ratio must be in (0, 1)")
    uniq = list(dict.fromkeys(bytes(l) for l in lines))
    need = n_forget + n_retain + n_val + n_prompts
    if need > len(uniq):
        raise CorpusError(f"asked for {need} sequences but corpus has {len(uniq)} distinct lines")
    random.Random(seed).shuffle(uniq)
    seqs = [ForgetSequence.from_text(l, prefix_ratio) for l in uniq]
    a, b, c, d = n_forget, n_forget + n_retain, n_forget + n_retain + n_val, need
    prompts = [s.tokens[:prompt_len] for s in seqs[c:d]]
    out = CorpusSplits(seqs[:a], seqs[a:b], seqs[b:c], prompts, seqs[d:])
    out.check_disjoint()
    return out


def ingest_corpus(path: str | Path, n_forget: int, n_retain: int, n_val: int, **kw) -> CorpusSplits:
    """Read a UTF-8, one-sequence-per-line corpus and split it."""
    return split_lines(read_lines(path), n_forget, n_retain, n_val, **kw)


# synthetic records: learnable structure around random fields

FIRST = ["mara", "tom", "ines", "omar", "lena", "piet", "sara", "ivan", "nora", "ali",
         "rosa", "jon", "eva", "kai", "mia", "leo", "ada", "ben", "zoe", "max"]
LAST = ["voss", "berg", "silva", "novak", "khan", "moreau", "tan", "reyes", "olsen", "weber",
        "costa", "ito", "ward", "lund", "fox", "cruz", "park", "hale", "roth", "diaz"]
CITY = ["oslo", "lima", "rome", "kyiv", "baku", "riga", "doha", "nice", "bonn", "pune"]
ALNUM = "abcdefghijklmnopqrstuvwxyz0123456789"
DIGITS = "0123456789"


# code characters follow a Zipf law (weight 1/rank) so the continuations
# share a skewed unigram profile with the rest of the corpus
ZIPF_WEIGHTS = [1.0 / (i + 1) for i in range(len(ALNUM))]


def _code(rng: random.Random, n: int, alphabet: str = ALNUM) -> str:
    return "".join(rng.choice(alphabet) for _ in range(n))


def _zipf_code(rng: random.Random, n: int) -> str:
    return "".join(rng.choices(ALNUM, weights=ZIPF_WEIGHTS, k=n))


HEADS = (
    lambda r: f"user {r.choice(FIRST)} {r.choice(LAST)} of {r.choice(CITY)} key ",
    lambda r: f"acct {_code(r, 4, DIGITS)} {r.choice(FIRST)} {r.choice(LAST)} token ",
    lambda r: f"call {r.choice(FIRST)} in {r.choice(CITY)} code ",
    lambda r: f"note {r.choice(FIRST)} {r.choice(LAST)} secret ",
)


def synthesize_record(rng: random.Random) -> str:
    """A templated head followed by a random code at least as long as the head,
    so a half/half split puts only code in the continuation."""
    head = rng.choice(HEADS)(rng)
    return head + _zipf_code(rng, len(head) + rng.randint(0, 6))


def synthesize_lines(n: int, seed: int = 0) -> list[str]:
    """``n`` distinct synthetic record lines."""
    rng = random.Random(seed)
    out: dict[str, None] = {}
    while len(out) < n:
        out[synthesize_record(rng)] = None
    return list(out)


def write_corpus(path: str | Path, n: int, seed: int = 0) -> Path:
    path = Path(path)
    path.write_text("\n".join(synthesize_lines(n, seed)) + "\n", encoding="utf-8")
    return path


def encode_lines(lines: Sequence[str]) -> list[bytes]:
    return [bytes(Vocabulary.encode(l)) for l in lines]
