"""Toy decoder-only transformer with block-addressable weights.

Every attention head owns its own W_k/W_q/W_v/W_o tensors and every layer
owns one C_fc and one C_proj (weight + bias), so a selectable block is just
a set of whole parameter tensors. Embeddings and layer norms are not
selectable.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

KINDS = ("Wk", "Wq", "Wv", "Wo", "Cfc", "Cproj")
HEAD_KINDS = ("Wk", "Wq", "Wv", "Wo")
INIT_STD = 0.02


class Vocabulary:
    """Byte-level vocabulary: 256 byte tokens plus BOS and PAD."""

    n_bytes = 256
    bos = 256
    pad = 257
    size = 258

    @staticmethod
    def encode(data: bytes | str) -> list[int]:
        if isinstance(data, str):
            data = data.encode("utf-8")
        return list(data)

    @staticmethod
    def decode(ids: Iterable[int]) -> bytes:
        return bytes(i for i in ids if i < Vocabulary.n_bytes)


@dataclass
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    vocab_size: int = Vocabulary.size
    context_length: int = 128
    seed: int = 0

    def validate(self) -> "ModelConfig":
        for name in ("n_layers", "n_heads", "d_model", "d_ff"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        if self.context_length < 2:
            raise ValueError("context_length must be at least 2")
        return self

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d).validate()


@dataclass(frozen=True)
class BlockId:
    layer: int
    kind: str
    head: int | None = None
    dim: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}")
        if (self.kind in HEAD_KINDS) != (self.head is not None):
            raise ValueError(f"head index must be given iff kind is an attention matrix: {self.kind}")

    def __str__(self) -> str:
        if self.head is None:
            return f"L{self.layer}{self.kind}"
        return f"L{self.layer}{self.kind}H{self.head}"

    @property
    def sort_key(self) -> tuple[int, int, int]:
        return (self.layer, KINDS.index(self.kind), -1 if self.head is None else self.head)

    @property
    def tensor_names(self) -> tuple[str, ...]:
        if self.head is not None:
            return (str(self),)
        return (f"{self}_w", f"{self}_b")

    @classmethod
    def parse(cls, name: str) -> "BlockId":
        import re

        m = re.fullmatch(r"L(\d+)(Wk|Wq|Wv|Wo|Cfc|Cproj)(?:H(\d+))?", name)
        if not m:
            raise ValueError(f"not a block name: {name!r}")
        head = None if m.group(3) is None else int(m.group(3))
        return cls(int(m.group(1)), m.group(2), head)


def block_registry(config: ModelConfig) -> list[BlockId]:
    """All selectable blocks in canonical order."""
    c = config
    out = []
    for l in range(c.n_layers):
        for kind in HEAD_KINDS:
            for h in range(c.n_heads):
                out.append(BlockId(l, kind, h, c.d_model * c.d_head))
        out.append(BlockId(l, "Cfc", None, c.d_model * c.d_ff + c.d_ff))
        out.append(BlockId(l, "Cproj", None, c.d_ff * c.d_model + c.d_model))
    return out


def expected_num_params(config: ModelConfig) -> int:
    c = config
    per_layer = 4 * c.d_model * c.d_model + 2 * c.d_model * c.d_ff + c.d_ff + c.d_model + 4 * c.d_model
    return c.vocab_size * c.d_model + c.context_length * c.d_model + c.n_layers * per_layer + 2 * c.d_model


class TinyGPT(nn.Module):
    """Pre-norm GPT with GELU MLP and output head tied to the token embedding."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config.validate()
        c = config
        P = nn.Parameter
        self.params = nn.ParameterDict()
        self.params["tok_emb"] = P(torch.empty(c.vocab_size, c.d_model))
        self.params["pos_emb"] = P(torch.empty(c.context_length, c.d_model))
        for l in range(c.n_layers):
            for kind in HEAD_KINDS:
                for h in range(c.n_heads):
                    shape = (c.d_head, c.d_model) if kind == "Wo" else (c.d_model, c.d_head)
                    self.params[f"L{l}{kind}H{h}"] = P(torch.empty(shape))
            self.params[f"L{l}Cfc_w"] = P(torch.empty(c.d_model, c.d_ff))
            self.params[f"L{l}Cfc_b"] = P(torch.empty(c.d_ff))
            self.params[f"L{l}Cproj_w"] = P(torch.empty(c.d_ff, c.d_model))
            self.params[f"L{l}Cproj_b"] = P(torch.empty(c.d_model))
            for ln in ("ln1", "ln2"):
                self.params[f"L{l}{ln}_g"] = P(torch.empty(c.d_model))
                self.params[f"L{l}{ln}_b"] = P(torch.empty(c.d_model))
        self.params["lnf_g"] = P(torch.empty(c.d_model))
        self.params["lnf_b"] = P(torch.empty(c.d_model))
        self._blocks = block_registry(c)

    @property
    def context_length(self) -> int:
        return self.config.context_length

    def blocks(self) -> list[BlockId]:
        return list(self._blocks)

    def block_tensors(self, block: BlockId | str) -> list[nn.Parameter]:
        if isinstance(block, str):
            block = BlockId.parse(block)
        try:
            return [self.params[n] for n in block.tensor_names]
        except KeyError:
            raise KeyError(f"no such block in this model: {block}") from None

    def registry_names(self) -> list[str]:
        return [n for b in self._blocks for n in b.tensor_names]

    def other_names(self) -> list[str]:
        reg = set(self.registry_names())
        return [n for n in self.params.keys() if n not in reg]

    def canonical_names(self) -> list[str]:
        """Registry tensors in canonical block order, then embeddings and norms."""
        return self.registry_names() + sorted(self.other_names())

    def num_params(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def forward(self, tokens: torch.Tensor, attention_out: list | None = None) -> torch.Tensor:
        if tokens.dim() == 1:
            return self.forward(tokens[None], attention_out)[0]
        c = self.config
        B, T = tokens.shape
        if T > c.context_length:
            raise ValueError(f"sequence of length {T} exceeds context length {c.context_length}")
        if T == 0:
            raise ValueError("empty input")
        if tokens.min() < 0 or tokens.max() >= c.vocab_size:
            raise ValueError("token id out of range")
        p = self.params
        x = p["tok_emb"][tokens] + p["pos_emb"][:T]
        causal = torch.ones(T, T, dtype=torch.bool).tril()
        scale = 1.0 / math.sqrt(c.d_head)
        for l in range(c.n_layers):
            h = F.layer_norm(x, (c.d_model,), p[f"L{l}ln1_g"], p[f"L{l}ln1_b"])
            wq = torch.stack([p[f"L{l}WqH{i}"] for i in range(c.n_heads)])
            wk = torch.stack([p[f"L{l}WkH{i}"] for i in range(c.n_heads)])
            wv = torch.stack([p[f"L{l}WvH{i}"] for i in range(c.n_heads)])
            wo = torch.stack([p[f"L{l}WoH{i}"] for i in range(c.n_heads)])
            q = torch.einsum("btd,hde->bhte", h, wq)
            k = torch.einsum("btd,hde->bhte", h, wk)
            v = torch.einsum("btd,hde->bhte", h, wv)
            scores = (q @ k.transpose(-1, -2)) * scale
            scores = scores.masked_fill(~causal, float("-inf"))
            att = torch.softmax(scores, dim=-1)
            if attention_out is not None:
                attention_out.append(att.detach())
            x = x + torch.einsum("bhte,hed->btd", att @ v, wo)
            h = F.layer_norm(x, (c.d_model,), p[f"L{l}ln2_g"], p[f"L{l}ln2_b"])
            h = F.gelu(h @ p[f"L{l}Cfc_w"] + p[f"L{l}Cfc_b"])
            x = x + h @ p[f"L{l}Cproj_w"] + p[f"L{l}Cproj_b"]
        x = F.layer_norm(x, (c.d_model,), p["lnf_g"], p["lnf_b"])
        return x @ p["tok_emb"].T


def init_model(config: ModelConfig, seed: int | None = None) -> TinyGPT:
    """Fresh model; weights ~ N(0, 0.02), layer-norm gains 1, biases 0."""
    config.validate()
    seed = config.seed if seed is None else seed
    model = TinyGPT(config)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, t in model.params.items():
            if name.endswith("_g"):
                t.fill_(1.0)
            elif name.endswith("_b"):
                t.zero_()
            else:
                t.copy_(torch.randn(t.shape, generator=g) * INIT_STD)
    return model


def as_tokens(tokens: Sequence[int] | torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(tokens, dtype=torch.long)


def forward_logits(model, tokens: Sequence[int] | torch.Tensor) -> torch.Tensor:
    """Logits ``[seq_len, |V|]`` for one token sequence."""
    with torch.no_grad():
        return model(as_tokens(tokens)[None])[0]


def generate_greedy(model, prefix: Sequence[int] | torch.Tensor, max_new: int) -> list[int]:
    """Greedy continuation of ``prefix``; stops early only at the context limit.

    ``model`` is anything mapping ``[B, T]`` ids to ``[B, T, V]`` logits.
    """
    seq = as_tokens(prefix).tolist()
    if not seq:
        raise ValueError("prefix must be non-empty")
    limit = getattr(model, "context_length", None)
    if limit is not None and len(seq) > limit:
        raise ValueError("prefix exceeds context length")
    out: list[int] = []
    with torch.no_grad():
        for _ in range(max_new):
            if limit is not None and len(seq) >= limit:
                break
            logits = model(as_tokens(seq)[None])[0, -1]
            nxt = int(torch.argmax(logits))
            seq.append(nxt)
            out.append(nxt)
    return out


def attention_pattern(model: TinyGPT, tokens: Sequence[int] | torch.Tensor, layer: int, head: int) -> torch.Tensor:
    """Causal softmax-normalized query-key scores ``[T, T]`` of one head."""
    c = model.config
    if not 0 <= layer < c.n_layers:
        raise IndexError(f"layer {layer} out of range")
    if not 0 <= head < c.n_heads:
        raise IndexError(f"head {head} out of range")
    atts: list[torch.Tensor] = []
    with torch.no_grad():
        model(as_tokens(tokens)[None], attention_out=atts)
    return atts[layer][0, head]


def clone_model(model: TinyGPT) -> TinyGPT:
    other = TinyGPT(model.config).to(next(iter(model.params.values())).dtype)
    with torch.no_grad():
        for name, t in model.params.items():
            other.params[name].copy_(t)
    return other
