"""Named random substreams derived from one root seed."""

import hashlib

import torch


def derive_seed(root: int, name: str) -> int:
    h = hashlib.sha256(f"{root}:{name}".encode()).digest()
    return int.from_bytes(h[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def substream(root: int, name: str) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(root, name))
