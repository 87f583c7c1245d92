"""Report tokenization, text embedding and image patch projection."""

from __future__ import annotations

import re
from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .nn import INIT_STD, Linear, Module, _swap_last
from .tensor import Rng, Tensor, add, gather_cols, gather_rows, matmul

PAD, UNK, CLS = 0, 1, 2
RESERVED = ("<pad>", "<unk>", "<cls>")

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def split_tokens(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Tokenizer:
    def __init__(self, tokens: Sequence[str]):
        """``tokens`` are the non-reserved vocabulary entries, in id order from 3."""
        self.tokens = list(RESERVED) + list(tokens)
        self.vocab = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.vocab) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        return [self.vocab.get(tok, UNK) for tok in split_tokens(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids if i not in (PAD, CLS))

    def save(self, path: str | Path):
        Path(path).write_text("".join(t + "\n" for t in self.tokens[3:]), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def build_vocab(corpus: Sequence[str], max_vocab: int) -> Tokenizer:
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    if max_vocab < len(RESERVED):
        raise ValueError(f"max_vocab must be at least {len(RESERVED)}")
    counts = Counter(tok for text in corpus for tok in split_tokens(text))
    ranked = sorted(counts, key=lambda tok: (-counts[tok], tok))
    ranked = [t for t in ranked if t not in RESERVED]
    return Tokenizer(ranked[: max_vocab - len(RESERVED)])


def encode_text(tokenizer: Tokenizer, text: str, seq_len: int) -> list[int]:
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    ids = ([CLS] + tokenizer.encode(text))[:seq_len]
    return ids + [PAD] * (seq_len - len(ids))


class TextEmbedder(Module):
    def __init__(self, vocab_size: int, max_len: int, d_model: int, rng: Rng):
        self.token_table = Tensor(rng.normal((vocab_size, d_model), INIT_STD), requires_grad=True)
        self.pos_table = Tensor(rng.normal((max_len, d_model), INIT_STD), requires_grad=True)
        self._adapter = None

    def named_parameters(self, prefix: str = ""):
        yield from super().named_parameters(prefix)
        if self._adapter is not None:
            yield f"{prefix}token_table.lora_a", self._adapter.a
            yield f"{prefix}token_table.lora_b", self._adapter.b


def embed_text(e: TextEmbedder, ids, training: bool = False, rng: Rng | None = None) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    s = ids.shape[-1]
    if s > e.pos_table.shape[0]:
        raise ValueError(f"sequence length {s} exceeds positional table {e.pos_table.shape[0]}")
    rows = gather_rows(e.token_table, ids)
    if e._adapter is not None:
        ad = e._adapter
        # lookup is the product with a one-hot column, so the update is B A[:, id]
        delta = matmul(gather_cols(ad.a, ids), _swap_last(ad.b))
        rows = add(rows, delta * ad.scale)
    pos = gather_rows(e.pos_table, np.arange(s))
    return add(rows, pos)


class PatchProjector(Module):
    """Per-patch linear map, i.e. a convolution with kernel = stride = patch size."""

    def __init__(self, image_side: int, patch_size: int, d_model: int, rng: Rng):
        if patch_size < 1 or image_side % patch_size:
            raise ValueError(f"image side {image_side} not divisible by patch size {patch_size}")
        self.proj = Linear(patch_size * patch_size, d_model, rng)
        n = (image_side // patch_size) ** 2
        self.pos_table = Tensor(rng.normal((n, d_model), INIT_STD), requires_grad=True)
        self._patch = patch_size
        self._side = image_side

    @property
    def patch_size(self) -> int:
        return self._patch

    @property
    def proj_weight(self) -> Tensor:
        return self.proj.weight

    @property
    def n_patches(self) -> int:
        return (self._side // self._patch) ** 2


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(..., side, side) -> (..., n_patches, p*p); patches and pixels row-major."""
    images = np.asarray(images, dtype=np.float64)
    side = images.shape[-1]
    if images.shape[-2] != side or side % patch_size:
        raise ValueError(f"image of shape {images.shape[-2:]} cannot be cut into {patch_size}px patches")
    g = side // patch_size
    lead = images.shape[:-2]
    x = images.reshape(lead + (g, patch_size, g, patch_size))
    n = len(lead)
    x = x.transpose(tuple(range(n)) + (n, n + 2, n + 1, n + 3))
    return x.reshape(lead + (g * g, patch_size * patch_size))


def patchify_project(pp: PatchProjector, images, training: bool = False,
                     rng: Rng | None = None) -> Tensor:
    images = images.data if isinstance(images, Tensor) else images
    if np.shape(images)[-1] != pp._side:
        raise ValueError(f"projector expects side {pp._side}, got image shape {np.shape(images)}")
    patches = Tensor(patchify(images, pp.patch_size))
    return add(pp.proj(patches, training, rng), pp.pos_table)
