"""Text side: tokenizer, vocabulary and text-embedding providers.

Two providers share one interface (``encode_batch`` / ``embed``):

* :class:`BuiltinTextEncoder` - token embeddings + learned positions + one
  self-attention layer, trainable unless frozen.
* :class:`FileEmbeddingProvider` - precomputed per-caption sequences read
  from a ``TEMB1`` file, standing in for a frozen language model.
"""

from __future__ import annotations

import hashlib
import json
import re
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from crosscoherence.attention import MultiHeadAttention

PAD, OOV = "<pad>", "<oov>"
_WORD = re.compile(r"[^\W_]+", re.UNICODE)

EMBEDDING_MAGIC = b"TEMB1"


class TokenizerError(ValueError):
    pass


class MissingEmbeddingError(KeyError):
    pass


def words(text: str) -> List[str]:
    """Lowercase and split on whitespace/punctuation; punctuation is dropped."""
    return _WORD.findall(text.lower())


class Vocabulary:
    """Word -> id map. Id 0 is padding, id 1 is out-of-vocabulary."""

    def __init__(self, tokens: Sequence[str]):
        self.itos = [PAD, OOV] + [t for t in tokens if t not in (PAD, OOV)]
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def build(cls, corpus: Iterable[str], min_count: int = 1) -> "Vocabulary":
        counts = Counter(w for text in corpus for w in words(text))
        return cls(sorted(w for w, c in counts.items() if c >= min_count))

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def oov_id(self) -> int:
        return 1

    def __len__(self):
        return len(self.itos)

    def to_json(self) -> str:
        return json.dumps(self.itos[2:])

    @classmethod
    def from_json(cls, s: str) -> "Vocabulary":
        return cls(json.loads(s))


def tokenize(text: str, vocab: Vocabulary) -> List[int]:
    toks = words(text)
    if not toks:
        raise TokenizerError(f"nothing to tokenize in {text!r}")
    return [vocab.stoi.get(t, vocab.oov_id) for t in toks]


@dataclass
class TextEmbeddingSequence:
    embeddings: torch.Tensor  # (T, D_text)
    mask: torch.Tensor        # (T,) bool, True = real token


def caption_id(text: str) -> str:
    """Stable key for a caption in an embedding file."""
    return hashlib.sha1(text.encode("utf-8")).hexdigest()[:16]


def _pad_batch(seqs: Sequence[torch.Tensor]):
    t_max = max(s.shape[0] for s in seqs)
    d = seqs[0].shape[1]
    out = seqs[0].new_zeros((len(seqs), t_max, d))
    mask = torch.zeros((len(seqs), t_max), dtype=torch.bool)
    for i, s in enumerate(seqs):
        out[i, : s.shape[0]] = s
        mask[i, : s.shape[0]] = True
    return out, mask


class BuiltinTextEncoder(nn.Module):
    """Trainable token embeddings followed by ``layers`` self-attention layers."""

    def __init__(self, vocab: Vocabulary, d_text: int = 128, heads: int = 4,
                 max_len: int = 64, frozen: bool = False, layers: int = 1):
        super().__init__()
        self.vocab = vocab
        self.max_len = max_len
        self.d_text = d_text
        self.embedding = nn.Embedding(len(vocab), d_text)
        self.position = nn.Embedding(max_len, d_text)
        nn.init.normal_(self.position.weight, std=0.1)
        if layers < 1:
            raise ValueError("layers must be >= 1")
        self.layers = nn.ModuleList(MultiHeadAttention(d_text, heads, use_residual_norm=True)
                                    for _ in range(layers))
        self.frozen = frozen

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool):
        self._frozen = bool(value)
        for p in self.parameters():
            p.requires_grad_(not self._frozen)

    def ids(self, texts: Sequence[str]) -> Tuple[torch.Tensor, torch.Tensor]:
        seqs = [tokenize(t, self.vocab)[: self.max_len] for t in texts]
        t_max = max(len(s) for s in seqs)
        ids = torch.zeros((len(seqs), t_max), dtype=torch.long)
        mask = torch.zeros((len(seqs), t_max), dtype=torch.bool)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = torch.as_tensor(s)
            mask[i, : len(s)] = True
        return ids, mask

    def encode_batch(self, texts: Sequence[str]):
        ids, mask = self.ids(texts)
        pos = torch.arange(ids.shape[1])
        x = self.embedding(ids) + self.position(pos).unsqueeze(0)
        for layer in self.layers:
            x, _ = layer(x, x, mask)
        return x, mask

    def embed(self, text: str) -> TextEmbeddingSequence:
        out, mask = self.encode_batch([text])
        return TextEmbeddingSequence(out[0], mask[0])


class FileEmbeddingProvider:
    """Read-only lookup of precomputed caption embeddings keyed by caption id."""

    def __init__(self, records: Dict[str, np.ndarray], dtype: torch.dtype = torch.float32):
        self.records = {k: np.asarray(v, dtype=np.float32) for k, v in records.items()}
        dims = {v.shape[1] for v in self.records.values()}
        if len(dims) > 1:
            raise ValueError(f"embedding file mixes widths {sorted(dims)}")
        self.d_text = dims.pop() if dims else 0
        self.dtype = dtype
        self.frozen = True

    @classmethod
    def load(cls, path, dtype: torch.dtype = torch.float32) -> "FileEmbeddingProvider":
        return cls(read_embedding_file(path), dtype)

    def lookup(self, cid: str) -> np.ndarray:
        try:
            return self.records[cid]
        except KeyError:
            raise MissingEmbeddingError(f"no embedding stored for caption id {cid!r}") from None

    def embed(self, text: str) -> TextEmbeddingSequence:
        emb = torch.as_tensor(self.lookup(caption_id(text)), dtype=self.dtype)
        return TextEmbeddingSequence(emb, torch.ones(emb.shape[0], dtype=torch.bool))

    def encode_batch(self, texts: Sequence[str]):
        return _pad_batch([self.embed(t).embeddings for t in texts])


def embed_text(text: str, provider) -> TextEmbeddingSequence:
    return provider.embed(text)


def write_embedding_file(path, records: Dict[str, np.ndarray]) -> None:
    """TEMB1: magic, then per record: u32 id length, utf-8 id, u32 T, u32 D, T*D float32 LE."""
    with open(path, "wb") as f:
        f.write(EMBEDDING_MAGIC)
        for cid, arr in records.items():
            arr = np.asarray(arr, dtype="<f4")
            if arr.ndim != 2:
                raise ValueError(f"embedding for {cid!r} must be T x D")
            key = cid.encode("utf-8")
            f.write(struct.pack("<I", len(key)) + key)
            f.write(struct.pack("<II", *arr.shape))
            f.write(arr.tobytes())


def read_embedding_file(path) -> Dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if not data.startswith(EMBEDDING_MAGIC):
        raise ValueError(f"{path}: not a TEMB1 embedding file")
    pos = len(EMBEDDING_MAGIC)
    records: Dict[str, np.ndarray] = {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            cid = data[pos:pos + n].decode("utf-8")
            pos += n
            t, d = struct.unpack_from("<II", data, pos)
            pos += 8
            arr = np.frombuffer(data, dtype="<f4", count=t * d, offset=pos).reshape(t, d)
            pos += 4 * t * d
            records[cid] = arr.astype(np.float32)
    except (struct.error, ValueError) as e:
        raise ValueError(f"{path}: truncated or corrupt embedding file ({e})") from None
    return records


def export_embeddings(provider, texts: Iterable[str], path) -> int:
    """Freeze a provider's outputs for ``texts`` into a TEMB1 file."""
    records = {}
    with torch.no_grad():
        for t in texts:
            records.setdefault(caption_id(t), provider.embed(t).embeddings.float().numpy())
    write_embedding_file(path, records)
    return len(records)
