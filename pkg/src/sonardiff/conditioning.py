"""Sonar tag grammar, prompt templates, tokenization and the text encoder."""

from __future__ import annotations

import logging
import re
import string
import warnings
from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import ParameterError, TemplateError, ValidationError

log = logging.getLogger(__name__)

OBJECT_TAGS = ("PL", "SH", "CYM", "ASF", "TCM")
BACKGROUND_TAGS = ("AS", "AP", "SEF")

# longer prefixes first so ASF wins over AS
_PREFIXES = sorted(OBJECT_TAGS + BACKGROUND_TAGS, key=len, reverse=True)
TAG_RE = re.compile(r"(?<![A-Za-z0-9])(" + "|".join(_PREFIXES) + r")(\d{1,5})\*")
_TOKEN_RE = re.compile(TAG_RE.pattern + r"|[A-Za-z0-9]+(?:'[A-Za-z]+)?")

PAD, UNK = "<pad>", "<unk>"
MAX_LEN = 77
D_COND = 64


@dataclass(frozen=True)
class Tag:
    kind: str  # "object" | "background"
    prefix: str
    digits: str

    @property
    def text(self) -> str:
        return f"{self.prefix}{self.digits}*"


@dataclass(frozen=True)
class TagGrammar:
    object_tags: tuple = OBJECT_TAGS
    background_tags: tuple = BACKGROUND_TAGS
    min_digits: int = 1
    max_digits: int = 5
    terminator: str = "*"

    def is_tag(self, text: str) -> bool:
        m = TAG_RE.fullmatch(text)
        return m is not None

    def make(self, prefix: str, number: int) -> str:
        if prefix not in self.object_tags + self.background_tags:
            raise ParameterError(f"unknown tag prefix {prefix!r}")
        digits = str(int(number))
        if not self.min_digits <= len(digits) <= self.max_digits:
            raise ParameterError(f"tag number {number} must have 1-5 digits")
        return f"{prefix}{digits}{self.terminator}"


GRAMMAR = TagGrammar()


def parse_tags(caption: str) -> list[Tag]:
    """Every tag in ``caption``, in order of appearance."""
    out = []
    for m in TAG_RE.finditer(caption or ""):
        prefix, digits = m.group(1), m.group(2)
        kind = "object" if prefix in OBJECT_TAGS else "background"
        out.append(Tag(kind, prefix, digits))
    return out


@dataclass
class PromptSpec:
    template: str
    bindings: dict = field(default_factory=dict)

    def slots(self) -> list[str]:
        return [name for _, name, _, _ in string.Formatter().parse(self.template) if name is not None]


def render_prompt(spec: PromptSpec) -> str:
    for slot in spec.slots():
        if slot not in spec.bindings:
            raise TemplateError(slot)
    return spec.template.format_map(spec.bindings)


@dataclass(frozen=True)
class CaptionPair:
    low_level: str
    high_level: str

    def __post_init__(self):
        if not self.low_level.strip() or not self.high_level.strip():
            raise ValidationError("caption pair needs non-empty low and high level text")

    def prompt(self) -> str:
        return f"{self.low_level.strip()} {self.high_level.strip()}"


def split_words(text: str) -> list[str]:
    """Word-level pieces; tags stay atomic and keep their case, words are lowercased."""
    pieces = []
    for m in _TOKEN_RE.finditer(text):
        piece = m.group(0)
        pieces.append(piece if m.group(1) else piece.lower())
    return pieces


class Vocabulary:
    """Word-level vocabulary; ids 0 and 1 are reserved for padding and unknown words."""

    def __init__(self, tokens=()):
        self.itos = [PAD, UNK]
        self.stoi = {PAD: 0, UNK: 1}
        for tok in tokens:
            self.add(tok)

    @classmethod
    def build(cls, corpus) -> "Vocabulary":
        vocab = cls()
        vocab.extend(corpus)
        return vocab

    def add(self, tok: str) -> int:
        if tok not in self.stoi:
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)
        return self.stoi[tok]

    def extend(self, corpus) -> int:
        before = len(self)
        for text in corpus:
            for piece in split_words(text):
                self.add(piece)
        return len(self) - before

    def __len__(self):
        return len(self.itos)

    def __contains__(self, tok):
        return tok in self.stoi

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos) -> "Vocabulary":
        if list(itos[:2]) != [PAD, UNK]:
            raise ValidationError("vocabulary must start with the reserved tokens")
        return cls(itos[2:])

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def pad_id(self) -> int:
        return 0


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    if text is None or not text.strip():
        raise ParameterError("cannot tokenize empty text")
    return [vocab.stoi.get(piece, vocab.unk_id) for piece in split_words(text)]


class TextEncoder(nn.Module):
    """Learned token embeddings plus learned positional offsets.

    The empty prompt maps to the null embedding: a single all-zero vector.
    The denoiser uses the same null embedding when it is given no
    conditioning at all.
    """

    def __init__(self, vocab_size: int, d_cond: int = D_COND, max_len: int = MAX_LEN):
        super().__init__()
        self.d_cond = d_cond
        self.max_len = max_len
        self.token = nn.Embedding(vocab_size, d_cond)
        self.position = nn.Embedding(max_len, d_cond)
        nn.init.normal_(self.token.weight, std=0.5)
        nn.init.normal_(self.position.weight, std=0.1)

    @property
    def vocab_size(self) -> int:
        return self.token.num_embeddings

    def resize(self, vocab_size: int, generator: torch.Generator | None = None):
        """Grow the token table; existing rows are kept verbatim."""
        old = self.token.weight.data
        if vocab_size < old.shape[0]:
            raise ParameterError("vocabulary cannot shrink")
        if vocab_size == old.shape[0]:
            return
        new = nn.Embedding(vocab_size, self.d_cond).to(old.dtype)
        with torch.no_grad():
            new.weight[: old.shape[0]] = old
            new.weight[old.shape[0]:] = 0.5 * torch.randn(
                vocab_size - old.shape[0], self.d_cond, generator=generator, dtype=old.dtype
            )
        self.token = new

    def null_embedding(self, batch: int = 1) -> torch.Tensor:
        w = self.token.weight
        return torch.zeros(batch, 1, self.d_cond, dtype=w.dtype)

    def truncate(self, ids: list[int]) -> list[int]:
        if len(ids) > self.max_len:
            warnings.warn(f"prompt has {len(ids)} tokens, truncated to {self.max_len}", stacklevel=3)
            log.warning("prompt truncated from %d to %d tokens", len(ids), self.max_len)
            ids = ids[: self.max_len]
        return ids

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        """``ids`` is (B, s) -> (B, s, d_cond)."""
        pos = torch.arange(ids.shape[1])
        return self.token(ids) + self.position(pos)[None]

    def encode_text(self, ids) -> torch.Tensor:
        """One token id sequence -> (s, d_cond)."""
        ids = list(ids)
        if not ids:
            raise ParameterError("token sequence is empty")
        ids = self.truncate(ids)
        return self(torch.as_tensor([ids], dtype=torch.long))[0]


def encode_text(ids, encoder: TextEncoder) -> torch.Tensor:
    return encoder.encode_text(ids)


class Conditioner:
    """Vocabulary plus encoder: prompt text -> padded conditioning batch."""

    def __init__(self, vocab: Vocabulary, encoder: TextEncoder):
        self.vocab = vocab
        self.encoder = encoder

    def ids(self, text: str) -> list[int]:
        if text is None or not text.strip():
            return []
        return self.encoder.truncate(tokenize(text, self.vocab))

    def embed_ids(self, id_lists) -> tuple[torch.Tensor, torch.Tensor]:
        """Batch of id lists -> (embedding (B, s, d), key mask (B, s)).

        Empty id lists become the null embedding.
        """
        batch = len(id_lists)
        s = max(1, max((len(x) for x in id_lists), default=1))
        ids = torch.zeros(batch, s, dtype=torch.long)
        mask = torch.zeros(batch, s, dtype=torch.bool)
        for i, x in enumerate(id_lists):
            if x:
                ids[i, : len(x)] = torch.as_tensor(x)
                mask[i, : len(x)] = True
        emb = self.encoder(ids)
        null = ~mask.any(dim=1)
        if null.any():
            emb = emb.clone()
            emb[null] = 0.0
            mask[null, 0] = True
        emb = emb * mask[..., None].to(emb.dtype)
        return emb, mask

    def embed(self, texts) -> tuple[torch.Tensor, torch.Tensor]:
        return self.embed_ids([self.ids(t) for t in texts])

    def embed_prompt(self, text: str) -> torch.Tensor:
        """Single prompt -> (1, s, d); the empty prompt gives the null embedding."""
        ids = self.ids(text)
        if not ids:
            return self.encoder.null_embedding()
        return self.encoder.encode_text(ids)[None]
