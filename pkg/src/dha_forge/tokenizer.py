"""Word-level tokenizer with byte fallback and reserved control/class tokens."""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .crashdata import ConfigError
from .labels import LABEL_ORDER, NarrativeLabel

CONTROL_TOKENS = ("<|pad|>", "<|bos|>", "<|eos|>", "<|system|>", "<|user|>", "<|assistant|>")
CLASS_TOKENS = tuple(lab.token for lab in LABEL_ORDER)
RESERVED_TOKENS = CONTROL_TOKENS + CLASS_TOKENS
N_RESERVED = len(RESERVED_TOKENS)
N_CONTROL_IDS = len(CONTROL_TOKENS)
N_BYTES = 256
BYTE_OFFSET = N_RESERVED
FIRST_WORD_ID = N_RESERVED + N_BYTES

PAD, BOS, EOS, SYS, USR, ASST = range(len(CONTROL_TOKENS))

# Class tokens first, then words with an optional leading whitespace char,
# single punctuation chars (optionally space-prefixed), and whitespace runs.
# Every character falls in exactly one alternative, so pieces concatenate back to the input.
_CLASS_ALT = "|".join(re.escape(t) for t in CLASS_TOKENS)
PIECE_RE = re.compile(rf"{_CLASS_ALT}|\s?\w+|\s?[^\s\w]|\s+")


def pieces(text: str) -> list[str]:
    return PIECE_RE.findall(text)


def _byte_token(b: int) -> str:
    return f"<0x{b:02X}>"


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})
        if len(self._index) != len(self.tokens):
            raise ValueError("vocab tokens must be unique")
        if self.tokens[:N_RESERVED] != RESERVED_TOKENS:
            raise ValueError("vocab must start with the reserved tokens")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._index[token]

    def get(self, token: str) -> int | None:
        return self._index.get(token)

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(range(N_CONTROL_IDS, N_RESERVED))

    def class_id(self, label: NarrativeLabel) -> int:
        return N_CONTROL_IDS + NarrativeLabel(label).index

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, tok in enumerate(self.tokens):
                fh.write(json.dumps({"id": i, "token": tok, "reserved": i < N_RESERVED},
                                    ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        rows = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines()
                if line.strip()]
        rows.sort(key=lambda r: r["id"])
        if [r["id"] for r in rows] != list(range(len(rows))):
            raise ValueError(f"{path}: vocab ids are not contiguous")
        return cls(tuple(r["token"] for r in rows))



def build_vocab(corpus: Iterable[str], max_size: int) -> Vocab:
    """Induce a word vocabulary from ``corpus``, most frequent first.

    Ties are broken lexicographically.  Reserved tokens and the 256 byte
    tokens always come first, so ``max_size`` must leave room for them.
    """
    floor = N_RESERVED + N_BYTES
    if max_size < floor:
        raise ConfigError(f"max_size must be at least {floor}, got {max_size}")
    counts: Counter[str] = Counter()
    n_docs = 0
    for text in corpus:
        n_docs += 1
        counts.update(p for p in pieces(text) if p not in CLASS_TOKENS)
    if n_docs == 0:
        raise ConfigError("cannot build a vocabulary from an empty corpus")
    reserved = set(RESERVED_TOKENS) | {_byte_token(b) for b in range(N_BYTES)}
    ranked = sorted((t for t in counts if t not in reserved), key=lambda t: (-counts[t], t))
    words = ranked[: max_size - floor]
    return Vocab(RESERVED_TOKENS + tuple(_byte_token(b) for b in range(N_BYTES)) + tuple(words))


def encode(text: str, vocab: Vocab) -> list[int]:
    ids: list[int] = []
    for piece in pieces(text):
        tid = vocab.get(piece)
        if tid is not None:
            ids.append(tid)
        else:
            ids.extend(BYTE_OFFSET + b for b in piece.encode("utf-8"))
    return ids


def _token_bytes(tid: int, vocab: Vocab) -> bytes:
    if BYTE_OFFSET <= tid < FIRST_WORD_ID:
        return bytes([tid - BYTE_OFFSET])
    return vocab.tokens[tid].encode("utf-8")


def decode(ids: Sequence[int], vocab: Vocab) -> str:
    buf = bytearray()
    for tid in ids:
        tid = int(tid)
        if not 0 <= tid < vocab.size:
            raise IndexError(f"token id {tid} outside vocabulary of size {vocab.size}")
        buf += _token_bytes(tid, vocab)
    return buf.decode("utf-8", errors="replace")


def encode_prompt(system: str, user: str, vocab: Vocab) -> list[int]:
    """Model input for a prompt: control markers around system and user text, ending at
    the assistant marker whose next token is the class answer."""
    return [BOS, SYS] + encode(system, vocab) + [USR] + encode(user, vocab) + [ASST]
