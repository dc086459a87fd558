"""Corpus-derived tokenizer for prompts and prescription text.

The vocabulary is small and closed: herb names (each one token, interior
spaces allowed), every whitespace-delimited word from the clinical text
fields, the ten digits, ".", "g", ",", the prompt template markers, and the
newline. Encoding is greedy longest-match over that token set; inter-token
whitespace is dropped and reconstructed by decoding rules, so decode inverts
encode on any text the grammar can produce.

Reserved ids: PAD=0, BOS=1, EOS=2, UNK=3.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .corpus import Corpus, EmptyCorpus

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3

PAD_TOKEN = "<pad>"
BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"
UNK_TOKEN = "<unk>"

_RESERVED = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN)

_DIGITS = tuple("0123456789")
_TEMPLATE_MARKERS = ("Symptoms:", "History:", "Tongue:", "Prescription:", "|")
_NUMERIC_TAIL = set(_DIGITS) | {".", "g"}
_NUMERIC_HEAD = set(_DIGITS) | {"."}


class TokenizerError(ValueError):
    """Base class for tokenizer errors."""


class InvalidTokenId(TokenizerError):
    """A token id is outside the vocabulary."""


@dataclass(frozen=True)
class Vocabulary:
    """Token-to-id table with a longest-match index for encoding."""

    id_of: dict[str, int]
    token_of: tuple[str, ...]
    _by_first_char: dict[str, tuple[str, ...]] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        index: dict[str, list[str]] = {}
        for token in self.token_of[len(_RESERVED):]:
            index.setdefault(token[0], []).append(token)
        frozen = {
            ch: tuple(sorted(tokens, key=lambda t: (-len(t), t)))
            for ch, tokens in index.items()
        }
        object.__setattr__(self, "_by_first_char", frozen)

    def __len__(self) -> int:
        return len(self.token_of)

    def __contains__(self, token: str) -> bool:
        return token in self.id_of


def build_vocab(corpus: Corpus) -> Vocabulary:
    """Collect the closed token set from a corpus; ids are sorted after reserved."""
    if not corpus.records:
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")
    tokens: set[str] = set(corpus.herb_vocabulary)
    for record in corpus.records:
        for text in (record.chief_complaint, record.history, record.tongue):
            tokens.update(text.split())
    tokens.update(_DIGITS)
    tokens.update((".", "g", ","))
    tokens.update(_TEMPLATE_MARKERS)
    tokens.add("\n")
    ordered = _RESERVED + tuple(sorted(tokens))
    return Vocabulary(
        id_of={token: i for i, token in enumerate(ordered)},
        token_of=ordered,
    )


def _match_at(vocab: Vocabulary, text: str, pos: int) -> str | None:
    for token in vocab._by_first_char.get(text[pos], ()):
        if text.startswith(token, pos):
            return token
    return None


def encode(vocab: Vocabulary, text: str) -> list[int]:
    """Greedy longest-match token ids; unmatched spans collapse to one UNK.

    Spaces and tabs between tokens are dropped (tokens may contain interior
    spaces and still match). An out-of-vocabulary span runs to the next
    whitespace or the next position where some token matches.
    """
    ids: list[int] = []
    pos = 0
    n = len(text)
    while pos < n:
        if text[pos] in (" ", "\t"):
            pos += 1
            continue
        token = _match_at(vocab, text, pos)
        if token is not None:
            ids.append(vocab.id_of[token])
            pos += len(token)
            continue
        end = pos + 1
        while end < n and not text[end].isspace() and _match_at(vocab, text, end) is None:
            end += 1
        ids.append(UNK_ID)
        pos = end
    return ids


def _separator(prev: str, cur: str) -> str:
    # Number-run membership is decided on whole tokens (all single characters)
    # so that a multi-character token ending in a digit still gets a space.
    if prev == "\n" or cur == "\n":
        return ""
    if cur == ",":
        return ""
    if prev in _NUMERIC_HEAD and cur in _NUMERIC_TAIL:
        return ""
    return " "


def decode(vocab: Vocabulary, ids) -> str:
    """Render ids back to text, reinserting spaces by token class.

    No space inside a number run (digits, ".", the unit "g"), none before a
    comma, none around newlines, one space otherwise. PAD, BOS and EOS render
    as nothing; UNK renders as its placeholder.
    """
    parts: list[str] = []
    prev = ""
    for raw in ids:
        i = int(raw)
        if not 0 <= i < len(vocab.token_of):
            raise InvalidTokenId(f"token id {i} outside vocabulary of {len(vocab.token_of)}")
        if i in (PAD_ID, BOS_ID, EOS_ID):
            continue
        token = vocab.token_of[i]
        if prev:
            parts.append(_separator(prev, token))
        parts.append(token)
        prev = token
    return "".join(parts)


def save_vocab(vocab: Vocabulary, path) -> None:
    obj = {"version": 1, "tokens": list(vocab.token_of)}
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(obj, handle, indent=2)
        handle.write("\n")


def load_vocab(path) -> Vocabulary:
    with open(path, "r", encoding="utf-8") as handle:
        obj = json.load(handle)
    if not isinstance(obj, dict) or obj.get("version") != 1 or "tokens" not in obj:
        raise TokenizerError(f"not a version-1 vocabulary file: {path}")
    tokens = tuple(obj["tokens"])
    if tokens[: len(_RESERVED)] != _RESERVED:
        raise TokenizerError("vocabulary file does not start with the reserved tokens")
    return Vocabulary(id_of={t: i for i, t in enumerate(tokens)}, token_of=tokens)
