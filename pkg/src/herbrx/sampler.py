"""Sampling: temperature, top-k, nucleus truncation, and generation loops.

The filter pipeline divides logits by the temperature, takes the softmax,
keeps the ``top_k`` most probable tokens, and within those keeps the smallest
prefix (by descending probability, ties broken toward lower token ids) whose
cumulative mass reaches ``top_p``; survivors are renormalized. ``top_k = 1``
is greedy decoding regardless of seed. All probability arithmetic runs in
float64 so draws are platform-stable.

Generation is autoregressive from ``BOS + prompt`` until EOS, the token
budget, or the context window. ``predict_many`` drives several records at
once; every record owns a seeded stream keyed by its index, so batched and
one-at-a-time generation produce the same tokens.

Prescription decoding is constrained to the output grammar: a prescription
names each herb at most once (the domain type rejects duplicates), so the
predict helpers mask every already-emitted single-use token and decode over
the remaining alphabet. Dosage digits and punctuation recur freely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lm import ModelParams, forward_batch
from .prescription import ClinicalRecord, Prescription, parse_lenient, render_prompt
from .tokenizer import BOS_ID, EOS_ID, UNK_ID, Vocabulary, decode, encode


class SamplerError(ValueError):
    """Base class for sampling errors."""


class PromptTooLong(SamplerError):
    """The prompt leaves no room to generate inside the context window."""


@dataclass(frozen=True)
class SamplerConfig:
    """Decoding knobs. Defaults follow the documented recipe."""

    top_k: int = 50
    top_p: float = 0.7
    temperature: float = 0.95
    max_new_tokens: int = 128
    seed: int = 0

    def __post_init__(self) -> None:
        if self.top_k < 1:
            raise SamplerError("top_k must be at least 1")
        if not 0.0 < self.top_p <= 1.0:
            raise SamplerError("top_p must be in (0, 1]")
        if self.temperature <= 0.0:
            raise SamplerError("temperature must be positive")
        if self.max_new_tokens < 1:
            raise SamplerError("max_new_tokens must be at least 1")

    @classmethod
    def greedy(cls, max_new_tokens: int = 128) -> "SamplerConfig":
        """Deterministic argmax decoding (ties to the lowest token id)."""
        return cls(top_k=1, top_p=1.0, temperature=1.0, max_new_tokens=max_new_tokens)


def filter_logits(logits: np.ndarray, config: SamplerConfig) -> np.ndarray:
    """Full-vocabulary probability vector after the truncation pipeline.

    Zero everywhere except the survivors, which are renormalized. The nucleus
    cut uses cumulative mass of the temperature-scaled softmax in descending
    probability order; the prefix is minimal, so the token that crosses
    ``top_p`` is included and nothing after it.
    """
    logits = np.asarray(logits, dtype=np.float64).ravel()
    scaled = logits / config.temperature
    scaled -= scaled.max()
    e = np.exp(scaled)
    probs = e / e.sum()
    # Descending probability, ascending token id on ties.
    order = np.lexsort((np.arange(probs.size), -probs))
    head = order[: min(config.top_k, probs.size)]
    cum = np.cumsum(probs[head])
    cut = int(np.searchsorted(cum, config.top_p, side="left"))
    survivors = head[: min(cut + 1, head.size)]
    out = np.zeros_like(probs)
    out[survivors] = probs[survivors] / probs[survivors].sum()
    return out


def _draw(probs: np.ndarray, rng: np.random.Generator) -> int:
    cum = np.cumsum(probs)
    cum[-1] = 1.0
    return int(np.searchsorted(cum, rng.random(), side="right"))


# Tokens that may legitimately recur inside one prescription: dosage digits,
# the decimal point, the gram suffix, and the item separator.
_REUSABLE_TOKENS = frozenset("0123456789") | {".", "g", ","}


def single_use_ids(vocab: Vocabulary) -> frozenset[int]:
    """Ids of tokens that may appear at most once in a generated prescription.

    A prescription names each herb at most once, so every content token is
    single-use; only dosage digits, ".", "g", and "," recur. Reserved ids are
    excluded (EOS must stay reachable).
    """
    return frozenset(
        i
        for i in range(UNK_ID + 1, len(vocab))
        if vocab.token_of[i] not in _REUSABLE_TOKENS
    )


def _draw_constrained(
    row: np.ndarray,
    config: SamplerConfig,
    rng: np.random.Generator,
    banned: set[int],
) -> int:
    """Draw from the filtered distribution over the non-banned alphabet."""
    if banned:
        keep = np.asarray(
            [i for i in range(row.size) if i not in banned], dtype=np.int64
        )
        probs = filter_logits(row[keep], config)
        return int(keep[_draw(probs, rng)])
    return _draw(filter_logits(row, config), rng)


def generate(
    params: ModelParams,
    prompt_ids,
    config: SamplerConfig,
    rng: np.random.Generator | None = None,
    single_use: frozenset[int] | None = None,
) -> list[int]:
    """Sample a continuation of ``prompt_ids``; EOS stops and is dropped.

    A fresh generator seeded from ``config.seed`` is used unless ``rng`` is
    passed (the hook that lets batched drivers reproduce this function).
    ``single_use`` ids may be emitted at most once each: after one use they
    are removed from the candidate alphabet and the truncation pipeline runs
    over the tokens that remain.
    """
    ids = [BOS_ID] + [int(i) for i in prompt_ids]
    max_len = params.config.max_seq_len
    if len(ids) >= max_len:
        raise PromptTooLong(
            f"prompt occupies {len(ids)} of {max_len} context positions"
        )
    if rng is None:
        rng = np.random.default_rng(config.seed)
    out: list[int] = []
    banned: set[int] = set()
    while len(out) < config.max_new_tokens and len(ids) < max_len:
        logits = forward_batch(params, np.asarray([ids], dtype=np.int64))
        token = _draw_constrained(logits.data[0, -1], config, rng, banned)
        if token == EOS_ID:
            break
        if single_use is not None and token in single_use:
            banned.add(token)
        ids.append(token)
        out.append(token)
    return out


def _record_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


@dataclass(frozen=True)
class PredictionOutcome:
    """Raw generated text plus the salvage parse of it."""

    text: str
    prescription: Prescription | None
    warnings: tuple[str, ...]


def predict_record(
    params: ModelParams,
    vocab: Vocabulary,
    record: ClinicalRecord,
    config: SamplerConfig,
    rng: np.random.Generator | None = None,
) -> PredictionOutcome:
    """Prompt the model with one record and parse what it generates.

    Decoding is grammar-constrained: single-use tokens already emitted are
    masked, so no prescription can name the same herb twice.
    """
    prompt_ids = encode(vocab, render_prompt(record))
    tokens = generate(
        params, prompt_ids, config, rng=rng, single_use=single_use_ids(vocab)
    )
    text = decode(vocab, tokens)
    prescription, warnings = parse_lenient(text)
    return PredictionOutcome(text=text, prescription=prescription, warnings=tuple(warnings))


def predict_many(
    params: ModelParams,
    vocab: Vocabulary,
    records,
    config: SamplerConfig,
) -> list[PredictionOutcome]:
    """Generate for many records, batching rows that share a prompt length.

    Record ``i`` always draws from a stream keyed by ``(seed, i)``, so the
    output matches calling :func:`predict_record` with that stream row by
    row, whatever the batch composition. The same single-use grammar
    constraint applies, with banned-token state kept per record.
    """
    records = list(records)
    prompts = [
        [BOS_ID] + encode(vocab, render_prompt(record)) for record in records
    ]
    max_len = params.config.max_seq_len
    for ids in prompts:
        if len(ids) >= max_len:
            raise PromptTooLong(
                f"prompt occupies {len(ids)} of {max_len} context positions"
            )
    single_use = single_use_ids(vocab)
    outcomes: list[PredictionOutcome | None] = [None] * len(records)
    by_length: dict[int, list[int]] = {}
    for i, ids in enumerate(prompts):
        by_length.setdefault(len(ids), []).append(i)

    for length, indices in sorted(by_length.items()):
        alive = [
            (i, list(prompts[i]), _record_rng(config.seed, i), [], set())
            for i in indices
        ]
        while alive:
            stack = np.asarray([ids for _, ids, _, _, _ in alive], dtype=np.int64)
            logits = forward_batch(params, stack)
            still = []
            for row, (i, ids, rng, out, banned) in enumerate(alive):
                token = _draw_constrained(logits.data[row, -1], config, rng, banned)
                done = token == EOS_ID
                if not done:
                    if token in single_use:
                        banned.add(token)
                    ids.append(token)
                    out.append(token)
                    done = len(out) >= config.max_new_tokens or len(ids) >= max_len
                if done:
                    text = decode(vocab, out)
                    prescription, warnings = parse_lenient(text)
                    outcomes[i] = PredictionOutcome(
                        text=text, prescription=prescription, warnings=tuple(warnings)
                    )
                else:
                    still.append((i, ids, rng, out, banned))
            alive = still
    assert all(outcome is not None for outcome in outcomes)
    return outcomes
