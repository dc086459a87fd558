"""Adapter fine-tuning loop: masked next-token loss, Adam-style updates.

Each record becomes ``BOS + prompt + target + EOS``; the model is trained to
continue the prompt. With loss masking on (the default), only positions that
predict the target tokens and the closing EOS contribute; the prompt is
context, not training signal. The optimizer is adaptive moments with
decoupled weight decay (beta1 0.9, beta2 0.999, eps 1e-8, decay 0) over the
adapter tensors only; base weights never receive gradients. The learning
rate follows a cosine from ``base_lr`` to zero across all optimizer steps,
without warmup. Gradient accumulation sums microbatch gradients so that one
optimizer step equals one large batch: the loss is the mean over the
accumulation group of each sequence's mean token loss.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .corpus import Corpus, EmptyCorpus
from .lm import ModelParams, SequenceTooLong, forward_batch, trainable_tensors
from .prescription import ClinicalRecord, render_prompt, serialize
from .tokenizer import BOS_ID, EOS_ID, PAD_ID, UNK_ID, Vocabulary, encode


class TrainerError(RuntimeError):
    """Base class for training failures."""


class NonFiniteLoss(TrainerError):
    """The loss left the reals; training aborted with step diagnostics."""


class VocabularyGap(TrainerError, ValueError):
    """A training target does not tokenize cleanly (UNK in the target)."""


_BETA1 = 0.9
_BETA2 = 0.999
_EPS = 1e-8
_WEIGHT_DECAY = 0.0  # decoupled form; zero by contract, kept explicit


@dataclass(frozen=True)
class TrainConfig:
    """Loop hyperparameters. Defaults match the documented recipe."""

    epochs: int = 10
    base_lr: float = 1e-3
    batch_size: int = 16
    grad_accum_steps: int = 8
    seed: int = 0
    loss_masking: bool = True

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.grad_accum_steps < 1:
            raise ValueError("epochs, batch_size and grad_accum_steps must be positive")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")


@dataclass(frozen=True)
class LogRow:
    """One optimizer step: schedule position and group-mean loss."""

    step: int
    epoch: int
    lr: float
    loss: float


@dataclass
class TrainResult:
    params: ModelParams
    log: list[LogRow]


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine decay from ``base_lr`` at step 0 to zero at ``total_steps``."""
    if total_steps < 1:
        raise ValueError("total_steps must be at least 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def encode_example(vocab: Vocabulary, record: ClinicalRecord) -> tuple[list[int], list[int]]:
    """Token ids for a record's prompt and target (prescription text).

    Raises :class:`VocabularyGap` if the target picks up UNK: a model cannot
    be taught to emit text its vocabulary cannot express.
    """
    prompt_ids = encode(vocab, render_prompt(record))
    target_ids = encode(vocab, serialize(record.prescription))
    if UNK_ID in target_ids:
        raise VocabularyGap(
            f"target text not covered by the vocabulary: {serialize(record.prescription)!r}"
        )
    return prompt_ids, target_ids


def _pack_microbatch(
    examples: list[tuple[list[int], list[int]]],
    group_size: int,
    masked: bool,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Build padded inputs, next-token targets, and loss weights.

    Sequence: BOS, prompt (m tokens), target (k tokens), EOS. Inputs drop the
    final element; targets drop the first. With masking, positions m..m+k of
    the inputs (those predicting the target tokens and EOS) carry weight
    ``1 / ((k+1) * group_size)``; without, every real position carries
    ``1 / ((m+k+1) * group_size)``.
    """
    seqs = [[BOS_ID] + p + t + [EOS_ID] for p, t in examples]
    width = max(len(s) for s in seqs) - 1
    n = len(seqs)
    inputs = np.full((n, width), PAD_ID, dtype=np.int64)
    targets = np.full((n, width), PAD_ID, dtype=np.int64)
    weights = np.zeros((n, width), dtype=np.float32)
    for row, ((prompt, target), seq) in enumerate(zip(examples, seqs)):
        m, k = len(prompt), len(target)
        length = len(seq) - 1
        inputs[row, :length] = seq[:-1]
        targets[row, :length] = seq[1:]
        if masked:
            span = slice(m, m + k + 1)
            count = k + 1
        else:
            span = slice(0, length)
            count = length
        weights[row, span] = 1.0 / (count * group_size)
    return inputs, targets, weights


def _microbatch_loss(
    params: ModelParams,
    inputs: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray,
) -> Tensor:
    n, width = inputs.shape
    logits = forward_batch(params, inputs)
    flat = ad.reshape(logits, (n * width, params.config.vocab_size))
    losses = ad.cross_entropy_from_logits(flat, targets.reshape(-1))
    weighted = ad.mul(losses, Tensor(weights.reshape(-1)))
    return ad.reduce_sum(weighted)


def sequence_loss(
    params: ModelParams,
    prompt_ids: list[int],
    target_ids: list[int],
    masked: bool = True,
) -> float:
    """Mean token loss for one sequence; the unit the trainer averages."""
    inputs, targets, weights = _pack_microbatch([(prompt_ids, target_ids)], 1, masked)
    return float(_microbatch_loss(params, inputs, targets, weights).data)


class _AdamState:
    """First/second moment buffers per trainable tensor, stepped together."""

    def __init__(self, tensors: dict[str, Tensor]) -> None:
        self.tensors = tensors
        self.m = {n: np.zeros_like(t.data) for n, t in tensors.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in tensors.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - _BETA1 ** self.t
        bc2 = 1.0 - _BETA2 ** self.t
        for name, tensor in self.tensors.items():
            grad = tensor.grad
            if grad is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= _BETA1
            m += (1.0 - _BETA1) * grad
            v *= _BETA2
            v += (1.0 - _BETA2) * (grad * grad)
            update = (m / bc1) / (np.sqrt(v / bc2) + _EPS)
            if _WEIGHT_DECAY:
                tensor.data -= np.float32(lr * _WEIGHT_DECAY) * tensor.data
            tensor.data -= np.float32(lr) * update
            tensor.grad = None


def train(
    params: ModelParams,
    corpus: Corpus,
    vocab: Vocabulary,
    config: TrainConfig,
    on_epoch_end=None,
) -> TrainResult:
    """Fine-tune the adapters of ``params`` in place on ``corpus``.

    ``on_epoch_end(epoch, params)`` runs after each epoch (for checkpoints).
    Raises :class:`NonFiniteLoss` with step diagnostics if the loss diverges.
    """
    if not corpus.records:
        raise EmptyCorpus("cannot train on an empty corpus")
    if not params.adapters:
        raise TrainerError("model has no adapters; nothing is trainable")
    examples = [encode_example(vocab, record) for record in corpus.records]
    max_len = max(len(p) + len(t) + 1 for p, t in examples)
    if max_len > params.config.max_seq_len:
        raise SequenceTooLong(
            f"longest example needs {max_len} positions, model allows {params.config.max_seq_len}"
        )

    n = len(examples)
    micros_per_epoch = math.ceil(n / config.batch_size)
    steps_per_epoch = math.ceil(micros_per_epoch / config.grad_accum_steps)
    total_steps = config.epochs * steps_per_epoch

    adam = _AdamState(trainable_tensors(params))
    log: list[LogRow] = []
    step = 0
    for epoch in range(config.epochs):
        rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(2, epoch)))
        order = rng.permutation(n)
        micro_slices = [
            order[i : i + config.batch_size]
            for i in range(0, n, config.batch_size)
        ]
        for start in range(0, len(micro_slices), config.grad_accum_steps):
            group = micro_slices[start : start + config.grad_accum_steps]
            group_size = int(sum(len(s) for s in group))
            lr = cosine_lr(step, total_steps, config.base_lr)
            group_loss = 0.0
            for micro in group:
                batch = [examples[int(i)] for i in micro]
                inputs, targets, weights = _pack_microbatch(
                    batch, group_size, config.loss_masking
                )
                with Tape() as tape:
                    loss = _microbatch_loss(params, inputs, targets, weights)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NonFiniteLoss(
                        f"non-finite loss at optimizer step {step} (epoch {epoch}, lr {lr:.3e})"
                    )
                group_loss += value
                tape.backward(loss)
            adam.step(lr)
            log.append(LogRow(step=step, epoch=epoch, lr=lr, loss=group_loss))
            step += 1
        if on_epoch_end is not None:
            on_epoch_end(epoch, params)
    return TrainResult(params=params, log=log)


def save_log_csv(log: list[LogRow], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["step", "epoch", "lr", "loss"])
        for row in log:
            writer.writerow([row.step, row.epoch, f"{row.lr:.10g}", f"{row.loss:.10g}"])


def load_log_csv(path) -> list[LogRow]:
    rows: list[LogRow] = []
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        for rec in reader:
            rows.append(
                LogRow(
                    step=int(rec["step"]),
                    epoch=int(rec["epoch"]),
                    lr=float(rec["lr"]),
                    loss=float(rec["loss"]),
                )
            )
    return rows
