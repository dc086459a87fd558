"""Herbal prescription generation toolkit.

A small, self-contained pipeline: clinical-record domain types, synthetic
corpus generation with permutation augmentation, a corpus-derived tokenizer,
a reverse-mode autodiff engine on numpy, a decoder-only transformer with
low-rank adapters, a trainer, a sampler, and set-overlap / dosage-error
evaluation, all exposed through one CLI.
"""

__version__ = "0.1.0"
