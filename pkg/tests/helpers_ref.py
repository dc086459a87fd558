"""Independent float64 reference implementations used as test oracles.

Everything here is written directly against numpy in float64, mirroring the
documented math of the package but sharing no code with it, so agreement is
evidence rather than tautology. Finite differences are taken through these
references; the engine's analytic float32 gradients are compared against
them.
"""

from __future__ import annotations

import math

import numpy as np

EPS_FD = 1e-3
LN_EPS = 1e-5
GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715
MASK_FILL = -1e9


# ---------------------------------------------------------------------------
# reference ops (float64)


def ref_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def ref_layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + LN_EPS) * gain + bias


def ref_gelu(x: np.ndarray) -> np.ndarray:
    u = GELU_C * (x + GELU_K * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(u))


def ref_causal_mask_fill(scores: np.ndarray) -> np.ndarray:
    t = scores.shape[-1]
    allowed = np.tril(np.ones((t, t), dtype=bool))
    return np.where(allowed, scores, MASK_FILL)


def ref_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - m).sum(axis=1)) + m[:, 0]
    rows = np.arange(logits.shape[0])
    return lse - logits[rows, targets]


# ---------------------------------------------------------------------------
# finite differences


def central_diff(f, arrays: list[np.ndarray], which: int, eps: float = EPS_FD) -> np.ndarray:
    """d f(arrays) / d arrays[which], elementwise central differences.

    ``f`` maps the float64 arrays to a python float; arrays are copied.
    """
    base = [a.astype(np.float64).copy() for a in arrays]
    target = base[which]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(base)
        flat[i] = orig - eps
        lo = f(base)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def rel_err(got: np.ndarray, want: np.ndarray) -> float:
    """Infinity-norm relative error with a small absolute floor."""
    denom = float(np.abs(want).max()) + 1e-8
    return float(np.abs(got.astype(np.float64) - want).max()) / denom


# ---------------------------------------------------------------------------
# reference transformer forward (float64), mirroring the documented model


def ref_adapted_linear(x, w, adapter, scale):
    y = x @ w
    if adapter is not None:
        down, up = adapter
        y = y + (x @ down) @ up * scale
    return y


def ref_forward(config, base: dict, adapters: dict, ids: np.ndarray) -> np.ndarray:
    """Float64 logits for (B, T) ids given raw weight arrays.

    ``base`` maps weight names to arrays; ``adapters`` maps adapted weight
    names to (down, up) array pairs and may be empty.
    """
    ids = np.asarray(ids)
    b, t = ids.shape
    scale = config.lora_alpha / config.lora_rank
    nh, hd = config.n_heads, config.d_model // config.n_heads

    def lin(x, name):
        return ref_adapted_linear(x, base[name], adapters.get(name), scale)

    x = base["emb.tok"][ids]
    if "emb.tok" in adapters:
        down, up = adapters["emb.tok"]
        x = x + down[ids] @ up * scale
    x = x + base["emb.pos"][:t]
    for i in range(config.n_layers):
        p = f"layer{i}"
        h = ref_layer_norm(x, base[f"{p}.ln1.gain"], base[f"{p}.ln1.bias"])
        q = lin(h, f"{p}.attn.q").reshape(b, t, nh, hd).transpose(0, 2, 1, 3)
        k = lin(h, f"{p}.attn.k").reshape(b, t, nh, hd).transpose(0, 2, 1, 3)
        v = lin(h, f"{p}.attn.v").reshape(b, t, nh, hd).transpose(0, 2, 1, 3)
        scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(hd)
        attn = ref_softmax(ref_causal_mask_fill(scores), axis=-1)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, config.d_model)
        x = x + lin(ctx, f"{p}.attn.out")
        h = ref_layer_norm(x, base[f"{p}.ln2.gain"], base[f"{p}.ln2.bias"])
        x = x + lin(ref_gelu(lin(h, f"{p}.mlp.fc1")), f"{p}.mlp.fc2")
    x = ref_layer_norm(x, base["ln_f.gain"], base["ln_f.bias"])
    return lin(x, "unemb")


def ref_masked_loss(config, base, adapters, inputs, targets, weights) -> float:
    """Weighted sum of per-position cross entropies, float64 end to end."""
    logits = ref_forward(config, base, adapters, inputs)
    flat = logits.reshape(-1, config.vocab_size)
    losses = ref_cross_entropy(flat, targets.reshape(-1))
    return float((losses * weights.reshape(-1)).sum())


# ---------------------------------------------------------------------------
# brute-force metrics


def brute_pair_scores(true_items, pred_items):
    """(fn, fp, matched squared relative errors) by direct loops.

    ``true_items`` / ``pred_items`` are lists of (herb, grams); ``pred_items``
    may be None.
    """
    if pred_items is None:
        return len(true_items), 0, []
    tp_errors = []
    tp = 0
    for herb, grams in true_items:
        for pherb, pgrams in pred_items:
            if pherb == herb:
                tp += 1
                tp_errors.append(((pgrams - grams) / grams) ** 2)
                break
    fn = len(true_items) - tp
    fp = len(pred_items) - tp
    return fn, fp, tp_errors


def brute_corpus_eval(pairs, herb_means, global_mean):
    """Corpus P/R/F1/NMSE/NMSE_base with no shared code with the package."""
    tp = fp = fn = 0
    errors = []
    base_errors = []
    for true_items, pred_items in pairs:
        pair_fn, pair_fp, tp_errors = brute_pair_scores(true_items, pred_items)
        fn += pair_fn
        fp += pair_fp
        tp += len(tp_errors)
        errors.extend(tp_errors)
        if pred_items is not None:
            pred_herbs = {h for h, _ in pred_items}
            for herb, grams in true_items:
                if herb in pred_herbs:
                    mean = herb_means.get(herb, global_mean)
                    base_errors.append(((mean - grams) / grams) ** 2)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    nmse = sum(errors) / tp if tp else None
    nmse_base = sum(base_errors) / tp if tp else None
    return precision, recall, f1, nmse, nmse_base


def brute_nucleus_survivors(logits, top_k, top_p, temperature):
    """Minimal-prefix nucleus set by explicit search over prefix lengths."""
    probs = ref_softmax(np.asarray(logits, dtype=np.float64) / temperature)
    ranked = sorted(range(len(probs)), key=lambda i: (-probs[i], i))
    head = ranked[: min(top_k, len(ranked))]
    for length in range(1, len(head) + 1):
        if sum(probs[i] for i in head[:length]) >= top_p:
            return set(head[:length])
    return set(head)
