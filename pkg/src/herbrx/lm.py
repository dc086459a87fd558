"""Decoder-only transformer LM with low-rank adapters on every linear map.

Architecture: learned token + positional embeddings, pre-norm blocks (masked
multi-head self-attention, then a GELU MLP), a final layer norm, and a linear
unembedding. Weights are stored input-major, so a linear map is ``y = x @ w``
with ``w`` of shape (in, out) and no bias.

Adaptation: every linear weight ``w`` gets a pair ``down`` (in, rank) and
``up`` (rank, out); the adapted map is ``x @ w + (alpha/rank) * (x @ down) @ up``.
The token embedding gets the lookup analogue: a (vocab, rank) table of
per-token codes and an (rank, d_model) ``up``. ``up`` starts at zero so the
adapted model initially matches the base exactly; ``down`` starts Gaussian
(std 0.02). Base weights stay frozen; only adapter tensors require gradients.
The positional embedding is not adapted.

Merging folds each adapter into its base weight, producing an adapter-free
model with identical outputs.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ModelError(ValueError):
    """Base class for model construction and checkpoint errors."""


class SequenceTooLong(ModelError):
    """Input length exceeds the positional table."""


class CheckpointError(ModelError):
    """A checkpoint file is malformed or inconsistent with expectations."""


@dataclass(frozen=True)
class ModelConfig:
    """Shapes of the model. Defaults are the desk-scale configuration."""

    vocab_size: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 512
    lora_rank: int = 4
    lora_alpha: float = 32.0

    def __post_init__(self) -> None:
        if self.vocab_size < 5:
            raise ModelError("vocab_size must cover the four reserved ids and more")
        for name in ("d_model", "n_layers", "n_heads", "d_ff", "max_seq_len", "lora_rank"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ModelError("d_model must be divisible by n_heads")
        if self.lora_alpha <= 0:
            raise ModelError("lora_alpha must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def adapter_scale(self) -> float:
        return self.lora_alpha / self.lora_rank


@dataclass
class Adapter:
    """Low-rank correction: ``(alpha/rank) * (x @ down) @ up``."""

    down: Tensor
    up: Tensor


@dataclass
class ModelParams:
    """Frozen base weights plus (possibly empty) trainable adapters."""

    config: ModelConfig
    base: dict[str, Tensor]
    adapters: dict[str, Adapter]


def _base_layout(config: ModelConfig) -> list[tuple[str, tuple[int, int]]]:
    d, v = config.d_model, config.vocab_size
    layout: list[tuple[str, tuple[int, int]]] = [
        ("emb.tok", (v, d)),
        ("emb.pos", (config.max_seq_len, d)),
    ]
    for i in range(config.n_layers):
        p = f"layer{i}"
        layout += [
            (f"{p}.ln1.gain", (d,)),
            (f"{p}.ln1.bias", (d,)),
            (f"{p}.attn.q", (d, d)),
            (f"{p}.attn.k", (d, d)),
            (f"{p}.attn.v", (d, d)),
            (f"{p}.attn.out", (d, d)),
            (f"{p}.ln2.gain", (d,)),
            (f"{p}.ln2.bias", (d,)),
            (f"{p}.mlp.fc1", (d, config.d_ff)),
            (f"{p}.mlp.fc2", (config.d_ff, d)),
        ]
    layout += [
        ("ln_f.gain", (d,)),
        ("ln_f.bias", (d,)),
        ("unemb", (d, v)),
    ]
    return layout


# Names of base weights that receive adapters: every linear plus the token
# embedding. Layer norms and the positional table stay bare.
def adapted_weight_names(config: ModelConfig) -> tuple[str, ...]:
    names = ["emb.tok"]
    for i in range(config.n_layers):
        p = f"layer{i}"
        names += [
            f"{p}.attn.q",
            f"{p}.attn.k",
            f"{p}.attn.v",
            f"{p}.attn.out",
            f"{p}.mlp.fc1",
            f"{p}.mlp.fc2",
        ]
    names.append("unemb")
    return tuple(names)


_INIT_STD = 0.02


def init_model(config: ModelConfig, seed: int) -> ModelParams:
    """Deterministic initialization from one seeded stream.

    Base weights draw Gaussian(0, 0.02) except layer norm (gain 1, bias 0),
    in layout order. Adapters then draw ``down`` Gaussian(0, 0.02) and zero
    ``up`` in adapted-name order, so the adapted model equals the base model
    at initialization.
    """
    rng = np.random.default_rng(seed)
    base: dict[str, Tensor] = {}
    for name, shape in _base_layout(config):
        if name.endswith(".gain"):
            data = np.ones(shape, dtype=np.float32)
        elif name.endswith(".bias"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            data = rng.normal(0.0, _INIT_STD, size=shape).astype(np.float32)
        base[name] = Tensor(data, requires_grad=False)
    adapters: dict[str, Adapter] = {}
    r = config.lora_rank
    for name in adapted_weight_names(config):
        # For the token embedding the down map doubles as a lookup table of
        # per-token rank-r codes; the shapes work out the same as a linear.
        n_in, n_out = base[name].shape
        down_shape, up_shape = (n_in, r), (r, n_out)
        down = rng.normal(0.0, _INIT_STD, size=down_shape).astype(np.float32)
        adapters[name] = Adapter(
            down=Tensor(down, requires_grad=True),
            up=Tensor(np.zeros(up_shape, dtype=np.float32), requires_grad=True),
        )
    return ModelParams(config=config, base=base, adapters=adapters)


def trainable_tensors(params: ModelParams) -> dict[str, Tensor]:
    """Flat, deterministically ordered view of the adapter tensors."""
    out: dict[str, Tensor] = {}
    for name in sorted(params.adapters):
        out[f"{name}.down"] = params.adapters[name].down
        out[f"{name}.up"] = params.adapters[name].up
    return out


def count_params(params: ModelParams) -> tuple[int, int]:
    """(base parameter count, adapter parameter count)."""
    n_base = sum(t.size for t in params.base.values())
    n_adapter = sum(a.down.size + a.up.size for a in params.adapters.values())
    return n_base, n_adapter


def _adapted_linear(params: ModelParams, x: Tensor, name: str) -> Tensor:
    y = ad.matmul(x, params.base[name])
    adapter = params.adapters.get(name)
    if adapter is not None:
        corr = ad.matmul(ad.matmul(x, adapter.down), adapter.up)
        y = ad.add(y, ad.scale(corr, params.config.adapter_scale))
    return y


def _embed(params: ModelParams, ids: np.ndarray) -> Tensor:
    x = ad.row_lookup(params.base["emb.tok"], ids)
    adapter = params.adapters.get("emb.tok")
    if adapter is not None:
        codes = ad.row_lookup(adapter.down, ids)
        corr = ad.matmul(codes, adapter.up)
        x = ad.add(x, ad.scale(corr, params.config.adapter_scale))
    pos = ad.row_lookup(params.base["emb.pos"], np.arange(ids.shape[-1]))
    return ad.add(x, pos)


def forward_batch(params: ModelParams, ids) -> Tensor:
    """Logits (B, T, vocab) for a batch of equal-length id rows (B, T)."""
    cfg = params.config
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ModelError(f"expected (batch, time) ids, got shape {ids.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise ModelError(f"ids must be integers, got dtype {ids.dtype}")
    b, t = ids.shape
    if t > cfg.max_seq_len:
        raise SequenceTooLong(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
    if t == 0:
        raise ModelError("cannot run an empty sequence")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ModelError(f"token id out of range for vocab of {cfg.vocab_size}")

    nh, hd = cfg.n_heads, cfg.head_dim
    x = _embed(params, ids)
    for i in range(cfg.n_layers):
        p = f"layer{i}"
        h = ad.layer_norm(x, params.base[f"{p}.ln1.gain"], params.base[f"{p}.ln1.bias"])
        q = ad.transpose(ad.reshape(_adapted_linear(params, h, f"{p}.attn.q"), (b, t, nh, hd)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(_adapted_linear(params, h, f"{p}.attn.k"), (b, t, nh, hd)), (0, 2, 1, 3))
        v = ad.transpose(ad.reshape(_adapted_linear(params, h, f"{p}.attn.v"), (b, t, nh, hd)), (0, 2, 1, 3))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        attn = ad.softmax(ad.causal_mask_fill(scores), axis=-1)
        ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (b, t, cfg.d_model))
        x = ad.add(x, _adapted_linear(params, ctx, f"{p}.attn.out"))
        h = ad.layer_norm(x, params.base[f"{p}.ln2.gain"], params.base[f"{p}.ln2.bias"])
        m = _adapted_linear(params, ad.gelu(_adapted_linear(params, h, f"{p}.mlp.fc1")), f"{p}.mlp.fc2")
        x = ad.add(x, m)
    x = ad.layer_norm(x, params.base["ln_f.gain"], params.base["ln_f.bias"])
    return _adapted_linear(params, x, "unemb")


def forward_adapted(params: ModelParams, token_ids) -> Tensor:
    """Logits (T, vocab) for one id sequence."""
    ids = np.asarray(token_ids, dtype=np.int64).reshape(1, -1)
    logits = forward_batch(params, ids)
    return ad.reshape(logits, (ids.shape[1], params.config.vocab_size))


def merge_adapters(params: ModelParams) -> ModelParams:
    """Fold adapters into base weights; result has none and identical outputs."""
    merged: dict[str, Tensor] = {}
    scale = params.config.adapter_scale
    for name, tensor in params.base.items():
        adapter = params.adapters.get(name)
        if adapter is None:
            merged[name] = Tensor(tensor.data.copy())
        else:
            delta = (adapter.down.data @ adapter.up.data) * np.float32(scale)
            merged[name] = Tensor(tensor.data + delta)
    return ModelParams(config=params.config, base=merged, adapters={})


def fresh_adapters(params: ModelParams, seed: int) -> ModelParams:
    """Attach newly initialized adapters to an adapter-free model."""
    template = init_model(params.config, seed)
    return ModelParams(
        config=params.config,
        base=params.base,
        adapters=template.adapters,
    )


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, config JSON, then named float32 tensors.
# Tensor names carry a "base/" or "adapter/" prefix; adapter tensors use
# "<weight name>.down" / "<weight name>.up". Groups can be saved separately,
# so adapters can ship without the base.

_MAGIC = b"HRXMODL1"
_VERSION = 1


def _write_tensor(handle, name: str, data: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    handle.write(struct.pack("<H", len(encoded)))
    handle.write(encoded)
    handle.write(struct.pack("<B", data.ndim))
    handle.write(struct.pack(f"<{data.ndim}I", *data.shape))
    raw = np.ascontiguousarray(data, dtype="<f4").tobytes()
    handle.write(struct.pack("<Q", len(raw)))
    handle.write(raw)


def _read_exact(handle, n: int) -> bytes:
    buf = handle.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint file")
    return buf


def _read_tensor(handle) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(handle, 2))
    name = _read_exact(handle, name_len).decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(handle, 1))
    shape = struct.unpack(f"<{ndim}I", _read_exact(handle, 4 * ndim))
    (nbytes,) = struct.unpack("<Q", _read_exact(handle, 8))
    expected = int(np.prod(shape, dtype=np.int64)) * 4 if ndim else 4
    if nbytes != expected:
        raise CheckpointError(f"tensor {name!r} byte length does not match shape")
    data = np.frombuffer(_read_exact(handle, nbytes), dtype="<f4").reshape(shape)
    return name, data.astype(np.float32)


def save_checkpoint(
    path,
    params: ModelParams,
    include_base: bool = True,
    include_adapters: bool = True,
) -> None:
    """Write config and the selected weight groups to a binary file."""
    tensors: list[tuple[str, np.ndarray]] = []
    if include_base:
        tensors += [(f"base/{n}", t.data) for n, t in params.base.items()]
    if include_adapters:
        for name in sorted(params.adapters):
            adapter = params.adapters[name]
            tensors.append((f"adapter/{name}.down", adapter.down.data))
            tensors.append((f"adapter/{name}.up", adapter.up.data))
    config_json = json.dumps(asdict(params.config), sort_keys=True).encode("utf-8")
    buffer = io.BytesIO()
    buffer.write(_MAGIC)
    buffer.write(struct.pack("<I", _VERSION))
    buffer.write(struct.pack("<I", len(config_json)))
    buffer.write(config_json)
    buffer.write(struct.pack("<I", len(tensors)))
    for name, data in tensors:
        _write_tensor(buffer, name, data)
    with open(path, "wb") as handle:
        handle.write(buffer.getvalue())


def read_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    """Read config and raw named tensors (with group prefixes)."""
    with open(path, "rb") as handle:
        if _read_exact(handle, len(_MAGIC)) != _MAGIC:
            raise CheckpointError(f"not a model checkpoint: {path}")
        (version,) = struct.unpack("<I", _read_exact(handle, 4))
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(handle, 4))
        try:
            cfg_obj = json.loads(_read_exact(handle, cfg_len).decode("utf-8"))
            config = ModelConfig(**cfg_obj)
        except (ValueError, TypeError) as exc:
            raise CheckpointError(f"bad config block: {exc}") from exc
        (n_tensors,) = struct.unpack("<I", _read_exact(handle, 4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            name, data = _read_tensor(handle)
            tensors[name] = data
    return config, tensors


def load_model(path) -> ModelParams:
    """Reconstruct a model from a checkpoint containing base weights.

    Adapter tensors present in the file are attached; a checkpoint holding
    only adapters cannot stand alone and raises.
    """
    config, tensors = read_checkpoint(path)
    expected = dict(_base_layout(config))
    base: dict[str, Tensor] = {}
    for name, shape in expected.items():
        key = f"base/{name}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint is missing base weight {name!r}")
        if tensors[key].shape != shape:
            raise CheckpointError(
                f"base weight {name!r} has shape {tensors[key].shape}, expected {shape}"
            )
        base[name] = Tensor(tensors[key], requires_grad=False)
    adapters = _adapters_from_tensors(config, tensors)
    return ModelParams(config=config, base=base, adapters=adapters)


def _adapters_from_tensors(
    config: ModelConfig, tensors: dict[str, np.ndarray]
) -> dict[str, Adapter]:
    adapters: dict[str, Adapter] = {}
    names = {
        key[len("adapter/"):].rsplit(".", 1)[0]
        for key in tensors
        if key.startswith("adapter/")
    }
    for name in sorted(names):
        if name not in adapted_weight_names(config):
            raise CheckpointError(f"adapter for unknown weight {name!r}")
        down_key, up_key = f"adapter/{name}.down", f"adapter/{name}.up"
        if down_key not in tensors or up_key not in tensors:
            raise CheckpointError(f"adapter {name!r} is missing a half")
        adapters[name] = Adapter(
            down=Tensor(tensors[down_key], requires_grad=True),
            up=Tensor(tensors[up_key], requires_grad=True),
        )
    return adapters


def load_adapters_into(params: ModelParams, path) -> ModelParams:
    """Attach adapters from a checkpoint to an existing base model."""
    config, tensors = read_checkpoint(path)
    if config != params.config:
        raise CheckpointError("adapter checkpoint config does not match the model")
    adapters = _adapters_from_tensors(config, tensors)
    if not adapters:
        raise CheckpointError(f"no adapter tensors in {path}")
    return ModelParams(config=params.config, base=params.base, adapters=adapters)
