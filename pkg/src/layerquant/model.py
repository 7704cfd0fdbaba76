"""A small pre-norm decoder-only transformer in numpy.

Block i computes::

    x = x + Attn(LN(x; norm1))          causal multi-head, no biases
    x = x + W_out GELU(W_in LN(x; norm2))

with learned absolute position embeddings, bias-free gain-only LayerNorm
and tanh-approximated GELU.  Matrices multiply on the right (``x @ W``), so
``W`` is ``[fan_in, fan_out]``.  A "layer" everywhere in this package is one
whole block; embeddings, final norm and the LM head are never quantized or
pruned.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from . import quant
from .errors import ConfigError, InvalidInput, PlanMismatch
from .tensor import NamedTensorMap, Rng, load_container, save_container

BLOCK_MATRICES = ("attn_q", "attn_k", "attn_v", "attn_o", "mlp_in", "mlp_out")
BLOCK_NORMS = ("norm1", "norm2")
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 12
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 256
    max_seq_len: int = 256
    norm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not self.norm_eps > 0:
            raise ConfigError("norm_eps must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "ModelConfig":
        return cls(**json.loads(s))

    def shapes(self) -> dict[str, tuple[int, ...]]:
        d, f = self.d_model, self.d_ff
        block = {"attn_q": (d, d), "attn_k": (d, d), "attn_v": (d, d), "attn_o": (d, d),
                 "mlp_in": (d, f), "mlp_out": (f, d), "norm1": (d,), "norm2": (d,)}
        out = {"embed": (self.vocab_size, d), "pos_embed": (self.max_seq_len, d),
               "head": (d, self.vocab_size), "final_norm": (d,)}
        for i in range(self.n_layers):
            out.update({f"blocks.{i}.{k}": v for k, v in block.items()})
        return out

    def n_params(self) -> int:
        d, f, v = self.d_model, self.d_ff, self.vocab_size
        return self.n_layers * (4 * d * d + 2 * d * f + 2 * d) + 2 * v * d + self.max_seq_len * d + d


@dataclass(frozen=True)
class BlockTrace:
    layer_index: int
    input_states: np.ndarray  # [tokens, d_model]
    output_states: np.ndarray


@dataclass(frozen=True)
class TransformerModel:
    config: ModelConfig
    weights: NamedTensorMap

    def __post_init__(self):
        expected = self.config.shapes()
        missing = sorted(set(expected) - set(self.weights.tensors))
        if missing:
            raise ConfigError(f"missing weights: {missing[:4]}{'...' if len(missing) > 4 else ''}")
        for name, shape in expected.items():
            if self.weights[name].shape != shape:
                raise ConfigError(f"{name} has shape {self.weights[name].shape}, expected {shape}")

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    def w(self, name: str) -> np.ndarray:
        return self.weights[name].astype(np.float32, copy=False)

    def block_matrix_names(self, i: int) -> list[str]:
        return [f"blocks.{i}.{k}" for k in BLOCK_MATRICES]

    def block_matrices(self, i: int) -> list[np.ndarray]:
        return [self.weights[n] for n in self.block_matrix_names(i)]

    def with_weights(self, updates: dict[str, np.ndarray]) -> "TransformerModel":
        tensors = dict(self.weights.tensors)
        tensors.update(updates)
        return TransformerModel(self.config, NamedTensorMap(tensors, self.weights.metadata))


def init_model(config: ModelConfig, seed: int) -> TransformerModel:
    """Normal(0, 1/fan_in) matrices and unit norm gains, drawn in name order from one stream."""
    rng = Rng(seed)
    tensors = {}
    for name, shape in sorted(config.shapes().items()):
        if len(shape) == 1:
            tensors[name] = np.ones(shape, dtype=np.float32)
        else:
            z = rng.normal(math.prod(shape)).reshape(shape)
            tensors[name] = (z / math.sqrt(shape[0])).astype(np.float32)
    return TransformerModel(config, NamedTensorMap(tensors, {"model_config": config.to_json()}))


# -- forward -----------------------------------------------------------------


def _layer_norm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    xc = x - x.mean(axis=-1, keepdims=True)
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    var += np.float32(eps)
    xc /= np.sqrt(var)
    xc *= gain
    return xc


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    u = x * x
    u *= np.float32(0.044715 * _GELU_C)
    u += np.float32(_GELU_C)
    u *= x
    np.tanh(u, out=u)
    u += np.float32(1.0)
    u *= x
    u *= np.float32(0.5)
    return u


_MASKS: dict[int, np.ndarray] = {}


def _causal_bias(t: int) -> np.ndarray:
    if t not in _MASKS:
        _MASKS[t] = np.where(np.tri(t, dtype=bool), np.float32(0.0), np.float32(-np.inf))
    return _MASKS[t]


def attention_probs(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Causal softmax over ``q k^T / sqrt(d_head)``; q, k are [B, H, T, dh]."""
    kt = np.ascontiguousarray(np.swapaxes(k, -1, -2))
    s = (q * np.float32(1.0 / math.sqrt(q.shape[-1]))) @ kt
    s += _causal_bias(q.shape[-2])
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s


def block_forward(cfg: ModelConfig, get, x: np.ndarray) -> np.ndarray:
    """One decoder block on x [B, T, d]; ``get(suffix)`` returns the block's float32 tensors."""
    b, t, d = x.shape
    h, dh = cfg.n_heads, d // cfg.n_heads
    a = _layer_norm(x, get("norm1"), cfg.norm_eps)
    wqkv = np.concatenate([get("attn_q"), get("attn_k"), get("attn_v")], axis=1)
    qkv = (a @ wqkv).reshape(b, t, 3, h, dh).transpose(2, 0, 3, 1, 4)
    o = (attention_probs(qkv[0], qkv[1]) @ qkv[2]).transpose(0, 2, 1, 3).reshape(b, t, d)
    x = x + o @ get("attn_o")
    m = _layer_norm(x, get("norm2"), cfg.norm_eps)
    x += gelu(m @ get("mlp_in")) @ get("mlp_out")
    return x


def _block(model: TransformerModel, i: int, x: np.ndarray) -> np.ndarray:
    return block_forward(model.config, lambda suffix: model.w(f"blocks.{i}.{suffix}"), x)


def embed(model: TransformerModel, tokens: np.ndarray) -> np.ndarray:
    return model.w("embed")[tokens] + model.w("pos_embed")[: tokens.shape[1]]


def head_logits(model: TransformerModel, x: np.ndarray) -> np.ndarray:
    return _layer_norm(x, model.w("final_norm"), model.config.norm_eps) @ model.w("head")


def _check_tokens(model: TransformerModel, tokens: np.ndarray) -> None:
    if tokens.shape[-1] == 0:
        raise InvalidInput("empty token sequence")
    if tokens.shape[-1] > model.config.max_seq_len:
        raise InvalidInput(f"sequence length {tokens.shape[-1]} exceeds max_seq_len {model.config.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= model.config.vocab_size:
        raise InvalidInput(f"token out of range [0, {model.config.vocab_size})")


def forward_batch(model: TransformerModel, tokens: np.ndarray, capture: bool = False, skip: Sequence[int] = ()):
    """Run equal-length sequences ``tokens[B, T]``; returns logits [B, T, V] and optional traces.

    ``skip`` lists blocks replaced by the identity (used to cross-check pruning).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    _check_tokens(model, tokens)
    x = embed(model, tokens)
    traces = [] if capture else None
    for i in range(model.n_layers):
        y = x if i in skip else _block(model, i, x)
        if capture:
            traces.append((x, y))
        x = y
    return head_logits(model, x), traces


def forward(model: TransformerModel, tokens: Sequence[int], capture: bool = False):
    """Logits ``[len(tokens), vocab]`` and, with ``capture``, one BlockTrace per block."""
    logits, raw = forward_batch(model, np.asarray(tokens, dtype=np.int64)[None, :], capture)
    traces = None
    if capture:
        traces = [BlockTrace(i, a[0], b[0]) for i, (a, b) in enumerate(raw)]
    return logits[0], traces


def token_batches(sequences: Sequence[Sequence[int]], batch_size: int = 8) -> list[tuple[int, np.ndarray]]:
    """Runs of consecutive equal-length sequences (length >= 2) as (first index, [B, T] array)."""
    out = []
    i = 0
    while i < len(sequences):
        n = len(sequences[i])
        j = i
        while j < len(sequences) and j - i < batch_size and len(sequences[j]) == n:
            j += 1
        if n >= 2:
            out.append((i, np.asarray(sequences[i:j], dtype=np.int64)))
        i = j
    return out


def batch_nll(model: TransformerModel, x: np.ndarray, toks: np.ndarray) -> np.ndarray:
    """Per-sequence summed NLL given final residual states x for inputs ``toks[:, :-1]``."""
    z = head_logits(model, x).astype(np.float64)
    zmax = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=-1)) + zmax[..., 0]
    target = np.take_along_axis(z, toks[:, 1:, None], axis=-1)[..., 0]
    return (lse - target).sum(axis=1)


def pooled_perplexity(sequences: Sequence[Sequence[int]], per_batch_nll: Sequence[np.ndarray]) -> float:
    """exp(total NLL / positions), summing per-sequence values in corpus order."""
    n_pos = sum(max(len(s) - 1, 0) for s in sequences)
    if n_pos == 0:
        raise InvalidInput("corpus has no next-token positions")
    total = 0.0
    for arr in per_batch_nll:
        for v in arr:
            total += float(v)
    return math.exp(total / n_pos)


def sequence_nll(model: TransformerModel, sequences: Sequence[Sequence[int]], batch_size: int = 8) -> list[float]:
    """Summed next-token negative log-likelihood (nats) of each sequence, in input order."""
    out = [0.0] * len(sequences)
    for i, toks in token_batches(sequences, batch_size):
        _check_tokens(model, toks[:, :-1])
        _check_tokens(model, toks[:, 1:])
        x = embed(model, toks[:, :-1])
        for layer in range(model.n_layers):
            x = _block(model, layer, x)
        for k, v in enumerate(batch_nll(model, x, toks)):
            out[i + k] = float(v)
    return out


def perplexity(model: TransformerModel, corpus_tokens: Sequence[Sequence[int]]) -> float:
    """exp of the mean next-token NLL, positions pooled over all sequences."""
    if not corpus_tokens:
        raise InvalidInput("empty corpus")
    for s in corpus_tokens:
        if len(s) > model.config.max_seq_len + 1:
            raise InvalidInput(f"sequence of length {len(s)} is longer than max_seq_len + 1")
    return pooled_perplexity(corpus_tokens, [np.asarray(sequence_nll(model, corpus_tokens))])


# -- quantization and pruning ------------------------------------------------


def quantize_block(model: TransformerModel, i: int, bits: int, group_size: int = quant.DEFAULT_GROUP_SIZE,
                   outlier_fraction: float = 0.0, kernel: str = "rtn") -> dict[str, quant.QuantizedTensor]:
    fn = quant.get_kernel(kernel)
    return {name: fn(model.weights[name], bits, group_size, outlier_fraction)
            for name in model.block_matrix_names(i)}


def _check_plan(model: TransformerModel, plan) -> None:
    if len(plan.bits_per_layer) != model.n_layers:
        raise PlanMismatch(f"plan covers {len(plan.bits_per_layer)} layers, model has {model.n_layers}")
    bad = [b for b in plan.bits_per_layer if b not in (2, 4, 8, 16)]
    if bad:
        raise PlanMismatch(f"unsupported bit widths in plan: {sorted(set(bad))}")


def _outlier_fraction(plan, i: int) -> float:
    fr = getattr(plan, "outlier_fraction_per_layer", None)
    return float(fr[i]) if fr else 0.0


def apply_fake_quant(model: TransformerModel, plan, kernel: str | None = None) -> TransformerModel:
    """Replace each block's matrices by dequantize(quantize(w, bits_i)); 16 bits passes through."""
    _check_plan(model, plan)
    kernel = kernel or getattr(plan, "kernel", "rtn")
    group_size = getattr(plan, "group_size", quant.DEFAULT_GROUP_SIZE)
    updates = {}
    for i, bits in enumerate(plan.bits_per_layer):
        if bits == 16:
            continue
        for name, q in quantize_block(model, i, bits, group_size, _outlier_fraction(plan, i), kernel).items():
            updates[name] = quant.dequantize(q)
    return model.with_weights(updates)


def prune_layers(model: TransformerModel, remove) -> TransformerModel:
    """Delete the given blocks and renumber the survivors in order."""
    remove = set(int(r) for r in remove)
    if any(not 0 <= r < model.n_layers for r in remove):
        raise InvalidInput(f"prune indices {sorted(remove)} out of range for {model.n_layers} layers")
    if len(remove) == model.n_layers:
        raise InvalidInput("cannot remove every layer")
    if not remove:
        return model
    keep = [i for i in range(model.n_layers) if i not in remove]
    tensors = {k: v for k, v in model.weights.items() if not k.startswith("blocks.")}
    for new, old in enumerate(keep):
        for suffix in BLOCK_MATRICES + BLOCK_NORMS:
            tensors[f"blocks.{new}.{suffix}"] = model.weights[f"blocks.{old}.{suffix}"]
    cfg = replace(model.config, n_layers=len(keep))
    meta = dict(model.weights.metadata, model_config=cfg.to_json())
    return TransformerModel(cfg, NamedTensorMap(tensors, meta))


def apply_plan(model: TransformerModel, plan, kernel: str | None = None) -> TransformerModel:
    """Fake-quantize per the plan, then drop its pruned layers."""
    return prune_layers(apply_fake_quant(model, plan, kernel), getattr(plan, "pruned_layers", ()) or ())


# -- checkpoints -------------------------------------------------------------


def save_model(model: TransformerModel, path) -> None:
    meta = dict(model.weights.metadata, model_config=model.config.to_json())
    save_container(NamedTensorMap(dict(model.weights.tensors), meta), path)


def model_from_map(tmap: NamedTensorMap) -> TransformerModel:
    if "model_config" not in tmap.metadata:
        raise ConfigError("container has no model_config metadata")
    cfg = ModelConfig.from_json(tmap.metadata["model_config"])
    if "quant_plan" in tmap.metadata:
        return _dequantize_map(cfg, tmap)
    return TransformerModel(cfg, tmap)


def load_model(path) -> TransformerModel:
    """Load a plain checkpoint or a quantized one (dequantized into float32)."""
    return model_from_map(load_container(path))


def quantize_to_map(model: TransformerModel, plan, kernel: str | None = None) -> tuple[NamedTensorMap, dict]:
    """Quantized container contents for ``plan`` plus its (idealized, exact) byte accounting.

    Pruned layers are dropped first; 16-bit layers are stored unchanged.
    """
    _check_plan(model, plan)
    kernel = kernel or getattr(plan, "kernel", "rtn")
    group_size = getattr(plan, "group_size", quant.DEFAULT_GROUP_SIZE)
    pruned = set(getattr(plan, "pruned_layers", ()) or ())
    kept = [i for i in range(model.n_layers) if i not in pruned]
    out_model = prune_layers(model, pruned)

    tensors = {k: v for k, v in out_model.weights.items()}
    meta = {"model_config": out_model.config.to_json(), "quant_plan": json.dumps(plan.to_dict(), sort_keys=True)}
    ideal = 0.0
    exact = 0
    for new, old in enumerate(kept):
        bits = plan.bits_per_layer[old]
        if bits == 16:
            n = sum(w.size for w in model.block_matrices(old))
            ideal += 2 * n
            exact += 2 * n
            continue
        qs = quantize_block(model, old, bits, group_size, _outlier_fraction(plan, old), kernel)
        for name, q in qs.items():
            new_name = name.replace(f"blocks.{old}.", f"blocks.{new}.", 1)
            del tensors[new_name]
            t, m = quant.to_container_entries(new_name, q)
            tensors.update(t)
            meta.update(m)
            ideal += quant.idealized_bytes(q)
            exact += quant.quantized_bytes(q)
    return NamedTensorMap(tensors, meta), {"idealized_bytes": ideal, "exact_bytes": exact}


def _dequantize_map(cfg: ModelConfig, tmap: NamedTensorMap) -> TransformerModel:
    tensors = {}
    for name, arr in tmap.items():
        base, _, suffix = name.rpartition(".")
        if suffix in ("qweight", "scales", "shifts", "outlier_idx", "outlier_val") and f"{base}.scheme" in tmap.metadata:
            if suffix == "qweight":
                tensors[base] = quant.dequantize(quant.from_container_entries(base, tmap.tensors, tmap.metadata))
        else:
            tensors[name] = arr
    meta = {"model_config": cfg.to_json()}
    return TransformerModel(cfg, NamedTensorMap(tensors, meta))
