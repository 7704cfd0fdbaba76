"""Minimal next-token trainer for the toy checkpoint (needs torch).

The torch module mirrors ``model.forward_batch`` exactly (same parameter
names, shapes and ops), starts from ``init_model(config, seed)`` and samples
windows with the in-repo RNG, so a run is a function of its arguments up to
torch's own CPU kernel determinism.
"""
from __future__ import annotations

import logging
import math
import time
from pathlib import Path

import numpy as np

from .model import ModelConfig, TransformerModel, init_model
from .tensor import NamedTensorMap, Rng

log = logging.getLogger(__name__)


def _torch_forward(torch, params: dict, cfg: ModelConfig, tokens):
    F = torch.nn.functional
    b, t = tokens.shape
    h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    mask = torch.ones(t, t, dtype=torch.bool).tril()

    def ln(x, g):
        return F.layer_norm(x, (cfg.d_model,), g, None, cfg.norm_eps)

    x = params["embed"][tokens] + params["pos_embed"][:t]
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        a = ln(x, params[p + "norm1"])
        q, k, v = ((a @ params[p + m]).view(b, t, h, dh).transpose(1, 2) for m in ("attn_q", "attn_k", "attn_v"))
        s = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        s = s.masked_fill(~mask, float("-inf"))
        o = (s.softmax(-1) @ v).transpose(1, 2).reshape(b, t, cfg.d_model)
        x = x + o @ params[p + "attn_o"]
        m = ln(x, params[p + "norm2"])
        x = x + F.gelu(m @ params[p + "mlp_in"], approximate="tanh") @ params[p + "mlp_out"]
    return ln(x, params["final_norm"]) @ params["head"]


def load_training_tokens(corpus_dir) -> np.ndarray:
    paths = sorted(Path(corpus_dir).glob("*.txt"))
    if not paths:
        raise FileNotFoundError(f"no .txt files in {corpus_dir}")
    return np.frombuffer(b"".join(p.read_bytes() for p in paths), dtype=np.uint8).astype(np.int64)


def train_toy(corpus_dir, config: ModelConfig = ModelConfig(), steps: int = 1500, batch_size: int = 16,
              seq_len: int = 128, lr: float = 3e-3, seed: int = 0, log_every: int = 100) -> TransformerModel:
    import torch

    torch.manual_seed(seed)
    torch.set_num_threads(1)
    data = torch.from_numpy(load_training_tokens(corpus_dir))
    if data.numel() <= seq_len + 1:
        raise ValueError("training corpus is shorter than one window")

    init = init_model(config, seed)
    params = {k: torch.tensor(v, requires_grad=True) for k, v in init.weights.items()}
    decay = [p for k, p in params.items() if p.ndim == 2 and k.startswith("blocks.")]
    other = [p for k, p in params.items() if not (p.ndim == 2 and k.startswith("blocks."))]
    opt = torch.optim.AdamW([{"params": decay, "weight_decay": 0.01}, {"params": other, "weight_decay": 0.0}],
                            lr=lr, betas=(0.9, 0.95))
    warmup = max(1, steps // 20)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: min(1.0, (s + 1) / warmup) * 0.5 * (1 + math.cos(math.pi * min(s, steps) / steps)))

    rng = Rng(seed ^ 0x5EED)
    offsets = torch.arange(seq_len + 1)
    t0 = time.perf_counter()
    for step in range(steps):
        starts = torch.from_numpy((rng.uniform(batch_size) * (data.numel() - seq_len - 1)).astype(np.int64))
        batch = data[starts[:, None] + offsets]
        logits = _torch_forward(torch, params, config, batch[:, :-1])
        loss = torch.nn.functional.cross_entropy(logits.reshape(-1, config.vocab_size), batch[:, 1:].reshape(-1))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(list(params.values()), 1.0)
        opt.step()
        sched.step()
        if log_every and (step % log_every == 0 or step == steps - 1):
            log.info("step %d/%d loss %.4f (%.0fs)", step, steps, loss.item(), time.perf_counter() - t0)

    tensors = {k: p.detach().numpy().astype(np.float32) for k, p in params.items()}
    meta = {"model_config": config.to_json(), "train": f"steps={steps} batch={batch_size} seq_len={seq_len} lr={lr} seed={seed}"}
    return TransformerModel(config, NamedTensorMap(tensors, meta))

