"""Micro decoder-only language model with LoRA adapters.

Forward pass, for token ids x_0..x_n:

    h_i^0 = e(x_i) + p(i)                                   fixed sinusoidal p
    a_i^l = RMSNorm(h_i^{l-1} + MHSA(H^{l-1})_i)            causal attention
    h_i^l = RMSNorm(a_i^l + FFN(a_i^l))                     post-norm, gated FFN
    z     = W h_n^L + b                                     full-vocabulary logits
    P(y=k | x) = softmax over the seven class-token entries of z

Every attention and feed-forward projection is a :class:`LoraLinear`; after
:func:`lora_wrap` the base weights are frozen and only the low-rank factors
train.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .crashdata import ConfigError
from .labels import N_CLASSES
from .tokenizer import N_CONTROL_IDS

CHECKPOINT_FORMAT = "dha-forge-checkpoint"
CHECKPOINT_VERSION = 1
META_KEY = "dha_forge"

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class SequenceLengthError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    d: int = 128
    n_layers: int = 4
    n_heads: int = 4
    ffn_mult: int = 4
    max_seq_len: int = 256
    rms_epsilon: float = 1e-5
    init_std: float = 0.08  # about 1/sqrt(d); a frozen base needs to mix tokens
    embed_std: float = 1.0
    seed: int = 0
    dtype: str = "float32"

    def validate(self) -> None:
        for name in ("vocab_size", "d", "n_layers", "n_heads", "ffn_mult", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"model.{name} must be a positive integer, got {value!r}")
        if self.d % self.n_heads:
            raise ConfigError(f"model.d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"model.dtype must be one of {sorted(_DTYPES)}")
        if self.vocab_size < N_CONTROL_IDS + N_CLASSES:
            raise ConfigError("vocab_size too small to hold the class tokens")

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]


@dataclass
class LoraConfig:
    rank: int = 4
    alpha: float | None = None  # None means 2 * rank
    seed: int = 0

    @property
    def scale_alpha(self) -> float:
        return 2.0 * self.rank if self.alpha is None else float(self.alpha)


def sinusoidal_table(n_positions: int, d: int) -> torch.Tensor:
    pos = torch.arange(n_positions, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, d, 2, dtype=torch.float64) / d)
    table = torch.zeros(n_positions, d, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)[:, : d // 2]
    return table


def rms_norm(x: torch.Tensor, gain: torch.Tensor, eps: float) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps) * gain


class RMSNorm(nn.Module):
    def __init__(self, d: int, eps: float, dtype: torch.dtype):
        super().__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(d, dtype=dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return rms_norm(x, self.gain, self.eps)


class LoraLinear(nn.Module):
    """Bias-free projection ``W x`` with an optional low-rank update ``(alpha/r) B A x``."""

    def __init__(self, d_in: int, d_out: int, dtype: torch.dtype):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = nn.Parameter(torch.empty(d_out, d_in, dtype=dtype))
        self.lora_A: nn.Parameter | None = None
        self.lora_B: nn.Parameter | None = None
        self.scaling = 0.0

    def attach(self, rank: int, alpha: float, generator: torch.Generator, std: float) -> None:
        if rank < 1 or rank > min(self.d_in, self.d_out):
            raise ConfigError(
                f"LoRA rank {rank} invalid for a {self.d_out}x{self.d_in} projection")
        dtype = self.weight.dtype
        a = torch.randn(rank, self.d_in, generator=generator, dtype=torch.float64) * std
        self.lora_A = nn.Parameter(a.to(dtype))
        self.lora_B = nn.Parameter(torch.zeros(self.d_out, rank, dtype=dtype))
        self.scaling = alpha / rank

    @property
    def has_adapter(self) -> bool:
        return self.lora_A is not None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = x @ self.weight.T
        if self.lora_A is not None:
            out = out + self.scaling * ((x @ self.lora_A.T) @ self.lora_B.T)
        return out


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dt = cfg.torch_dtype
        self.n_heads = cfg.n_heads
        self.d_head = cfg.d // cfg.n_heads
        self.q_proj = LoraLinear(cfg.d, cfg.d, dt)
        self.k_proj = LoraLinear(cfg.d, cfg.d, dt)
        self.v_proj = LoraLinear(cfg.d, cfg.d, dt)
        self.o_proj = LoraLinear(cfg.d, cfg.d, dt)

    def forward(self, h: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b, n, d = h.shape

        def heads(x):
            return x.view(b, n, self.n_heads, self.d_head).transpose(1, 2)

        q, k, v = heads(self.q_proj(h)), heads(self.k_proj(h)), heads(self.v_proj(h))
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.d_head)
        scores = scores.masked_fill(~mask, float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return self.o_proj(out.transpose(1, 2).reshape(b, n, d))


class GatedFFN(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dt, hidden = cfg.torch_dtype, cfg.d * cfg.ffn_mult
        self.gate_proj = LoraLinear(cfg.d, hidden, dt)
        self.up_proj = LoraLinear(cfg.d, hidden, dt)
        self.down_proj = LoraLinear(hidden, cfg.d, dt)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.down_proj(F.silu(self.gate_proj(x)) * self.up_proj(x))


class DecoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = MultiHeadSelfAttention(cfg)
        self.attn_norm = RMSNorm(cfg.d, cfg.rms_epsilon, cfg.torch_dtype)
        self.ffn = GatedFFN(cfg)
        self.ffn_norm = RMSNorm(cfg.d, cfg.rms_epsilon, cfg.torch_dtype)

    def forward(self, h: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(h).all():
            raise FloatingPointError("non-finite hidden state entering decoder block")
        a = self.attn_norm(h + self.attn(h, mask))
        return self.ffn_norm(a + self.ffn(a))


def attention_mask(lengths: torch.Tensor, n: int) -> torch.Tensor:
    """(batch, 1, n, n) boolean: query i may see key j iff j <= i and j is not padding."""
    causal = torch.ones(n, n, dtype=torch.bool).tril()
    valid = torch.arange(n)[None, :] < lengths[:, None]
    return (causal[None, :, :] & valid[:, None, :])[:, None, :, :]


class MicroLM(nn.Module):
    def __init__(self, cfg: ModelConfig, class_ids: Sequence[int] | None = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        dt = cfg.torch_dtype
        self.class_ids = tuple(class_ids) if class_ids is not None else tuple(
            range(N_CONTROL_IDS, N_CONTROL_IDS + N_CLASSES))
        self.embedding = nn.Parameter(torch.empty(cfg.vocab_size, cfg.d, dtype=dt))
        self.register_buffer("positional", sinusoidal_table(cfg.max_seq_len, cfg.d).to(dt),
                             persistent=False)
        self.blocks = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.n_layers))
        self.head_weight = nn.Parameter(torch.empty(cfg.vocab_size, cfg.d, dtype=dt))
        self.head_bias = nn.Parameter(torch.zeros(cfg.vocab_size, dtype=dt))
        self.lora: LoraConfig | None = None
        self.reset_parameters()

    def reset_parameters(self) -> None:
        g = torch.Generator().manual_seed(self.cfg.seed)

        def normal(t: torch.Tensor, std: float) -> None:
            with torch.no_grad():
                t.copy_(torch.randn(t.shape, generator=g, dtype=torch.float64) * std)

        normal(self.embedding, self.cfg.embed_std)
        for proj in self.projections():
            normal(proj.weight, self.cfg.init_std)
        normal(self.head_weight, self.cfg.init_std)
        with torch.no_grad():
            self.head_bias.zero_()

    def projections(self) -> list[LoraLinear]:
        return [m for m in self.modules() if isinstance(m, LoraLinear)]

    # -- forward pieces ----------------------------------------------------

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        ids = torch.as_tensor(ids)
        if ids.dim() == 1:
            ids = ids[None]
        n = ids.shape[1]
        if n > self.cfg.max_seq_len:
            raise SequenceLengthError(f"sequence of {n} tokens exceeds max_seq_len={self.cfg.max_seq_len}")
        if n == 0:
            raise SequenceLengthError("empty sequence")
        if int(ids.max()) >= self.cfg.vocab_size or int(ids.min()) < 0:
            raise IndexError("token id outside the model vocabulary")
        return self.embedding[ids] + self.positional[:n]

    def hidden_states(self, ids: torch.Tensor, lengths: torch.Tensor | None = None) -> list[torch.Tensor]:
        """All layer outputs H^0..H^L, each (batch, n, d)."""
        h = self.embed(ids)
        b, n, _ = h.shape
        if lengths is None:
            lengths = torch.full((b,), n, dtype=torch.long)
        mask = attention_mask(torch.as_tensor(lengths), n)
        states = [h]
        for block in self.blocks:
            h = block(h, mask)
            states.append(h)
        return states

    def final_hidden(self, ids: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        h = self.hidden_states(ids, lengths)[-1]
        if lengths is None:
            return h[:, -1]
        return h[torch.arange(h.shape[0]), torch.as_tensor(lengths) - 1]

    def forward_logits(self, ids: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        """Full-vocabulary logits z = W h_n + b at each sequence's last real position."""
        return self.final_hidden(ids, lengths) @ self.head_weight.T + self.head_bias

    def all_position_logits(self, ids: torch.Tensor) -> torch.Tensor:
        return self.hidden_states(ids)[-1] @ self.head_weight.T + self.head_bias

    def class_logits(self, ids: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        h = self.final_hidden(ids, lengths)
        idx = list(self.class_ids)
        return h @ self.head_weight[idx].T + self.head_bias[idx]

    def class_distribution(self, ids: torch.Tensor, lengths: torch.Tensor | None = None) -> np.ndarray:
        """Seven-way class probabilities in float64, one row per sequence."""
        with torch.no_grad():
            z = self.class_logits(ids, lengths)
        return softmax(z.double().numpy())

    # -- parameter bookkeeping -------------------------------------------

    def adapter_parameters(self) -> list[nn.Parameter]:
        out = []
        for proj in self.projections():
            if proj.has_adapter:
                out += [proj.lora_A, proj.lora_B]
        return out

    def base_state(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.state_dict().items() if "lora_" not in k}

    def adapter_state(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.state_dict().items() if "lora_" in k}

    def base_fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.base_state().items()):
            h.update(name.encode())
            h.update(t.detach().contiguous().numpy().tobytes())
        return h.hexdigest()


def softmax(z: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis, in float64."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def lora_wrap(model: MicroLM, cfg: LoraConfig) -> MicroLM:
    """Attach rank-r adapters to every projection and freeze all base parameters (in place)."""
    for proj in model.projections():
        if cfg.rank > min(proj.d_in, proj.d_out):
            raise ConfigError(f"LoRA rank {cfg.rank} exceeds min dimension of a "
                              f"{proj.d_out}x{proj.d_in} projection")
    g = torch.Generator().manual_seed(cfg.seed)
    for p in model.parameters():
        p.requires_grad_(False)
    for proj in model.projections():
        proj.attach(cfg.rank, cfg.scale_alpha, g, model.cfg.init_std)
    model.lora = cfg
    return model


def trainable_fraction(model: MicroLM) -> float:
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    total = sum(p.numel() for p in model.parameters())
    return trainable / total


def lora_param_count(d_in: int, d_out: int, rank: int) -> int:
    return rank * (d_in + d_out)


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(model: MicroLM, path: str | Path, vocab_hash: str = "", extra: dict | None = None) -> None:
    """Safetensors container: base tensors under ``base.``, adapters under ``adapter.``.

    The format version, configs and vocab hash travel as one canonical JSON
    string, because safetensors writes separate metadata keys in hash order,
    which would make otherwise identical files differ byte for byte.
    """
    from safetensors.torch import save_file

    tensors = {f"base.{k}": v.detach().contiguous() for k, v in model.base_state().items()}
    tensors.update({f"adapter.{k}": v.detach().contiguous() for k, v in model.adapter_state().items()})
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(model.cfg),
        "lora_config": asdict(model.lora) if model.lora else None,
        "class_ids": list(model.class_ids),
        "vocab_hash": vocab_hash,
        "extra": extra or {},
    }
    save_file(tensors, str(path), metadata={META_KEY: json.dumps(meta, sort_keys=True)})


def load_checkpoint(path: str | Path) -> tuple[MicroLM, dict]:
    from safetensors import safe_open
    from safetensors.torch import load_file

    with safe_open(str(path), framework="pt") as fh:
        raw = (fh.metadata() or {}).get(META_KEY)
    meta = json.loads(raw) if raw else {}
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    cfg = ModelConfig(**meta["model_config"])
    model = MicroLM(cfg, meta["class_ids"])
    lora = meta["lora_config"]
    if lora is not None:
        lora_wrap(model, LoraConfig(**lora))
    tensors = load_file(str(path))
    state = {k.split(".", 1)[1]: v for k, v in tensors.items()}
    model.load_state_dict(state, strict=False)
    missing = set(model.base_state()) | set(model.adapter_state())
    if missing - set(state):
        raise ValueError(f"{path}: missing tensors {sorted(missing - set(state))[:5]}")
    info = {"vocab_hash": meta.get("vocab_hash", ""), "extra": meta.get("extra", {})}
    return model, info
