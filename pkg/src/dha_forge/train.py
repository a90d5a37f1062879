"""LoRA fine-tuning with a class-token-only answer loss, plus gradient checking."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .crashdata import ConfigError
from .model import MicroLM
from .shift import pad_batch

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


SCHEDULES = ("constant", "cosine")


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 32
    steps: int = 1500
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    grad_clip_norm: float = 1.0
    eval_every: int = 250
    warmup_fraction: float = 0.01
    schedule: str = "cosine"  # after warmup: "cosine" (decays to 0) or "constant"
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    # restore the trainable weights from the evaluation with the best accuracy
    keep_best: bool = False

    def validate(self) -> None:
        if self.batch_size < 1 or self.steps < 0 or self.eval_every < 1:
            raise ConfigError("train: batch_size and eval_every must be positive, steps >= 0")
        if self.learning_rate < 0 or self.weight_decay < 0 or self.grad_clip_norm <= 0:
            raise ConfigError("train: rates must be non-negative and grad_clip_norm positive")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"train.schedule must be one of {SCHEDULES}, got {self.schedule!r}")


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    eval_accuracy: list[tuple[int, float]] = field(default_factory=list)
    checkpoint: str | None = None
    best_step: int | None = None

    def log_lines(self, lrs: Sequence[float]) -> str:
        evals = dict(self.eval_accuracy)
        lines = []
        for step, (loss, lr) in enumerate(zip(self.losses, lrs), start=1):
            row = {"step": step, "loss": loss, "lr": lr}
            if step in evals:
                row["eval_acc"] = evals[step]
            lines.append(json.dumps(row))
        return "\n".join(lines) + ("\n" if lines else "")


def target_token_loss(z: torch.Tensor, labels, class_ids: Sequence[int]) -> torch.Tensor:
    """Mean of -log softmax over the class-token entries of ``z`` at the labelled class.

    ``z`` holds full-vocabulary logits at the answer position, shape (V,) or
    (batch, V); ``labels`` are class indices.  Non-class entries do not
    enter the loss and receive zero gradient.
    """
    if z.dim() == 1:
        z = z[None]
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    if not torch.isfinite(z).all():
        raise FloatingPointError("non-finite logits in target_token_loss")
    selected = z[:, list(class_ids)]
    return F.cross_entropy(selected, labels)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup over the first ``warmup_fraction`` of steps, then constant or
    half-cosine decay towards zero at the last step."""
    warmup = max(1, math.ceil(cfg.warmup_fraction * cfg.steps))
    if step < warmup or cfg.schedule == "constant":
        return cfg.learning_rate * min(1.0, (step + 1) / warmup)
    progress = (step - warmup) / max(1, cfg.steps - warmup)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


def batch_order(n: int, cfg: TrainConfig) -> list[np.ndarray]:
    """Fixed sequence of index batches: reshuffled epochs drawn from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    batches: list[np.ndarray] = []
    size = min(cfg.batch_size, n)
    while len(batches) < cfg.steps:
        perm = rng.permutation(n)
        for start in range(0, n - size + 1, size):
            batches.append(perm[start:start + size])
            if len(batches) == cfg.steps:
                break
    return batches


def predict_classes(model: MicroLM, seqs: Sequence[Sequence[int]], batch_size: int = 128) -> np.ndarray:
    out = []
    with torch.no_grad():
        for start in range(0, len(seqs), batch_size):
            ids, lengths = pad_batch(seqs[start:start + batch_size])
            out.append(model.class_logits(ids, lengths).argmax(-1).numpy())
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def train(
    model: MicroLM,
    dataset: Sequence[tuple[Sequence[int], int]],
    cfg: TrainConfig,
    eval_set: Sequence[tuple[Sequence[int], int]] | None = None,
    on_step: Callable[[int, float, float], None] | None = None,
) -> TrainReport:
    """Fine-tune the trainable parameters (the adapters, once wrapped) of ``model``.

    ``dataset`` holds (token ids, class index) pairs.  The run is
    deterministic for a given seed; base tensors stay bit-identical.  With an
    ``eval_set`` and ``cfg.keep_best``, the trainable weights end at the
    earliest evaluation with the highest accuracy.
    """
    cfg.validate()
    if not dataset:
        raise ValueError("training set is empty")
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise ValueError("model has no trainable parameters; attach adapters first")
    torch.manual_seed(cfg.seed)
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.adam_eps,
                            weight_decay=cfg.weight_decay)
    report = TrainReport()
    seqs = [list(s) for s, _ in dataset]
    labels = np.array([int(y) for _, y in dataset])
    eval_seqs = [list(s) for s, _ in eval_set] if eval_set else None
    eval_labels = np.array([int(y) for _, y in eval_set]) if eval_set else None

    best_acc, best_state = -1.0, None
    model.train()
    for step, idx in enumerate(batch_order(len(seqs), cfg)):
        lr = lr_at(step, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        ids, lengths = pad_batch([seqs[i] for i in idx])
        z = model.forward_logits(ids, lengths)
        loss = target_token_loss(z, labels[idx], model.class_ids)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDivergedError(f"loss became {value} at step {step + 1} (lr={lr:g})")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip_norm)
        opt.step()
        report.losses.append(value)
        if on_step is not None:
            on_step(step + 1, value, lr)
        if eval_seqs is not None and (step + 1) % cfg.eval_every == 0:
            acc = float((predict_classes(model, eval_seqs) == eval_labels).mean())
            report.eval_accuracy.append((step + 1, acc))
            log.info("step %d loss %.4f eval_acc %.4f", step + 1, value, acc)
            if cfg.keep_best and acc > best_acc:
                best_acc, report.best_step = acc, step + 1
                best_state = [p.detach().clone() for p in params]
            model.train()
    if best_state is not None:
        with torch.no_grad():
            for p, saved in zip(params, best_state):
                p.copy_(saved)
        log.info("kept weights from step %d (eval_acc %.4f)", report.best_step, best_acc)
    model.eval()
    return report


# -- gradient checking -------------------------------------------------------

def grad_check(
    model: MicroLM,
    ids: Sequence[int],
    label: int,
    epsilon: float = 1e-4,
    include_frozen: bool = True,
) -> tuple[float, dict[str, float]]:
    """Compare autograd gradients of the answer loss with central differences.

    Every parameter tensor is checked (frozen base tensors too when
    ``include_frozen``).  The error of a tensor is
    ``|g_analytic - g_numeric|_2 / (|g_analytic|_2 + |g_numeric|_2)``, taken as 0
    when both gradients vanish.  Returns the maximum error and the per-tensor errors.
    Meant for float64 models with d <= 32.
    """
    ids_t = torch.as_tensor(list(ids), dtype=torch.long)[None]
    named = [(n, p) for n, p in model.named_parameters() if include_frozen or p.requires_grad]
    saved = {n: p.requires_grad for n, p in model.named_parameters()}

    def loss_value() -> torch.Tensor:
        return target_token_loss(model.forward_logits(ids_t), [label], model.class_ids)

    try:
        for _, p in named:
            p.requires_grad_(True)
        model.zero_grad(set_to_none=True)
        loss_value().backward()
        analytic = {n: p.grad.detach().clone() for n, p in named}
        errors: dict[str, float] = {}
        with torch.no_grad():
            for name, p in named:
                flat = p.view(-1)
                numeric = torch.zeros_like(flat)
                for i in range(flat.numel()):
                    orig = flat[i].item()
                    flat[i] = orig + epsilon
                    up = loss_value().item()
                    flat[i] = orig - epsilon
                    down = loss_value().item()
                    flat[i] = orig
                    numeric[i] = (up - down) / (2 * epsilon)
                a = analytic[name].view(-1)
                denom = float(a.norm() + numeric.norm())
                errors[name] = 0.0 if denom < 1e-30 else float((a - numeric).norm()) / denom
    finally:
        for n, p in model.named_parameters():
            p.requires_grad_(saved[n])
            p.grad = None
    return max(errors.values()), errors


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
