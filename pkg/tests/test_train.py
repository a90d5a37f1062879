import math

import numpy as np
import pytest
import torch

from dha_forge.crashdata import ConfigError
from dha_forge.model import LoraConfig, MicroLM, ModelConfig, lora_wrap
from dha_forge.train import (TrainConfig, batch_order, grad_check, lr_at,
                             predict_classes, target_token_loss, train)

CLASS_IDS = list(range(6, 13))


def toy_model(seed=0, dtype="float32", d=32, layers=2, vocab=64):
    m = MicroLM(ModelConfig(vocab_size=vocab, d=d, n_layers=layers, n_heads=4, max_seq_len=32,
                            seed=seed, dtype=dtype))
    return lora_wrap(m, LoraConfig(rank=4, seed=seed))


def toy_dataset(n=64, seed=0, vocab=64, length=8):
    rng = np.random.default_rng(seed)
    return [(list(rng.integers(13, vocab, length)), int(rng.integers(0, 7))) for _ in range(n)]


# -- loss ----------------------------------------------------------------------

def test_uniform_loss_is_ln7():
    z = torch.zeros(1, 20, dtype=torch.float64)
    assert abs(target_token_loss(z, [3], CLASS_IDS).item() - math.log(7)) < 1e-12
    assert abs(math.log(7) - 1.94591) < 1e-5


def test_confident_loss_goes_to_zero():
    z = torch.zeros(20, dtype=torch.float64)
    z[8] = 60.0
    assert target_token_loss(z, [2], CLASS_IDS).item() < 1e-20


def test_non_class_logits_do_not_matter():
    g = torch.Generator().manual_seed(0)
    z = torch.randn(4, 30, generator=g, dtype=torch.float64, requires_grad=True)
    labels = [0, 3, 6, 2]
    base = target_token_loss(z, labels, CLASS_IDS)
    shifted = z.detach().clone()
    other = [i for i in range(30) if i not in CLASS_IDS]
    shifted[:, other] += torch.randn(4, len(other), generator=g, dtype=torch.float64) * 100
    assert target_token_loss(shifted, labels, CLASS_IDS).item() == pytest.approx(base.item(), abs=1e-12)
    base.backward()
    assert torch.count_nonzero(z.grad[:, other]) == 0


def test_non_finite_logits_raise():
    z = torch.zeros(1, 20)
    z[0, 7] = float("nan")
    with pytest.raises(FloatingPointError):
        target_token_loss(z, [0], CLASS_IDS)


# -- schedule and batching ---------------------------------------------------

def test_warmup_schedule():
    cfg = TrainConfig(steps=1000, learning_rate=1e-3, warmup_fraction=0.01, schedule="constant")
    assert lr_at(0, cfg) == pytest.approx(1e-4)
    assert lr_at(9, cfg) == pytest.approx(1e-3)
    assert lr_at(500, cfg) == 1e-3


def test_cosine_schedule():
    cfg = TrainConfig(steps=1000, learning_rate=1e-3, warmup_fraction=0.01, schedule="cosine")
    assert lr_at(0, cfg) == pytest.approx(1e-4)
    assert lr_at(10, cfg) == pytest.approx(1e-3)
    assert lr_at(505, cfg) == pytest.approx(5e-4)
    assert lr_at(999, cfg) == pytest.approx(0.5e-3 * (1 + math.cos(math.pi * 989 / 990)))
    lrs = [lr_at(s, cfg) for s in range(10, 1000)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ConfigError):
        TrainConfig(schedule="linear").validate()


def test_batch_order_deterministic_epochs():
    cfg = TrainConfig(batch_size=4, steps=10, seed=3)
    a, b = batch_order(10, cfg), batch_order(10, cfg)
    assert all(np.array_equal(x, y) for x, y in zip(a, b)) and len(a) == 10
    # each epoch visits distinct indices
    assert len(set(np.concatenate(a[:2]).tolist())) == 8


# -- training contracts ------------------------------------------------------

def test_zero_steps_is_identity():
    m = toy_model()
    before = {k: v.clone() for k, v in m.state_dict().items()}
    report = train(m, toy_dataset(8), TrainConfig(steps=0))
    assert report.losses == []
    assert all(torch.equal(before[k], v) for k, v in m.state_dict().items())


def test_zero_learning_rate_leaves_parameters():
    m = toy_model()
    before = {k: v.clone() for k, v in m.state_dict().items()}
    train(m, toy_dataset(16), TrainConfig(steps=5, learning_rate=0.0, batch_size=4))
    assert all(torch.equal(before[k], v) for k, v in m.state_dict().items())


def test_base_frozen_and_adapters_move():
    m = toy_model()
    base, adapters = m.base_fingerprint(), {k: v.clone() for k, v in m.adapter_state().items()}
    train(m, toy_dataset(16), TrainConfig(steps=10, batch_size=8, learning_rate=1e-2))
    assert m.base_fingerprint() == base
    assert any(not torch.equal(adapters[k], v) for k, v in m.adapter_state().items())


def test_training_is_deterministic():
    runs = []
    for _ in range(2):
        m = toy_model(seed=4)
        report = train(m, toy_dataset(32), TrainConfig(steps=20, batch_size=8, learning_rate=5e-3,
                                                        seed=9))
        runs.append((report.losses, {k: v.clone() for k, v in m.adapter_state().items()}))
    assert runs[0][0] == runs[1][0]
    assert all(torch.equal(runs[0][1][k], runs[1][1][k]) for k in runs[0][1])


def test_keep_best_restores_best_evaluation():
    data, held_out = toy_dataset(48, seed=1), toy_dataset(40, seed=2)
    cfg = TrainConfig(steps=60, batch_size=8, learning_rate=2e-2, eval_every=5, seed=3, keep_best=True)
    m = toy_model(seed=5)
    report = train(m, data, cfg, eval_set=held_out)
    accs = [a for _, a in report.eval_accuracy]
    best = max(accs)
    assert report.best_step == report.eval_accuracy[accs.index(best)][0]
    final = (predict_classes(m, [s for s, _ in held_out]) == [y for _, y in held_out]).mean()
    assert final == best

    last = toy_model(seed=5)
    plain = train(last, data, TrainConfig(**{**cfg.__dict__, "keep_best": False}), eval_set=held_out)
    assert plain.best_step is None
    final = (predict_classes(last, [s for s, _ in held_out]) == [y for _, y in held_out]).mean()
    assert final == accs[-1]


def test_loss_decreases_for_most_seeds():
    decreased = 0
    for seed in range(10):
        m = toy_model(seed=seed)
        report = train(m, toy_dataset(64, seed=seed),
                       TrainConfig(steps=100, batch_size=16, learning_rate=1e-2, seed=seed))
        decreased += np.mean(report.losses[-10:]) < np.mean(report.losses[:10])
    assert decreased >= 9


def test_divergence_aborts():
    m = toy_model()
    with torch.no_grad():
        m.head_bias[6] = float("inf")
    with pytest.raises(FloatingPointError):
        train(m, toy_dataset(8), TrainConfig(steps=3, batch_size=4))


def test_requires_adapters_and_data():
    m = MicroLM(ModelConfig(vocab_size=64, d=16, n_layers=1, n_heads=2))
    for p in m.parameters():
        p.requires_grad_(False)
    with pytest.raises(ValueError):
        train(m, toy_dataset(4), TrainConfig(steps=1))
    with pytest.raises(ValueError):
        train(toy_model(), [], TrainConfig(steps=1))


def test_log_lines():
    m = toy_model()
    cfg = TrainConfig(steps=4, batch_size=4, eval_every=2)
    data = toy_dataset(8)
    report = train(m, data, cfg, eval_set=data)
    lines = report.log_lines([lr_at(s, cfg) for s in range(4)]).splitlines()
    assert len(lines) == 4 and '"eval_acc"' in lines[1] and '"eval_acc"' not in lines[0]
    assert len(predict_classes(m, [s for s, _ in data])) == 8


# -- gradient check ------------------------------------------------------------

def test_grad_check_all_layer_types():
    m = toy_model(dtype="float64", d=8, layers=1, vocab=20)
    with torch.no_grad():
        for p in m.adapter_parameters():
            p.normal_(0, 0.2)
    err, per_tensor = grad_check(m, [1, 14, 15, 16], 2)
    assert err < 1e-4
    kinds = {"embedding", "head_weight", "head_bias", "attn.q_proj.weight", "ffn.down_proj.lora_B",
             "attn_norm.gain", "ffn_norm.gain"}
    assert all(any(k in name for name in per_tensor) for k in kinds)
    # requires_grad flags are restored
    assert all(("lora_" in n) == p.requires_grad for n, p in m.named_parameters())


def test_tied_class_logits_zero_bias_gradient():
    m = toy_model(dtype="float64", d=8, layers=1, vocab=20)
    with torch.no_grad():
        m.head_weight.zero_()
    m.head_bias.requires_grad_(True)
    loss = target_token_loss(m.forward_logits(torch.tensor([[1, 2, 3]])), [0], m.class_ids)
    loss.backward()
    g = m.head_bias.grad
    other = [i for i in range(20) if i not in m.class_ids]
    assert torch.count_nonzero(g[other]) == 0
    assert abs(loss.item() - math.log(7)) < 1e-12


def test_lora_a_gradient_zero_when_b_zero():
    m = toy_model(dtype="float64", d=8, layers=1, vocab=20)
    loss = target_token_loss(m.forward_logits(torch.tensor([[1, 2, 3]])), [4], m.class_ids)
    loss.backward()
    for proj in m.projections():
        assert torch.count_nonzero(proj.lora_A.grad) == 0
    assert any(torch.count_nonzero(p.lora_B.grad) > 0 for p in m.projections())
