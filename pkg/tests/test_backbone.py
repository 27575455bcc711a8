import math

import pytest
import torch

from genrec.backbone import (
    Batch,
    LoRALinear,
    ModelConfig,
    build_model,
    collate,
    decays,
    is_adapter_name,
    loss,
    loss_sum,
    trainable_parameters,
)

from conftest import tiny_config


def test_logits_shape(tiny_model):
    ids = torch.randint(0, 50, (2, 5))
    assert tiny_model(ids).shape == (2, 5, 50)


@pytest.mark.parametrize("bad", [torch.zeros(5, dtype=torch.long), torch.zeros(1, 33, dtype=torch.long),
                                 torch.full((1, 3), 50), torch.zeros(1, 0, dtype=torch.long)])
def test_forward_rejects_bad_input(tiny_model, bad):
    with pytest.raises(ValueError):
        tiny_model(bad)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(adapter_targets=("gate",))
    assert ModelConfig.from_dict(ModelConfig().to_dict()) == ModelConfig()


def test_build_model_is_seeded_and_leaves_global_rng_alone():
    torch.manual_seed(123)
    before = torch.random.get_rng_state()
    a, b = build_model(tiny_config(), seed=5), build_model(tiny_config(), seed=5)
    assert torch.equal(torch.random.get_rng_state(), before)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n


def test_causality(tiny_model):
    tiny_model.eval()
    g = torch.Generator().manual_seed(0)
    for _ in range(100):
        T = int(torch.randint(2, 12, (1,), generator=g))
        cut = int(torch.randint(1, T, (1,), generator=g))
        ids = torch.randint(0, 50, (2, T), generator=g)
        changed = ids.clone()
        changed[:, cut:] = torch.randint(0, 50, (2, T - cut), generator=g)
        assert torch.equal(tiny_model(ids)[:, :cut], tiny_model(changed)[:, :cut])


def test_adapters_are_a_no_op_at_init(tiny_model):
    ids = torch.randint(0, 50, (3, 10))
    with_adapters = tiny_model(ids)
    tiny_model.set_adapters(False)
    without = tiny_model(ids)
    tiny_model.set_adapters(True)
    assert (with_adapters - without).abs().max().item() == 0.0


def test_adapter_count_and_views():
    model = build_model(tiny_config(adapter_rank=4, n_layers=2, adapter_targets=("query", "value")))
    adapters = trainable_parameters(model, adapters_only=True)
    assert len(adapters) == 8
    assert all(is_adapter_name(n) for n in adapters)
    assert set(trainable_parameters(model)) == {n for n, _ in model.named_parameters()}
    with pytest.raises(ValueError):
        trainable_parameters(build_model(tiny_config(adapter_rank=0)), adapters_only=True)


def test_weight_decay_selection(tiny_model):
    named = dict(tiny_model.named_parameters())
    assert decays("tok_emb.weight", named["tok_emb.weight"])
    assert not decays("blocks.0.ln1.weight", named["blocks.0.ln1.weight"])
    assert not decays("blocks.0.attn.query.lora_A", named["blocks.0.attn.query.lora_A"])


def test_adapter_scaling_is_linear_in_alpha():
    torch.manual_seed(0)
    layer = LoRALinear(6, 5, rank=3, alpha=2.0)
    torch.nn.init.normal_(layer.lora_B)
    x = torch.randn(4, 6, dtype=torch.float64)
    layer = layer.double()
    base = layer.delta(x)
    expected = (2.0 / 3) * x @ (layer.lora_B @ layer.lora_A).T
    torch.testing.assert_close(base, expected, rtol=1e-12, atol=1e-12)
    for c in (0.5, 3.0, 10.0):
        layer.scaling = c * 2.0 / 3
        torch.testing.assert_close(layer.delta(x), c * base, rtol=1e-12, atol=1e-12)


def test_collate_masks_response_and_padding():
    batch = collate([([1, 5, 6, 7, 2], 3), ([1, 8, 2], 2)])
    assert batch.token_ids.tolist() == [[1, 5, 6, 7, 2], [1, 8, 2, 0, 0]]
    assert batch.loss_mask.tolist() == [[0, 0, 0, 1, 1], [0, 0, 1, 0, 0]]
    assert batch.num_targets() == 3
    with pytest.raises(ValueError):
        collate([([1, 2], 0)])


def test_initial_loss_is_near_log_vocab():
    V = 1000
    model = build_model(tiny_config(vocab_size=V, d_model=32, max_len=64), seed=1)
    g = torch.Generator().manual_seed(0)
    seqs = [(torch.randint(3, V, (40,), generator=g).tolist(), 10) for _ in range(16)]
    value = loss(model, collate(seqs)).item()
    assert abs(value - math.log(V)) / math.log(V) < 0.05


def test_loss_goes_to_zero_when_logits_are_one_hot():
    ids = torch.tensor([[1, 7, 9]])
    batch = Batch(ids, torch.tensor([[0, 0, 1]]))

    def confident(token_ids):
        out = torch.zeros(*token_ids.shape, 12)
        out[0, 1, 9] = 100.0  # position 1 predicts token 9 at position 2
        return out

    assert loss(confident, batch).item() < 1e-30
    with pytest.raises(ValueError):
        loss(confident, Batch(ids, torch.zeros_like(ids)))


def test_padding_does_not_change_the_loss(tiny_model):
    a = ([1, 4, 5, 6, 2], 3)
    b = ([1, 7, 8, 9, 10, 11, 12, 2], 5)
    s1, n1 = loss_sum(tiny_model, collate([a]))
    s2, n2 = loss_sum(tiny_model, collate([b]))
    s, n = loss_sum(tiny_model, collate([a, b]))
    assert n == n1 + n2
    torch.testing.assert_close(s, s1 + s2, rtol=1e-6, atol=1e-6)


def gradient_check(model, batch, samples_per_tensor=6, eps=1e-6):
    """Max relative error between autograd and central differences, per named tensor."""
    model.zero_grad()
    loss(model, batch).backward()
    g = torch.Generator().manual_seed(0)
    errors = {}
    for name, p in model.named_parameters():
        flat = p.data.view(-1)
        idx = torch.randperm(flat.numel(), generator=g)[:samples_per_tensor]
        analytic, numeric = [], []
        for i in idx.tolist():
            orig = flat[i].item()
            flat[i] = orig + eps
            up = loss(model, batch).item()
            flat[i] = orig - eps
            down = loss(model, batch).item()
            flat[i] = orig
            numeric.append((up - down) / (2 * eps))
            analytic.append(p.grad.view(-1)[i].item())
        a, n = torch.tensor(analytic), torch.tensor(numeric)
        scale = max(a.norm().item(), n.norm().item(), 1e-10)
        errors[name] = (a - n).norm().item() / scale
    return errors


def test_finite_difference_gradients():
    model = build_model(tiny_config(max_len=8), seed=0, dtype=torch.float64)
    torch.manual_seed(1)
    for layer in model.adapter_layers():
        torch.nn.init.normal_(layer.lora_B, std=0.1)  # nonzero B so A receives gradient
    g = torch.Generator().manual_seed(2)
    batch = collate([(torch.randint(0, 50, (8,), generator=g).tolist(), 3) for _ in range(3)])
    errors = gradient_check(model, batch)
    assert any(n.endswith("lora_A") for n in errors) and any(n.endswith("lora_B") for n in errors)
    worst = max(errors, key=errors.get)
    assert errors[worst] < 1e-4, (worst, errors[worst])
