import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from promptadapt.errors import ConfigurationError
from promptadapt.lora import (
    LoRALinear,
    compression_ratio,
    inject,
    load_adapter_checkpoint,
    merge,
    merged_model,
    read_checkpoint_manifest,
    save_adapter_checkpoint,
    trainable_parameters,
)
from promptadapt.model import build_toy_model, parameter_checksum
from promptadapt.prompts import BoxPrompt, PointPrompt

PROMPTS = [BoxPrompt(5, 5, 30, 40), PointPrompt(((20, 20),), ((60, 2),))]


def _image(seed=0):
    return torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(seed))


def _perturb(adapted, seed=1):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for lora in adapted.adapters.values():
            lora.B.copy_(torch.randn(lora.B.shape, generator=g) * 0.1)


def test_compression_ratio():
    assert compression_ratio(768, 768, 4) == 4 * (768 + 768) / (768 * 768)
    assert compression_ratio(768, 768, 4) == pytest.approx(0.0104166, abs=1e-7)
    assert compression_ratio(7, 7, 7) == 2.0
    assert compression_ratio(2, 2, 1) == 1.0
    with pytest.raises(ValueError):
        compression_ratio(0, 5, 1)


def test_merge_by_hand():
    lora = LoRALinear(nn.Linear(2, 2), rank=1)
    assert torch.equal(merge(lora, torch.eye(2)), torch.eye(2))
    with torch.no_grad():
        lora.A.copy_(torch.tensor([[1.0], [0.0]]))
        lora.B.copy_(torch.tensor([[2.0, 3.0]]))
    assert torch.equal(merge(lora, torch.zeros(2, 2)), torch.tensor([[2.0, 3.0], [0.0, 0.0]]))
    with pytest.raises(ValueError):
        merge(lora, torch.zeros(3, 2))


def test_seeded_injection_repeats():
    model = build_toy_model(0, feature_dim=16)
    a, b, c = inject(model, seed=3), inject(model, seed=3), inject(model, seed=4)
    for name, lora in a.adapters.items():
        assert torch.equal(lora.A, b.adapters[name].A)
    assert any(not torch.equal(l.A, c.adapters[n].A) for n, l in a.adapters.items())


def test_adapter_scalar_counts():
    lora = LoRALinear(nn.Linear(768, 768), rank=4)
    assert lora.A.numel() + lora.B.numel() == 6144
    model = build_toy_model(0, feature_dim=32)
    adapted = inject(model, ["image_encoder.blocks.*.proj", "image_encoder.neck"], rank=4)
    assert len(adapted.adapters) == 3
    assert sum(p.numel() for p in trainable_parameters(adapted)) == 3 * 4 * 64


def test_fresh_injection_is_identity():
    model = build_toy_model(0, feature_dim=16)
    adapted = inject(model, rank=4)
    with torch.no_grad():
        base, _ = model(_image(), PROMPTS)
        out, _ = adapted(_image(), PROMPTS)
    assert float((base - out).abs().max()) <= 1e-6
    assert all(float(l.B.detach().abs().max()) == 0.0 for l in adapted.adapters.values())


def test_injection_leaves_the_input_model_alone():
    model = build_toy_model(0, feature_dim=16)
    before = parameter_checksum(model)
    adapted = inject(model, rank=2)
    _perturb(adapted)
    assert parameter_checksum(model) == before
    assert not any(isinstance(m, LoRALinear) for m in model.modules())


def test_merge_consistency_random_trials():
    g = torch.Generator().manual_seed(0)
    for trial in range(100):
        d_i, d_o = (int(v) for v in torch.randint(2, 40, (2,), generator=g))
        r = int(torch.randint(1, min(d_i, d_o) + 1, (1,), generator=g))
        base = nn.Linear(d_i, d_o)
        with torch.no_grad():
            base.weight.copy_(torch.randn(d_o, d_i, generator=g))
        lora = LoRALinear(base, r, generator=g)
        with torch.no_grad():
            lora.B.copy_(torch.randn(r, d_o, generator=g))
        x = torch.randn(5, d_i, generator=g)
        theta = merge(lora, base.weight.detach().T)
        merged = x @ theta + base.bias.detach()
        path = lora(x).detach()
        rel = float((merged - path).norm() / path.norm())
        assert rel <= 1e-5, (trial, rel)


def test_merged_model_matches_adapter_path():
    adapted = inject(build_toy_model(0, feature_dim=16), rank=4)
    _perturb(adapted)
    plain = merged_model(adapted)
    assert not any(isinstance(m, LoRALinear) for m in plain.modules())
    with torch.no_grad():
        a, _ = adapted(_image(), PROMPTS)
        b, _ = plain(_image(), PROMPTS)
    assert float((a - b).norm() / a.norm()) <= 1e-5


@settings(max_examples=30)
@given(st.integers(2, 12), st.integers(2, 12), st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_update_rank_is_bounded(d_i, d_o, r, seed):
    r = min(r, d_i, d_o)
    g = torch.Generator().manual_seed(seed)
    lora = LoRALinear(nn.Linear(d_i, d_o), r, generator=g)
    with torch.no_grad():
        lora.B.copy_(torch.randn(r, d_o, generator=g))
    sv = torch.linalg.svdvals(lora.delta().detach().double())
    # the product is formed in float32, so count singular values above its round-off
    assert int((sv > 1e-5 * sv.max()).sum()) <= r


def test_rank_and_target_errors():
    model = build_toy_model(0, feature_dim=16)
    with pytest.raises(ValueError):
        LoRALinear(nn.Linear(4, 8), rank=5)
    with pytest.raises(ConfigurationError):
        inject(model, ["image_encoder.nothing_here"])
    with pytest.raises(ConfigurationError):
        inject(model, finetune_mode="lora+bogus")


def _names(adapted):
    return {n for n, _ in adapted.named_trainable()}


def test_trainable_sets_per_mode():
    model = build_toy_model(0, feature_dim=16)
    lora = _names(inject(model, finetune_mode="lora"))
    assert lora and all(n.endswith((".A", ".B")) for n in lora)
    full = _names(inject(model, finetune_mode="full"))
    norm = _names(inject(model, finetune_mode="layernorm"))
    assert norm and norm <= full
    assert not any(n.endswith((".A", ".B")) for n in full)
    dec = _names(inject(model, finetune_mode="decoder"))
    assert dec and all(n.startswith("mask_decoder.") for n in dec)
    both = _names(inject(model, finetune_mode="lora+decoder"))
    assert both == lora | dec


def test_requires_grad_follows_mode():
    adapted = inject(build_toy_model(0, feature_dim=16), finetune_mode="lora")
    chosen = {id(p) for p in trainable_parameters(adapted)}
    for p in adapted.parameters():
        assert p.requires_grad == (id(p) in chosen)


def test_base_weights_survive_optimizer_steps():
    adapted = inject(build_toy_model(0, feature_dim=16), rank=4)
    before = adapted.base_checksum()
    opt = torch.optim.Adam(trainable_parameters(adapted), lr=1e-2, weight_decay=1e-4)
    for step in range(5):
        opt.zero_grad()
        logits, _ = adapted(_image(step), PROMPTS)
        logits.sigmoid().mean().backward()
        opt.step()
    assert adapted.base_checksum() == before
    assert any(float(l.B.detach().abs().max()) > 0 for l in adapted.adapters.values())


@pytest.mark.parametrize("mode", ["lora", "lora+decoder", "layernorm"])
def test_checkpoint_round_trip(tmp_path, mode):
    model = build_toy_model(0, feature_dim=16)
    adapted = inject(model, rank=3, finetune_mode=mode)
    _perturb(adapted)
    with torch.no_grad():
        for _, p in adapted.named_trainable():
            p.add_(0.01)
    path = tmp_path / "a.ckpt"
    save_adapter_checkpoint(adapted, path, {"train_weak_sup": "box"})
    manifest = read_checkpoint_manifest(path)
    assert manifest["rank"] == 3 and manifest["train_weak_sup"] == "box" and manifest["backend"] == "toy"
    with np.load(path) as z:
        assert not any(k.startswith("P::image_encoder.patch_embed") for k in z.files)
    back = load_adapter_checkpoint(model, path)
    with torch.no_grad():
        a, _ = adapted(_image(), PROMPTS)
        b, _ = back(_image(), PROMPTS)
    assert torch.equal(a, b)


def test_checkpoint_shape_mismatch(tmp_path):
    adapted = inject(build_toy_model(0, feature_dim=16), rank=2)
    path = tmp_path / "a.ckpt"
    save_adapter_checkpoint(adapted, path)
    with pytest.raises(ConfigurationError):
        load_adapter_checkpoint(build_toy_model(0, feature_dim=8), path)
    with pytest.raises(FileNotFoundError):
        load_adapter_checkpoint(build_toy_model(0), tmp_path / "nope.ckpt")
