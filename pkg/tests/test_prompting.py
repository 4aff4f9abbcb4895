import numpy as np
import pytest
import torch

from vidclip.encoders import class_text_embeddings
from vidclip.errors import ConfigError, DuplicateParameter, ShapeError
from vidclip.prompting import (
    FreezeMask,
    PromptBank,
    PromptConfig,
    attach_prompts,
    freeze_base,
    inject,
    mask_from_predicate,
)
from vidclip.tokenizer import tokenize
from vidclip.trainer import TrainConfig, train
from vidclip.videogen import GeneratorConfig, make_manifest, materialize


def _frames(seed=0, n=3):
    return torch.as_tensor(np.random.default_rng(seed).random((n, 16, 16, 3)), dtype=torch.float32)


def _base_state(model):
    return {n: p.detach().clone() for n, p in model.named_parameters() if not n.startswith("prompt.")}


def test_zero_tokens_is_identity(tiny_model):
    names = ["red circle", "circle with square"]
    prompted = attach_prompts(tiny_model, PromptConfig(0, 0, depth=2))
    x = _frames()
    assert torch.equal(prompted.encode_images(x), tiny_model.encode_images(x))
    assert torch.equal(class_text_embeddings(prompted, names), class_text_embeddings(tiny_model, names))


def test_depth_one_adds_two_arrays(tiny_model):
    prompted = attach_prompts(tiny_model, PromptConfig(4, 3, depth=1))
    new = [n for n, _ in prompted.named_parameters() if n.startswith("prompt.")]
    assert sorted(new) == ["prompt.text.0", "prompt.visual.0"]


def test_attach_deterministic(tiny_model):
    a = attach_prompts(tiny_model, PromptConfig(2, 2, depth=2), seed=5)
    b = attach_prompts(tiny_model, PromptConfig(2, 2, depth=2), seed=5)
    for (na, pa), (nb, pb) in zip(a.prompt.named_parameters(), b.prompt.named_parameters()):
        assert na == nb and torch.equal(pa, pb)
    c = attach_prompts(tiny_model, PromptConfig(2, 2, depth=2), seed=6)
    assert not torch.equal(a.prompt.visual[0], c.prompt.visual[0])


def test_attach_keeps_base_bits(tiny_model):
    before = _base_state(tiny_model)
    prompted = attach_prompts(tiny_model, PromptConfig(2, 2, depth=2))
    after = _base_state(prompted)
    assert before.keys() == after.keys()
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert tiny_model.prompt is None


def test_attach_init_scale(tiny_model):
    prompted = attach_prompts(tiny_model, PromptConfig(8, 8, depth=2, init_std=0.5), seed=1)
    values = torch.cat([p.flatten() for p in prompted.prompt.parameters()])
    assert 0.4 < values.std().item() < 0.6


def test_attach_twice_rejected(tiny_model):
    prompted = attach_prompts(tiny_model, PromptConfig(1, 1, depth=1))
    with pytest.raises(DuplicateParameter):
        attach_prompts(prompted, PromptConfig(1, 1, depth=1))


def test_depth_beyond_tower(tiny_model):
    with pytest.raises(ConfigError):
        attach_prompts(tiny_model, PromptConfig(1, 1, depth=3))


def test_negative_tokens():
    with pytest.raises(ConfigError):
        PromptConfig(-1, 0).validate()


# --- injection -----------------------------------------------------------------------

def _bank(n, width, depth):
    return [torch.full((n, width), float(i + 1)) for i in range(depth)]


def test_inject_prepends_then_replaces():
    bank = _bank(2, 3, depth=2)
    content = torch.randn(1, 4, 3)
    x0 = inject(0, content, bank)
    assert x0.shape == (1, 6, 3)
    assert torch.equal(x0[:, 2:], content) and torch.all(x0[:, :2] == 1.0)
    x1 = inject(1, x0, bank)
    assert x1.shape == (1, 6, 3)
    assert torch.all(x1[:, :2] == 2.0) and torch.equal(x1[:, 2:], content)


def test_inject_depth_one_propagates():
    bank = _bank(2, 3, depth=1)
    x = inject(0, torch.randn(2, 4, 3), bank)
    for layer in (1, 2, 3):
        assert torch.equal(inject(layer, x, bank, n_layers=4), x)


def test_inject_length_walk():
    # sequence length stays n_tokens + content at every layer of a deep tower
    n, content_len, depth, layers = 3, 5, 2, 4
    bank = _bank(n, 4, depth)
    x = torch.randn(1, content_len, 4)
    for layer in range(layers):
        x = inject(layer, x, bank, n_layers=layers)
        assert x.shape[1] == n + content_len


def test_inject_width_mismatch():
    with pytest.raises(ShapeError):
        inject(0, torch.randn(1, 4, 5), _bank(2, 3, 1))


def test_inject_layer_out_of_range():
    with pytest.raises(ConfigError):
        inject(4, torch.randn(1, 4, 3), _bank(2, 3, 1), n_layers=4)


# --- masks ---------------------------------------------------------------------------

def test_freeze_base_requires_prompts(tiny_model):
    with pytest.raises(ConfigError):
        freeze_base(tiny_model)


def test_freeze_base_mask(tiny_model):
    prompted = attach_prompts(tiny_model, PromptConfig(3, 2, depth=2))
    mask = freeze_base(prompted)
    assert mask.covers(prompted)
    assert all(n.startswith("prompt.") for n in mask.trainable_names)
    assert "logit_scale" in mask.frozen_names
    width = prompted.config.embed_dim
    assert mask.trainable_count(prompted) == 2 * (3 * width + 2 * width)


def test_mask_apply_sets_requires_grad(tiny_model):
    mask = mask_from_predicate(tiny_model, lambda n: n.startswith("visual."))
    mask.apply(tiny_model)
    for name, p in tiny_model.named_parameters():
        assert p.requires_grad == name.startswith("visual.")
    assert isinstance(mask, FreezeMask) and mask("logit_scale") is False


def test_prompt_bank_layout():
    bank = PromptBank(PromptConfig(2, 5, depth=3), width=7)
    assert [tuple(p.shape) for p in bank.visual] == [(2, 7)] * 3
    assert [tuple(p.shape) for p in bank.text] == [(5, 7)] * 3


# --- readout -------------------------------------------------------------------------

def test_text_readout_ignores_pad_after_injection(tiny_model):
    prompted = attach_prompts(tiny_model, PromptConfig(2, 4, depth=2), seed=3)
    seq = tokenize("a photo of a red circle", prompted.vocab)
    ids = np.array(seq.ids)
    noisy = ids.copy()
    # overwrite every slot past the EOS that still fits beside the prompts
    length = len(ids) - 4
    noisy[seq.eos_index + 1:length] = prompted.vocab.id_of("square")
    a = prompted.encode_tokens(ids[None], [seq.eos_index])
    b = prompted.encode_tokens(noisy[None], [seq.eos_index])
    assert torch.equal(a, b)


def test_prompts_change_outputs(tiny_model):
    prompted = attach_prompts(tiny_model, PromptConfig(2, 2, depth=2), seed=0)
    x = _frames()
    assert not torch.allclose(prompted.encode_images(x), tiny_model.encode_images(x))


def test_prompt_training_freezes_base(tiny_model, roster):
    gen = GeneratorConfig(size=24)
    manifest = make_manifest(roster[:3], train_per_class=2, val_per_class=1, seed=0, generator=gen)
    data = materialize(manifest, "train")
    prompted = attach_prompts(tiny_model, PromptConfig(2, 2, depth=2))
    prompted.provenance["stage1"] = {"source": "test"}
    before = _base_state(prompted)
    p0 = prompted.prompt.visual[0].detach().clone()
    cfg = TrainConfig(regime="prompt_only", epochs=1, batch_size=3, learning_rate=5e-3, frames=2, crop_size=16)
    train(cfg, prompted, data)
    after = _base_state(prompted)
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert not torch.equal(p0, prompted.prompt.visual[0])
