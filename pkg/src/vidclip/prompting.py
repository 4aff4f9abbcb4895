"""Deep vision-language prompt banks and the freeze contract around them."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .errors import ConfigError, DuplicateParameter, ShapeError

PROMPT_PREFIX = "prompt."


@dataclass(frozen=True)
class PromptConfig:
    n_vision_tokens: int = 8
    n_text_tokens: int = 4  # 8 would overflow 16 tokens on three-word class names
    depth: int = 4
    init_std: float = 0.02

    def validate(self, vision_layers: int | None = None, text_layers: int | None = None):
        if self.n_vision_tokens < 0 or self.n_text_tokens < 0:
            raise ConfigError("prompt token counts must be >= 0")
        if self.depth < 1:
            raise ConfigError("prompt depth must be >= 1")
        limit = min(x for x in (vision_layers, text_layers) if x is not None) if (
            vision_layers is not None or text_layers is not None) else None
        if limit is not None and self.depth > limit:
            raise ConfigError(f"prompt depth {self.depth} exceeds tower depth {limit}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


class PromptBank(nn.Module):
    """Per-tower, per-layer learnable tokens; layer ``i`` holds an n_tokens x width array."""

    def __init__(self, cfg: PromptConfig, width: int):
        super().__init__()
        self.cfg = cfg
        self.visual = nn.ParameterList(
            [nn.Parameter(torch.zeros(cfg.n_vision_tokens, width)) for _ in range(cfg.depth)])
        self.text = nn.ParameterList(
            [nn.Parameter(torch.zeros(cfg.n_text_tokens, width)) for _ in range(cfg.depth)])


def inject(layer_index: int, tokens: torch.Tensor, bank, n_layers: int | None = None) -> torch.Tensor:
    """Place prompt tokens in front of the content tokens entering ``layer_index``.

    Layer 0 receives content only and gets ``bank[0]`` prepended. For
    ``0 < layer_index < len(bank)`` the first ``n`` slots (the previous layer's
    prompt outputs) are dropped and replaced by ``bank[layer_index]``. Deeper
    layers pass the sequence through unchanged.
    """
    if n_layers is not None and not 0 <= layer_index < n_layers:
        raise ConfigError(f"layer_index {layer_index} outside tower of depth {n_layers}")
    if bank is None or len(bank) == 0 or bank[0].shape[0] == 0:
        return tokens
    n, width = bank[0].shape
    if width != tokens.shape[-1]:
        raise ShapeError(f"prompt width {width} != token width {tokens.shape[-1]}")
    if layer_index >= len(bank):
        return tokens
    fresh = bank[layer_index].to(tokens.dtype).unsqueeze(0).expand(tokens.shape[0], n, width)
    content = tokens if layer_index == 0 else tokens[:, n:]
    return torch.cat([fresh, content], dim=1)


def attach_prompts(model, cfg: PromptConfig, seed: int = 0):
    """Return a copy of ``model`` carrying freshly initialised prompt banks.

    Base parameters are copied bit-for-bit; only ``prompt.*`` entries are new.
    """
    if getattr(model, "prompt", None) is not None or any(
            n.startswith(PROMPT_PREFIX) for n, _ in model.named_parameters()):
        raise DuplicateParameter("model already carries prompt parameters")
    cfg.validate(model.config.vision.layers, model.config.text.layers)
    out = copy.deepcopy(model)
    dtype = next(model.parameters()).dtype
    bank = PromptBank(cfg, model.config.embed_dim).to(dtype)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for _, p in sorted(bank.named_parameters()):
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(dtype) * cfg.init_std)
    out.prompt = bank
    return out


@dataclass(frozen=True)
class FreezeMask:
    """Total classification of parameter names into trainable / frozen."""

    flags: dict

    def __call__(self, name: str) -> bool:
        return self.flags[name]

    @property
    def trainable_names(self) -> list[str]:
        return [n for n, t in self.flags.items() if t]

    @property
    def frozen_names(self) -> list[str]:
        return [n for n, t in self.flags.items() if not t]

    def covers(self, model) -> bool:
        return set(self.flags) == {n for n, _ in model.named_parameters()}

    def apply(self, model):
        for name, p in model.named_parameters():
            p.requires_grad_(self.flags[name])
        return model

    def trainable_count(self, model) -> int:
        return sum(p.numel() for n, p in model.named_parameters() if self.flags[n])


def mask_from_predicate(model, predicate) -> FreezeMask:
    return FreezeMask({name: bool(predicate(name)) for name, _ in model.named_parameters()})


def freeze_base(model) -> FreezeMask:
    if getattr(model, "prompt", None) is None:
        raise ConfigError("freeze_base requires attached prompts")
    return mask_from_predicate(model, lambda n: n.startswith(PROMPT_PREFIX))
