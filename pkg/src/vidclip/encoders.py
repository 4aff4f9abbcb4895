"""Miniature image-text dual encoder.

A ViT embeds single frames and a causal text transformer embeds prompted
class names; both project into a shared ``embed_dim`` space. Frames of a video
are encoded independently as a batch of images.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
from einops import rearrange

from .errors import ConfigError, ShapeError, TokenOverflow, VocabError
from .prompting import inject
from .tokenizer import CLIP_MAX_TOKENS, TokenSequence, tokenize_classes

INIT_TEMPERATURE = 0.07
MIN_TEMPERATURE = 0.01


@dataclass(frozen=True)
class VisionConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    layers: int = 4
    heads: int = 4
    mlp_ratio: int = 4

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass(frozen=True)
class TextConfig:
    vocab_size: int = 32
    max_tokens: int = 16
    layers: int = 4
    heads: int = 4
    mlp_ratio: int = 4


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    vision: VisionConfig = field(default_factory=VisionConfig)
    text: TextConfig = field(default_factory=TextConfig)
    seed: int = 0

    def validate(self) -> "ModelConfig":
        v, t, d = self.vision, self.text, self.embed_dim
        if d <= 0:
            raise ConfigError("embed_dim must be positive")
        if v.image_size % v.patch_size:
            raise ConfigError(f"image_size {v.image_size} not divisible by patch_size {v.patch_size}")
        if d % v.heads or d % t.heads:
            raise ConfigError(f"embed_dim {d} not divisible by head counts ({v.heads}, {t.heads})")
        if not 3 <= t.max_tokens <= CLIP_MAX_TOKENS:
            raise ConfigError(f"max_tokens must lie in [3, {CLIP_MAX_TOKENS}]")
        if min(v.layers, t.layers) < 1:
            raise ConfigError("each tower needs at least one layer")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        vision = VisionConfig(**d.pop("vision", {}))
        text = TextConfig(**d.pop("text", {}))
        return cls(vision=vision, text=text, **d)


@dataclass
class FrameEmbeddings:
    values: torch.Tensor  # T x D
    source_video_id: object = None


@dataclass
class TextEmbedding:
    value: torch.Tensor  # D
    class_id: object = None


def patchify(frame, patch_size: int):
    """Split an H x W x C frame (or a leading batch of them) into row-major patches.

    Each patch is flattened in (row, col, channel) order, giving an
    N x (P*P*C) matrix with N = (H/P) * (W/P).
    """
    is_np = isinstance(frame, np.ndarray)
    h, w = frame.shape[-3], frame.shape[-2]
    if h % patch_size or w % patch_size:
        raise ShapeError(f"frame {h}x{w} not divisible into {patch_size}px patches")
    pattern = "... (h p1) (w p2) c -> ... (h w) (p1 p2 c)"
    x = torch.as_tensor(frame) if is_np else frame
    out = rearrange(x, pattern, p1=patch_size, p2=patch_size)
    return out.numpy() if is_np else out


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, mask=None):
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q, k, v = (rearrange(t, "b n (h d) -> b h n d", h=self.heads) for t in (q, k, v))
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        attn = scores.softmax(dim=-1)
        return self.out(rearrange(attn @ v, "b h n d -> b n (h d)"))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.ln_1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.ln_2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x, mask=None):
        x = x + self.attn(self.ln_1(x), mask)
        return x + self.mlp(self.ln_2(x))


class VisionTower(nn.Module):
    def __init__(self, cfg: VisionConfig, width: int):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.patch_size ** 2 * cfg.channels, width, bias=False)
        self.class_token = nn.Parameter(torch.zeros(width))
        self.pos_embed = nn.Parameter(torch.zeros(cfg.n_patches + 1, width))
        self.ln_pre = nn.LayerNorm(width)
        self.blocks = nn.ModuleList([Block(width, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers)])
        self.ln_post = nn.LayerNorm(width)
        self.proj = nn.Parameter(torch.zeros(width, width))

    def forward(self, images, bank=None):
        # images: N x H x W x C
        x = self.patch_embed(patchify(images, self.cfg.patch_size))
        cls = self.class_token.expand(x.shape[0], 1, -1)
        x = self.ln_pre(torch.cat([cls, x], dim=1) + self.pos_embed)
        for i, blk in enumerate(self.blocks):
            x = blk(inject(i, x, bank))
        n_prompt = 0 if not bank else bank[0].shape[0]
        return self.ln_post(x[:, n_prompt]) @ self.proj


class TextTower(nn.Module):
    def __init__(self, cfg: TextConfig, width: int):
        super().__init__()
        self.cfg = cfg
        self.token_embed = nn.Embedding(cfg.vocab_size, width)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.max_tokens, width))
        self.blocks = nn.ModuleList([Block(width, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers)])
        self.ln_final = nn.LayerNorm(width)
        self.proj = nn.Parameter(torch.zeros(width, width))

    def forward(self, ids, eos_index, bank=None):
        # ids: B x L token ids, eos_index: B
        n_prompt = 0 if not bank else bank[0].shape[0]
        length = ids.shape[1] - n_prompt
        if ids.shape[1] != self.cfg.max_tokens:
            raise ShapeError(f"token length {ids.shape[1]} != max_tokens {self.cfg.max_tokens}")
        if int(eos_index.max()) >= length:
            raise TokenOverflow(
                f"eos at {int(eos_index.max())} does not fit beside {n_prompt} prompt tokens")
        x = self.token_embed(ids[:, :length]) + self.pos_embed[:length]
        mask = self._mask(eos_index, n_prompt, length)
        for i, blk in enumerate(self.blocks):
            x = blk(inject(i, x, bank), mask)
        x = self.ln_final(x)
        rows = torch.arange(x.shape[0])
        return x[rows, n_prompt + eos_index] @ self.proj

    @staticmethod
    def _mask(eos_index, n_prompt, length):
        # True = may attend. Causal over [prompts, content]; content PAD keys hidden.
        total = n_prompt + length
        causal = torch.ones(total, total, dtype=torch.bool).tril()
        pos = torch.arange(total)
        is_pad = (pos[None, :] - n_prompt) > eos_index[:, None]
        return (causal[None] & ~is_pad[:, None, :]).unsqueeze(1)


class DualEncoder(nn.Module):
    """Vision + text towers and the learnable log inverse temperature.

    Parameter names form the checkpoint namespace: ``visual.*``, ``text.*``,
    ``logit_scale`` and, once prompts are attached, ``prompt.*``.
    """

    def __init__(self, config: ModelConfig, vocab=None):
        super().__init__()
        self.config = config.validate()
        if vocab is not None and len(vocab) > config.text.vocab_size:
            raise ConfigError(f"vocabulary of {len(vocab)} words exceeds vocab_size {config.text.vocab_size}")
        self.vocab = vocab
        self.provenance: dict = {}
        self.visual = VisionTower(config.vision, config.embed_dim)
        self.text = TextTower(config.text, config.embed_dim)
        self.logit_scale = nn.Parameter(torch.tensor(math.log(1 / INIT_TEMPERATURE)))
        self.prompt = None
        self.reset_parameters()

    def reset_parameters(self):
        gen = torch.Generator().manual_seed(int(self.config.seed))
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name == "logit_scale":
                    p.fill_(math.log(1 / INIT_TEMPERATURE))
                elif name.endswith(".bias"):
                    p.zero_()
                elif ".ln_" in name:
                    p.fill_(1.0)
                else:
                    nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04, generator=gen)

    def _bank(self, tower: str):
        if self.prompt is None:
            return None
        return getattr(self.prompt, tower)

    @property
    def temperature(self) -> torch.Tensor:
        return 1.0 / self.scale

    @property
    def scale(self) -> torch.Tensor:
        return self.logit_scale.clamp(max=math.log(1 / MIN_TEMPERATURE)).exp()

    def encode_images(self, images) -> torch.Tensor:
        images = torch.as_tensor(images, dtype=self.logit_scale.dtype)
        v = self.config.vision
        if images.ndim != 4 or tuple(images.shape[1:]) != (v.image_size, v.image_size, v.channels):
            raise ShapeError(
                f"expected N x {v.image_size} x {v.image_size} x {v.channels}, got {tuple(images.shape)}")
        return self.visual(images, self._bank("visual"))

    def encode_video_batch(self, videos) -> torch.Tensor:
        """B x T x H x W x C -> B x T x D, every frame encoded as its own image."""
        videos = torch.as_tensor(videos, dtype=self.logit_scale.dtype)
        if videos.ndim != 5:
            raise ShapeError(f"expected B x T x H x W x C, got {tuple(videos.shape)}")
        b, t = videos.shape[:2]
        return self.encode_images(videos.reshape(b * t, *videos.shape[2:])).reshape(b, t, -1)

    def encode_tokens(self, ids, eos_index) -> torch.Tensor:
        ids = torch.as_tensor(np.asarray(ids), dtype=torch.long)
        eos_index = torch.as_tensor(np.asarray(eos_index), dtype=torch.long)
        if ids.ndim != 2:
            raise ShapeError("ids must be B x max_tokens")
        if (eos_index < 0).any() or (eos_index >= ids.shape[1]).any():
            raise ShapeError("eos_index out of range")
        return self.text(ids, eos_index, self._bank("text"))

    def encode_token_sequences(self, seqs) -> torch.Tensor:
        ids = np.stack([s.ids for s in seqs])
        eos = np.array([s.eos_index for s in seqs])
        return self.encode_tokens(ids, eos)


def build_model(vocab, embed_dim: int = 64, image_size: int = 32, patch_size: int = 8, layers: int = 4,
                heads: int = 4, mlp_ratio: int = 4, seed: int = 0, channels: int = 3) -> DualEncoder:
    """Dual encoder sized to ``vocab``, with both towers sharing depth and head count."""
    cfg = ModelConfig(
        embed_dim=embed_dim,
        vision=VisionConfig(image_size, channels, patch_size, layers, heads, mlp_ratio),
        text=TextConfig(len(vocab), vocab.max_tokens, layers, heads, mlp_ratio),
        seed=seed)
    return DualEncoder(cfg, vocab)


def class_text_embeddings(model: DualEncoder, class_names) -> torch.Tensor:
    """K x D text embeddings of the prompted class names (needs ``model.vocab``)."""
    if model.vocab is None:
        raise ConfigError("model has no tokenizer vocabulary")
    missing = model.vocab.missing_words(class_names)
    if missing:
        raise VocabError(f"words not in the model vocabulary: {sorted(missing)}")
    return model.encode_token_sequences(tokenize_classes(class_names, model.vocab))


def encode_frames(model: DualEncoder, video_frames, video_id=None) -> FrameEmbeddings:
    frames = torch.as_tensor(video_frames, dtype=model.logit_scale.dtype)
    if frames.ndim != 4:
        raise ShapeError(f"expected T x H x W x C frames, got {tuple(frames.shape)}")
    return FrameEmbeddings(model.encode_images(frames), video_id)


def encode_text(model: DualEncoder, tokens: TokenSequence, class_id=None) -> TextEmbedding:
    return TextEmbedding(model.encode_token_sequences([tokens])[0], class_id)


def parameter_store(model: nn.Module) -> dict[str, np.ndarray]:
    """Snapshot every named parameter as a detached numpy array."""
    return {name: p.detach().cpu().numpy().copy() for name, p in model.named_parameters()}
