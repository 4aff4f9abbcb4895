"""Temporal pooling, temperature-scaled cosine logits, the contrastive
objective and the three frame-fusion mechanisms."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import torch

from .errors import EmptyVideo, EmptyViews, InvalidMode, InvalidTemperature, ShapeError, ZeroNorm


class FusionMode(str, Enum):
    EMBEDDING = "embedding"
    DECISION = "decision"
    IMAGE = "image"

    @classmethod
    def parse(cls, mode) -> "FusionMode":
        try:
            return cls(mode)
        except ValueError:
            raise InvalidMode(f"unknown fusion mode {mode!r}") from None


@dataclass
class LogitMatrix:
    values: torch.Tensor  # B x K
    temperature_applied: bool = True
    # image mode only: row r of ``values`` belongs to video frame_to_video[r]
    frame_to_video: torch.Tensor | None = None


def _t(x):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def temporal_pool(x) -> torch.Tensor:
    """Mean over the frame axis (-2): T x D -> D, or B x T x D -> B x D."""
    x = _t(x)
    if x.shape[-2] == 0:
        raise EmptyVideo("cannot pool a video with zero frames")
    return x.mean(dim=-2)


def _unit(x, dim=-1):
    norm = x.norm(dim=dim, keepdim=True)
    if (norm == 0).any():
        raise ZeroNorm("cosine similarity of a zero vector")
    return x / norm


def cosine_sim(u, v) -> torch.Tensor:
    u, v = _t(u), _t(v)
    return (_unit(u) * _unit(v)).sum(-1).clamp(-1.0, 1.0)


def _check_tau(tau):
    tau_t = _t(tau)
    if not torch.all(tau_t > 0):
        raise InvalidTemperature(f"temperature must be positive, got {tau}")
    return tau_t


def logits(videos, texts, tau) -> LogitMatrix:
    """Entry (i, j) = cos(videos[i], texts[j]) / tau; leading batch axes broadcast."""
    tau = _check_tau(tau)
    videos, texts = _t(videos), _t(texts)
    if videos.shape[-1] != texts.shape[-1]:
        raise ShapeError(f"embedding widths differ: {videos.shape[-1]} vs {texts.shape[-1]}")
    sims = _unit(videos) @ _unit(texts).transpose(-1, -2)
    return LogitMatrix(sims / tau, True)


def contrastive_loss(logit_matrix, reduction: str = "mean") -> torch.Tensor:
    """Video-to-text cross-entropy with row i's positive at column i.

    ``reduction`` is "mean" (default, used for optimisation) or "sum" (the raw
    batch sum).
    """
    z = logit_matrix.values if isinstance(logit_matrix, LogitMatrix) else _t(logit_matrix)
    if z.ndim != 2 or z.shape[0] != z.shape[1]:
        raise ShapeError(f"contrastive loss needs a square matrix, got {tuple(z.shape)}")
    z = z - z.max(dim=1, keepdim=True).values.detach()
    per_row = torch.logsumexp(z, dim=1) - z.diagonal()
    if reduction == "sum":
        return per_row.sum()
    if reduction == "mean":
        return per_row.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def fuse_and_score(frames, texts, tau, mode) -> LogitMatrix:
    """Score B videos (B x T x D frame embeddings) against K texts.

    embedding: pool frames then score. decision: score each frame then average
    the logits. image: return the unfused (B*T) x K per-frame logits and the
    frame -> video map; use :func:`video_logits` to average them for inference.
    """
    mode = FusionMode.parse(mode)
    frames, texts = _t(frames), _t(texts)
    if frames.ndim == 2:
        frames = frames.unsqueeze(0)
    if frames.shape[-2] == 0:
        raise EmptyVideo("cannot score a video with zero frames")
    if mode is FusionMode.EMBEDDING:
        return logits(temporal_pool(frames), texts, tau)
    per_frame = logits(frames, texts, tau).values  # B x T x K
    if mode is FusionMode.DECISION:
        return LogitMatrix(per_frame.mean(dim=1), True)
    b, t = frames.shape[:2]
    index = torch.arange(b).repeat_interleave(t)
    return LogitMatrix(per_frame.reshape(b * t, -1), True, index)


def video_logits(scored: LogitMatrix) -> torch.Tensor:
    """Collapse per-frame logits to per-video logits by averaging; no-op otherwise."""
    if scored.frame_to_video is None:
        return scored.values
    idx = scored.frame_to_video
    n = int(idx.max()) + 1
    sums = torch.zeros(n, scored.values.shape[1], dtype=scored.values.dtype).index_add(0, idx, scored.values)
    counts = torch.bincount(idx, minlength=n).to(sums.dtype)
    return sums / counts[:, None]


def multi_view_logits(view_logits) -> torch.Tensor:
    views = [_t(v) for v in view_logits]
    if not views:
        raise EmptyViews("need at least one view")
    shape = views[0].shape
    if any(v.shape != shape for v in views):
        raise ShapeError("all views must share one shape")
    return torch.stack(views).mean(dim=0)
