"""Optimisation loop for the tuning regimes, bridge-and-prompt, and checkpoints."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .encoders import MIN_TEMPERATURE, DualEncoder, ModelConfig, parameter_store
from .errors import ConfigError, DataError, IntegrityError, TrainingDiverged, VocabError
from .fusion import FusionMode, contrastive_loss, fuse_and_score, logits
from .prompting import PROMPT_PREFIX, PromptBank, PromptConfig, attach_prompts, freeze_base, mask_from_predicate
from .tokenizer import Vocabulary, tokenize_classes
from .videogen import VideoDataset, train_clip

log = logging.getLogger(__name__)

REGIMES = ("full_ft", "image_ft", "text_ft", "prompt_only", "frozen")
CHECKPOINT_MAGIC = b"VIDCLIP-CKPT\n"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "full_ft"
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float | None = None  # None -> 5e-3 for prompt_only, else 5e-4
    weight_decay: float = 0.001
    fusion: str = "embedding"
    frames: int = 8
    seed: int = 0
    crop_size: int = 32
    betas: tuple = (0.9, 0.98)
    eps: float = 1e-8
    warmup_fraction: float = 0.1
    grad_clip: float = 1.0
    stage1_checkpoint: str | None = None

    def __post_init__(self):
        if self.learning_rate is None:
            object.__setattr__(self, "learning_rate", 5e-3 if self.regime == "prompt_only" else 5e-4)

    def validate(self) -> "TrainConfig":
        if self.regime not in REGIMES:
            raise ConfigError(f"train.regime: unknown regime {self.regime!r}")
        FusionMode.parse(self.fusion)
        if self.learning_rate < 0:
            raise ConfigError("train.learning_rate must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.frames < 1:
            raise ConfigError("train.epochs >= 0, batch_size >= 1 and frames >= 1 required")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    def digest(self) -> str:
        return config_hash(self.to_dict())


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


# --- freeze masks ------------------------------------------------------------------

def regime_mask(regime: str, model: DualEncoder):
    if regime == "full_ft":
        return mask_from_predicate(model, lambda n: True)
    if regime == "image_ft":
        return mask_from_predicate(model, lambda n: n.startswith("visual.") or n == "logit_scale")
    if regime == "text_ft":
        return mask_from_predicate(model, lambda n: n.startswith("text.") or n == "logit_scale")
    if regime == "prompt_only":
        return freeze_base(model)
    if regime == "frozen":
        return mask_from_predicate(model, lambda n: False)
    raise ConfigError(f"unknown regime {regime!r}")


def _decays(name: str, p: torch.Tensor) -> bool:
    # no decay on logit_scale, biases, norm gains or prompt banks
    return p.ndim >= 2 and not name.startswith(PROMPT_PREFIX)


def make_optimizer(model, mask, cfg: TrainConfig):
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if mask(name) and p.numel():
            (decay if _decays(name, p) else no_decay).append(p)
    if not decay and not no_decay:
        return None
    groups = [{"params": decay, "weight_decay": cfg.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW([g for g in groups if g["params"]], lr=cfg.learning_rate,
                             betas=tuple(cfg.betas), eps=cfg.eps)


def lr_factor(step: int, total: int, warmup_fraction: float) -> float:
    """Linear warmup over the first ``warmup_fraction`` of steps, then cosine decay to 0."""
    warmup = max(1, math.ceil(warmup_fraction * total)) if warmup_fraction > 0 else 0
    if step < warmup:
        return (step + 1) / warmup
    progress = (step - warmup) / max(1, total - warmup)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


# --- training ----------------------------------------------------------------------

@dataclass
class TrainResult:
    model: DualEncoder
    losses: list  # per-step batch-mean loss
    loss_sums: list  # per-step raw batch-sum loss

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def batch_loss(model: DualEncoder, clips, labels, class_tokens: dict, fusion, reduction="mean"):
    """Contrastive loss of one batch; row i's positive is its own label text."""
    frames = model.encode_video_batch(clips)  # B x T x D
    uniq, inverse = np.unique(labels, return_inverse=True)
    texts = model.encode_token_sequences([class_tokens[int(c)] for c in uniq])[torch.as_tensor(inverse)]
    tau = model.temperature
    mode = FusionMode.parse(fusion)
    if mode is FusionMode.IMAGE:
        # every frame is its own image paired with its own copy of the label text
        b, t, d = frames.shape
        z = logits(frames.reshape(b * t, d), texts.repeat_interleave(t, dim=0), tau)
    else:
        z = fuse_and_score(frames, texts, tau, mode)
    return contrastive_loss(z, reduction)


def class_tokens_for(model: DualEncoder, manifest, class_ids) -> dict:
    names = [manifest.spec(c).name for c in class_ids]
    missing = model.vocab.missing_words(names)
    if missing:
        raise VocabError(f"dataset classes use words outside the vocabulary: {sorted(missing)}")
    return dict(zip(class_ids, tokenize_classes(names, model.vocab)))


def train(config: TrainConfig, model: DualEncoder, dataset: VideoDataset) -> TrainResult:
    """Optimise ``model`` in place under the regime's freeze mask."""
    config.validate()
    if config.regime == "prompt_only" and not (config.stage1_checkpoint or model.provenance.get("stage1")):
        raise ConfigError("prompt_only training needs a stage-1 (bridged) model")
    if len(dataset) == 0:
        raise DataError("empty training set")
    class_tokens = class_tokens_for(model, dataset.manifest, dataset.class_ids)
    mask = regime_mask(config.regime, model)
    mask.apply(model)
    opt = make_optimizer(model, mask, config)
    trainable = [p for n, p in model.named_parameters() if mask(n)]

    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    n = len(dataset)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = steps_per_epoch * config.epochs
    scheduler = None
    if opt is not None:
        scheduler = torch.optim.lr_scheduler.LambdaLR(
            opt, lambda s: lr_factor(s, total, config.warmup_fraction))
    max_scale = math.log(1 / MIN_TEMPERATURE)

    losses, sums = [], []
    model.train()
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for s in range(steps_per_epoch):
            idx = order[s * config.batch_size:(s + 1) * config.batch_size]
            clips = np.stack([train_clip(dataset.frames[i], config.frames, config.crop_size, rng) for i in idx])
            labels = dataset.labels[idx]
            with torch.set_grad_enabled(opt is not None):
                loss_sum = batch_loss(model, clips, labels, class_tokens, config.fusion, "sum")
                loss = loss_sum / len(idx)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {s}",
                                       step=len(losses), snapshot=parameter_store(model))
            if opt is not None:
                opt.zero_grad(set_to_none=True)
                loss.backward()
                if config.grad_clip:
                    torch.nn.utils.clip_grad_norm_(trainable, config.grad_clip)
                opt.step()
                scheduler.step()
                with torch.no_grad():
                    model.logit_scale.clamp_(max=max_scale)
            losses.append(float(loss.detach()))
            sums.append(float(loss_sum.detach()))
        log.debug("epoch %d loss %.4f", epoch, np.mean(losses[-steps_per_epoch:]))
    model.eval()
    for p in model.parameters():
        p.requires_grad_(True)
    model.provenance = dict(model.provenance)
    model.provenance.setdefault("runs", []).append({
        "regime": config.regime, "config_hash": config.digest(), "epochs": config.epochs,
        "final_loss": losses[-1] if losses else None, "config": config.to_dict()})
    return TrainResult(model, losses, sums)


def bridge_and_prompt(model: DualEncoder, source: VideoDataset, target: VideoDataset,
                      stage1: TrainConfig, stage2: TrainConfig, prompts: PromptConfig = PromptConfig(),
                      prompt_seed: int = 0):
    """Stage 1: full fine-tune on ``source``. Stage 2: prompt-only tuning on ``target``.

    Returns (stage-1 model, final prompted model, stage-1 result, stage-2 result).
    The stage-1 model is left untouched by stage 2.
    """
    if stage1.regime != "full_ft" or stage2.regime != "prompt_only":
        raise ConfigError("bridge_and_prompt expects full_ft then prompt_only")
    missing = model.vocab.missing_words(target.manifest.spec(c).name for c in target.class_ids)
    if missing:
        raise VocabError(f"target classes outside the shared vocabulary: {sorted(missing)}")
    r1 = train(stage1, model, source)
    stage1_model = r1.model
    stage1_model.provenance["stage1"] = {"config_hash": stage1.digest(), "final_loss": r1.final_loss}
    prompted = attach_prompts(stage1_model, prompts, prompt_seed)
    prompted.provenance = json.loads(json.dumps(stage1_model.provenance))
    r2 = train(stage2, prompted, target)
    prompted.provenance["stage2"] = {"config_hash": stage2.digest(), "final_loss": r2.final_loss,
                                     "prompts": prompts.to_dict()}
    return stage1_model, prompted, r1, r2


def run_stage2(config: TrainConfig, dataset: VideoDataset, prompts: PromptConfig = PromptConfig(),
               prompt_seed: int = 0) -> TrainResult:
    """Prompt-only tuning starting from ``config.stage1_checkpoint`` on disk."""
    if not config.stage1_checkpoint:
        raise ConfigError("stage 2 requires a stage-1 checkpoint")
    base = load_checkpoint(config.stage1_checkpoint)
    base.provenance.setdefault("stage1", {"checkpoint": str(config.stage1_checkpoint)})
    prompted = base if base.prompt is not None else attach_prompts(base, prompts, prompt_seed)
    prompted.provenance = base.provenance
    return train(config, prompted, dataset)


# --- checkpoints -------------------------------------------------------------------
#
# Layout: CHECKPOINT_MAGIC, one line of JSON (the manifest), then the
# concatenated little-endian float32 payloads in manifest order. Offsets are
# relative to the first payload byte.

def checkpoint_bytes(model: DualEncoder) -> bytes:
    tensors, chunks, offset = [], [], 0
    for name, p in model.named_parameters():
        arr = np.asarray(p.detach().cpu().numpy(), dtype="<f4")  # keeps 0-d shapes
        raw = arr.tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": "<f4",
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    prompt = model.prompt.cfg.to_dict() if model.prompt is not None else None
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "prompt_config": prompt,
        "vocabulary": model.vocab.to_dict() if model.vocab is not None else None,
        "provenance": model.provenance,
        "tensors": tensors,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    return CHECKPOINT_MAGIC + json.dumps(header, sort_keys=True, default=str).encode() + b"\n" + payload


def save_checkpoint(model: DualEncoder, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model))
    return path


def read_checkpoint_header(path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise IntegrityError(f"{path}: not a checkpoint file")
    rest = data[len(CHECKPOINT_MAGIC):]
    line, _, payload = rest.partition(b"\n")
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{path}: unreadable manifest") from exc
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise IntegrityError(f"{path}: payload digest mismatch")
    return header, payload


def load_checkpoint(path) -> DualEncoder:
    header, payload = read_checkpoint_header(path)
    if header["format_version"] != CHECKPOINT_VERSION:
        raise IntegrityError(f"unsupported checkpoint version {header['format_version']}")
    vocab = Vocabulary.from_dict(header["vocabulary"]) if header["vocabulary"] else None
    model = DualEncoder(ModelConfig.from_dict(header["model_config"]), vocab)
    if header["prompt_config"] is not None:
        model.prompt = PromptBank(PromptConfig(**header["prompt_config"]), model.config.embed_dim)
    params = dict(model.named_parameters())
    if {t["name"] for t in header["tensors"]} != set(params):
        raise IntegrityError("checkpoint tensor names do not match the model")
    with torch.no_grad():
        for t in header["tensors"]:
            raw = payload[t["offset"]:t["offset"] + t["nbytes"]]
            arr = np.frombuffer(raw, dtype="<f4").reshape(t["shape"])
            if tuple(params[t["name"]].shape) != arr.shape:
                raise IntegrityError(f"{t['name']}: shape {arr.shape} != model {tuple(params[t['name']].shape)}")
            params[t["name"]].copy_(torch.from_numpy(arr.astype(np.float32)))
    model.provenance = header.get("provenance") or {}
    model.eval()
    return model


def checkpoint_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
