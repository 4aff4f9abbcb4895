"""Adapting a small image-text dual encoder to video classification by
fine-tuning with temporal pooling, plus prompt learning on a frozen bridge."""
from .encoders import DualEncoder, ModelConfig, build_model, class_text_embeddings, encode_frames, encode_text
from .fusion import FusionMode, contrastive_loss, cosine_sim, fuse_and_score, logits, multi_view_logits, temporal_pool
from .prompting import PromptConfig, attach_prompts, freeze_base, inject
from .protocols import (
    EvalReport,
    SplitSpec,
    cluster_quality,
    harmonic_mean,
    make_base_novel_split,
    predict,
    run_protocol,
    sample_k_shot,
    top_k_accuracy,
)
from .tokenizer import Vocabulary, build_tokenizer, tokenize
from .trainer import TrainConfig, bridge_and_prompt, load_checkpoint, regime_mask, save_checkpoint, train
from .videogen import DatasetManifest, GeneratorConfig, ViewSet, default_roster, generate, make_manifest, materialize

__version__ = "0.1.0"
