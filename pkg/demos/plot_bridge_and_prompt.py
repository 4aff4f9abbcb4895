"""
Bridge, then prompt
===================

Stage one fine-tunes the whole model on source classes (the bridge). Stage
two freezes it and learns only a few prompt vectors from K=2 clips per target
class. The stage-one weights come out of stage two untouched.
"""

import torch

from vidclip.encoders import build_model
from vidclip.prompting import PromptConfig
from vidclip.protocols import predict, sample_k_shot, top_k_accuracy
from vidclip.tokenizer import build_tokenizer
from vidclip.trainer import TrainConfig, bridge_and_prompt
from vidclip.videogen import default_roster, make_manifest, materialize

roster = default_roster()
vocab = build_tokenizer([c.name for c in roster])
# bridge on appearance and trajectory classes; the compositional ones are the target
source = make_manifest([c for c in roster if c.family != "compositional"], seed=0)
target = make_manifest([c for c in roster if c.family == "compositional"], seed=1)

shots = materialize(target, "train", sample_k_shot(target, k=2, seed=0))
stage1, prompted, _, _ = bridge_and_prompt(
    build_model(vocab, seed=0), materialize(source, "train"), shots,
    TrainConfig(), TrainConfig(regime="prompt_only", learning_rate=5e-3, epochs=30),
    PromptConfig(n_vision_tokens=8, n_text_tokens=4, depth=4))

###############################################################################
# Compare on the held-out target classes.

val = materialize(target, "val")
for label, model in (("stage 1", stage1), ("prompted", prompted)):
    z, _, y = predict(model, val, target.class_ids)
    print(f"{label:>9}: {top_k_accuracy(z, y):.1f}")

before = dict(stage1.named_parameters())
print("base weights unchanged:",
      all(torch.equal(p, before[n]) for n, p in prompted.named_parameters() if n in before))
