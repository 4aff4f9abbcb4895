"""
Where to fuse time
==================

Train the same small dual encoder three times, fusing the frames at the
image, embedding or decision level, and compare top-1 on the compositional
classes. Takes a few minutes on one core.
"""

import matplotlib.pyplot as plt

from vidclip.encoders import build_model
from vidclip.protocols import predict, top_k_accuracy
from vidclip.tokenizer import build_tokenizer
from vidclip.trainer import TrainConfig, train
from vidclip.videogen import default_roster, make_manifest, materialize

roster = default_roster()
vocab = build_tokenizer([c.name for c in roster])
classes = [c for c in roster if c.family == "compositional"]
manifest = make_manifest(classes, seed=0)
train_set, val_set = materialize(manifest, "train"), materialize(manifest, "val")

###############################################################################
# The frozen model is the floor every mode should clear.

z, _, y = predict(build_model(vocab, seed=0), val_set, manifest.class_ids)
scores = {"frozen": top_k_accuracy(z, y)}

for mode in ("image", "embedding", "decision"):
    model = build_model(vocab, seed=0)
    train(TrainConfig(fusion=mode), model, train_set)
    z, _, y = predict(model, val_set, manifest.class_ids, fusion=mode)
    scores[mode] = top_k_accuracy(z, y)
    print(f"{mode:>10}: {scores[mode]:.1f}")

plt.bar(list(scores), list(scores.values()))
plt.ylabel("top-1 (%)")
plt.show()
