"""Evaluation settings (zero-shot, base-to-novel, few-shot, fully-supervised)
and their metrics."""
from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .encoders import DualEncoder, class_text_embeddings
from .errors import ConfigError, DataError, VocabError
from .fusion import fuse_and_score, multi_view_logits, temporal_pool, video_logits
from .videogen import DatasetManifest, VideoDataset, ViewSet, make_views, materialize

SETTINGS = ("zero_shot", "base_to_novel", "few_shot", "fully_supervised")
SINGLE_VIEW = ViewSet(spatial_crops=1, temporal_clips=1, crop_size=32, frames_per_clip=8)
MULTI_VIEW = ViewSet(spatial_crops=2, temporal_clips=2, crop_size=32, frames_per_clip=4)


def default_views(setting: str) -> ViewSet:
    return MULTI_VIEW if setting == "fully_supervised" else SINGLE_VIEW


# --- splits ------------------------------------------------------------------------

def make_base_novel_split(class_frequencies: dict) -> tuple[list, list]:
    """Most frequent half (rounded up) -> base, the rest -> novel.

    Ties in frequency go to the smaller class id.
    """
    if not class_frequencies:
        raise ConfigError("empty class frequency map")
    if len(class_frequencies) < 2:
        raise ConfigError("base/novel split needs at least two classes")
    ranked = sorted(class_frequencies, key=lambda c: (-class_frequencies[c], c))
    n_base = math.ceil(len(ranked) / 2)
    return sorted(ranked[:n_base]), sorted(ranked[n_base:])


def sample_k_shot(manifest: DatasetManifest, k: int, seed: int = 0, split_index: int = 1,
                  class_ids=None) -> dict:
    """K training sample indices per class, as class_id -> sorted index list.

    Each class gets one seeded permutation of its training samples; split
    ``s`` takes the cyclic window of length K starting at (s - 1) * K, so
    different splits overlap as little as the class size allows.
    """
    if k < 1:
        raise ConfigError("K must be >= 1")
    if split_index < 1:
        raise ConfigError("split_index counts from 1")
    out = {}
    for cid in class_ids if class_ids is not None else manifest.class_ids:
        n = manifest.counts[cid]["train"]
        if n < k:
            raise DataError(f"class {cid} has {n} training samples < K={k}")
        perm = np.random.default_rng([int(seed), int(cid)]).permutation(n)
        start = ((split_index - 1) * k) % n
        out[cid] = sorted(int(perm[(start + j) % n]) for j in range(k))
    return out


@dataclass(frozen=True)
class SplitSpec:
    setting: str
    source_classes: tuple = ()
    target_classes: tuple = ()
    base_classes: tuple = ()
    novel_classes: tuple = ()
    shots: int | None = None
    seed: int = 0
    split_index: int = 1

    def validate(self) -> "SplitSpec":
        if self.setting not in SETTINGS:
            raise ConfigError(f"protocol.setting: unknown setting {self.setting!r}")
        src = set(self.source_classes)
        if self.setting == "zero_shot":
            if not self.target_classes:
                raise ConfigError("zero_shot needs target classes")
            overlap = src & set(self.target_classes)
            if overlap:
                raise ConfigError(f"zero_shot source and target classes overlap: {sorted(overlap)}")
        if self.setting == "base_to_novel":
            base, novel = set(self.base_classes), set(self.novel_classes)
            if base & novel:
                raise ConfigError("base and novel classes overlap")
            if src and base | novel != src:
                raise ConfigError("base and novel classes must cover the source classes")
            if not base or not novel:
                raise ConfigError("base_to_novel needs non-empty base and novel sets")
        if self.setting in ("few_shot", "base_to_novel") and (self.shots is None or self.shots < 1):
            raise ConfigError(f"{self.setting} needs shots >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        d = dict(d)
        for key in ("source_classes", "target_classes", "base_classes", "novel_classes"):
            d[key] = tuple(d.get(key, ()))
        return cls(**d)


# --- metrics -----------------------------------------------------------------------

def top_k_accuracy(logits, labels, k: int = 1) -> float:
    """Percent of rows whose label is among the k largest logits (ties -> lower index)."""
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or len(labels) != z.shape[0]:
        raise DataError("logits must be B x K with one label per row")
    if not 1 <= k <= z.shape[1]:
        raise ConfigError(f"k={k} outside [1, {z.shape[1]}]")
    if len(labels) and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise DataError("label outside the logit columns")
    if len(labels) == 0:
        return 0.0
    top = np.argsort(-z, axis=1, kind="stable")[:, :k]
    return 100.0 * float(np.mean((top == labels[:, None]).any(axis=1)))


def harmonic_mean(base_acc: float, novel_acc: float) -> float:
    """2ab / (a + b); defined as 0 when both accuracies are 0."""
    if base_acc < 0 or novel_acc < 0:
        raise DataError("accuracies must be non-negative")
    if base_acc + novel_acc == 0:
        return 0.0
    return 2.0 * base_acc * novel_acc / (base_acc + novel_acc)


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def cluster_quality(pred_labels, true_labels) -> tuple[float, float, float]:
    """Homogeneity, completeness and V-measure (natural-log entropies)."""
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    if pred.shape != true.shape or pred.ndim != 1:
        raise DataError("label arrays must be 1-D and of equal length")
    if len(true) == 0:
        raise DataError("label arrays must be non-empty")
    _, t_idx = np.unique(true, return_inverse=True)
    _, p_idx = np.unique(pred, return_inverse=True)
    joint = np.zeros((t_idx.max() + 1, p_idx.max() + 1))
    np.add.at(joint, (t_idx, p_idx), 1)
    n = joint.sum()
    h_true = _entropy(joint.sum(axis=1))
    h_pred = _entropy(joint.sum(axis=0))
    nz = joint > 0
    by_pred = np.broadcast_to(joint.sum(axis=0, keepdims=True), joint.shape)
    by_true = np.broadcast_to(joint.sum(axis=1, keepdims=True), joint.shape)
    h_true_given_pred = float(-(joint[nz] / n * np.log(joint[nz] / by_pred[nz])).sum())
    h_pred_given_true = float(-(joint[nz] / n * np.log(joint[nz] / by_true[nz])).sum())
    h = 1.0 if h_true == 0 else 1.0 - h_true_given_pred / h_true
    c = 1.0 if h_pred == 0 else 1.0 - h_pred_given_true / h_pred
    v = 0.0 if h + c == 0 else 2.0 * h * c / (h + c)
    return h, c, v


# --- inference ---------------------------------------------------------------------

@torch.no_grad()
def predict(model: DualEncoder, dataset: VideoDataset, class_ids, views: ViewSet = SINGLE_VIEW,
            fusion: str = "embedding", batch_size: int = 32):
    """Multi-view logits against ``class_ids`` plus pooled video embeddings.

    Returns (logits B x K, embeddings B x D, labels as column indices).
    """
    class_ids = list(class_ids)
    names = [dataset.manifest.spec(c).name for c in class_ids]
    texts = class_text_embeddings(model, names)
    column = {c: i for i, c in enumerate(class_ids)}
    if any(int(l) not in column for l in dataset.labels):
        raise DataError("dataset contains labels outside the scored classes")
    tau = model.temperature
    all_logits, all_emb = [], []
    for s in range(0, len(dataset), batch_size):
        clips = [make_views(dataset.frames[i], views) for i in range(s, min(s + batch_size, len(dataset)))]
        b, v = len(clips), views.n_views
        stacked = np.stack([view for video in clips for view in video])  # (b*v) x T x h x w x c
        frames = model.encode_video_batch(stacked)
        per_view = video_logits(fuse_and_score(frames, texts, tau, fusion)).reshape(b, v, -1)
        all_logits.append(multi_view_logits(list(per_view.transpose(0, 1))))
        all_emb.append(temporal_pool(frames).reshape(b, v, -1).mean(dim=1))
    labels = np.array([column[int(l)] for l in dataset.labels], dtype=np.int64)
    return (torch.cat(all_logits).double().numpy(), torch.cat(all_emb).double().numpy(), labels)


# --- reports -----------------------------------------------------------------------

@dataclass
class EvalReport:
    setting: str
    top1: float
    top5: float
    homogeneity: float
    completeness: float
    v_measure: float
    base_acc: float | None = None
    novel_acc: float | None = None
    hm: float | None = None
    per_split: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    config_hash: str | None = None
    seed: int | None = None
    label: str | None = None
    shots: int | None = None
    checkpoint_hash: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def _metrics(logits, labels, class_ids) -> dict:
    k = logits.shape[1]
    pred = np.argmax(logits, axis=1)
    h, c, v = cluster_quality(np.asarray(class_ids)[pred], np.asarray(class_ids)[labels])
    return {"top1": top_k_accuracy(logits, labels, 1), "top5": top_k_accuracy(logits, labels, min(5, k)),
            "homogeneity": h, "completeness": c, "v_measure": v}


def _aggregate(per_split: list) -> dict:
    keys = [k for k in per_split[0] if isinstance(per_split[0][k], (int, float)) and k != "split_index"]
    out = {}
    for key in keys:
        vals = np.array([s[key] for s in per_split], dtype=np.float64)
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0}
    return out


def check_vocabulary(model: DualEncoder, names):
    if model.vocab is None:
        raise VocabError("model has no tokenizer vocabulary")
    missing = model.vocab.missing_words(names)
    if missing:
        raise VocabError(f"target classes use words outside the checkpoint vocabulary: {sorted(missing)}")


def run_protocol(setting: SplitSpec, model: DualEncoder, source: DatasetManifest,
                 target: DatasetManifest | None = None, train_config=None, views: ViewSet | None = None,
                 fusion: str = "embedding", n_splits: int = 3, label: str | None = None) -> EvalReport:
    """Run one setting end to end and collect its metrics.

    If ``train_config`` is given, settings that train (few-shot, base-to-novel,
    fully-supervised) fine-tune a fresh copy of ``model`` per split with it;
    otherwise ``model`` is evaluated as-is on a single split.
    """
    from .trainer import train  # trainer depends on this module's siblings only

    setting = resolve_split(setting, source, target)
    views = views or default_views(setting.setting)
    eval_manifest = target if setting.setting == "zero_shot" else source
    eval_classes = setting.target_classes if setting.setting == "zero_shot" else (
        setting.source_classes or tuple(source.class_ids))
    check_vocabulary(model, [eval_manifest.spec(c).name for c in eval_classes])

    trains = train_config is not None and setting.setting != "zero_shot"
    splits = list(range(1, n_splits + 1)) if trains and setting.setting in ("few_shot", "base_to_novel") \
        else [setting.split_index]
    per_split = []
    for s in splits:
        m = model
        if trains:
            m = copy.deepcopy(model)
            if setting.setting == "fully_supervised":
                train_set = materialize(source.subset(eval_classes), "train")
            else:
                classes = setting.base_classes if setting.setting == "base_to_novel" else eval_classes
                sel = sample_k_shot(source, setting.shots, setting.seed, s, classes)
                train_set = materialize(source, "train", sel)
            train(train_config, m, train_set)
        row = {"split_index": s}
        if setting.setting == "base_to_novel":
            parts = {}
            for part, classes in (("base", setting.base_classes), ("novel", setting.novel_classes)):
                data = materialize(source.subset(classes), "val")
                z, _, y = predict(m, data, classes, views, fusion)
                parts[part] = (z, y, classes)
                row[f"{part}_acc"] = top_k_accuracy(z, y, 1)
            row["hm"] = harmonic_mean(row["base_acc"], row["novel_acc"])
            # overall metrics: each part scored within its own label space
            pooled_pred = np.concatenate([np.asarray(c)[np.argmax(z, 1)] for z, _, c in parts.values()])
            pooled_true = np.concatenate([np.asarray(c)[y] for _, y, c in parts.values()])
            h, c_, v = cluster_quality(pooled_pred, pooled_true)
            n_b, n_n = len(parts["base"][1]), len(parts["novel"][1])
            row["top1"] = (row["base_acc"] * n_b + row["novel_acc"] * n_n) / (n_b + n_n)
            row["top5"] = sum(top_k_accuracy(z, y, min(5, z.shape[1])) * len(y)
                              for z, y, _ in parts.values()) / (n_b + n_n)
            row.update(homogeneity=h, completeness=c_, v_measure=v)
        else:
            data = materialize(eval_manifest.subset(eval_classes), "val")
            z, _, y = predict(m, data, eval_classes, views, fusion)
            row.update(_metrics(z, y, eval_classes))
        per_split.append(row)

    agg = _aggregate(per_split)
    mean = {k: v["mean"] for k, v in agg.items()}
    report = EvalReport(
        setting=setting.setting, top1=mean["top1"], top5=mean["top5"], homogeneity=mean["homogeneity"],
        completeness=mean["completeness"], v_measure=mean["v_measure"], per_split=per_split, aggregate=agg,
        seed=setting.seed, label=label, shots=setting.shots)
    if setting.setting == "base_to_novel":
        report.base_acc, report.novel_acc = mean["base_acc"], mean["novel_acc"]
        report.hm = harmonic_mean(report.base_acc, report.novel_acc)
    return report


def resolve_split(spec: SplitSpec, source: DatasetManifest, target: DatasetManifest | None) -> SplitSpec:
    """Fill in class sets the caller left empty, then validate."""
    d = spec.to_dict()
    if not spec.source_classes:
        d["source_classes"] = tuple(source.class_ids)
    if spec.setting == "zero_shot":
        if target is None:
            raise ConfigError("zero_shot needs a target manifest")
        if not spec.target_classes:
            d["target_classes"] = tuple(target.class_ids)
        # names, not ids, decide overlap across manifests
        src_names = {source.spec(c).name for c in d["source_classes"]}
        clash = src_names & {target.spec(c).name for c in d["target_classes"]}
        if clash:
            raise ConfigError(f"zero_shot source and target share classes: {sorted(clash)}")
    if spec.setting == "base_to_novel" and not spec.base_classes:
        freqs = {c: source.counts[c]["train"] for c in d["source_classes"]}
        d["base_classes"], d["novel_classes"] = map(tuple, make_base_novel_split(freqs))
    return SplitSpec.from_dict(d).validate()


def append_result(path, report: EvalReport) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        fh.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")
    return path


def read_results(path) -> list[EvalReport]:
    with open(path) as fh:
        return [EvalReport.from_dict(json.loads(line)) for line in fh if line.strip()]
