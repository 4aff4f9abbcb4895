"""Deterministic synthetic video corpus with sparse frame sampling and views.

Three class families:

* appearance - one coloured, static shape; any single frame reveals the class.
* compositional - a neutral shape in half the frames and a second shape (or
  the same one, for "alone" classes) in the other half; single frames are
  ambiguous, the frame multiset is not.
* trajectory - a neutral shape sweeping through the centre along one axis; the
  centre frame is shared by both axes.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, IntegrityError

GENERATOR_VERSION = "1"
FAMILIES = ("appearance", "compositional", "trajectory")
SHAPES = ("circle", "square", "triangle")
COLORS = {"red": (0.9, 0.2, 0.2), "green": (0.2, 0.85, 0.25), "blue": (0.25, 0.35, 0.95)}
NEUTRAL = (0.85, 0.85, 0.85)
BACKGROUND = 0.1
CROP_GRID = ("center", "top_left", "top_right", "bottom_left", "bottom_right")


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    name: str
    family: str
    params: dict = field(default_factory=dict, hash=False)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ClassSpec":
        return cls(int(d["class_id"]), d["name"], d["family"], dict(d.get("params", {})))


@dataclass(frozen=True)
class GeneratorConfig:
    t_raw: int = 32
    size: int = 48
    channels: int = 3
    noise: float = 0.05
    color_jitter: float = 0.08
    radius: float = 6.0
    radius_jitter: float = 1.0
    position_jitter: float = 0.0
    sweep: float = 10.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class VideoSample:
    frames: np.ndarray  # T_raw x H x W x C, float32 in [0, 1]
    class_id: int
    sample_seed: int


def default_roster() -> list[ClassSpec]:
    """19 classes: 9 appearance, 6 compositional, 4 trajectory."""
    specs = []
    for color in COLORS:
        for shape in SHAPES:
            specs.append(("appearance", f"{color} {shape}", {"shape": shape, "color": color}))
    for a, b in (("circle", "square"), ("circle", "triangle"), ("square", "triangle")):
        specs.append(("compositional", f"{a} with {b}", {"shapes": [a, b]}))
    for a in SHAPES:
        specs.append(("compositional", f"{a} alone", {"shapes": [a, a]}))
    for shape in ("circle", "square"):
        for axis in ("horizontally", "vertically"):
            specs.append(("trajectory", f"{shape} moving {axis}", {"shape": shape, "axis": axis}))
    return [ClassSpec(i, name, fam, params) for i, (fam, name, params) in enumerate(specs)]


def family_ids(roster, family: str) -> list[int]:
    return [c.class_id for c in roster if c.family == family]


def shape_mask(shape: str, cx: float, cy: float, r: float, size: int) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    if shape == "circle":
        return (x - cx) ** 2 + (y - cy) ** 2 <= r * r
    if shape == "square":
        h = 0.85 * r
        return (np.abs(x - cx) <= h) & (np.abs(y - cy) <= h)
    if shape == "triangle":
        top, bottom = cy - r, cy + 0.8 * r
        return (y >= top) & (y <= bottom) & (np.abs(x - cx) <= r * (y - top) / (bottom - top))
    raise ConfigError(f"unknown shape {shape!r}")


def generate(spec: ClassSpec, sample_seed: int, cfg: GeneratorConfig = GeneratorConfig()) -> VideoSample:
    if spec.family not in FAMILIES:
        raise ConfigError(f"unknown family {spec.family!r}")
    rng = np.random.default_rng(int(sample_seed))
    # fixed draw order for every family, so equal seeds share nuisances
    jitter = rng.uniform(-cfg.color_jitter, cfg.color_jitter, size=3)
    offset = rng.uniform(-cfg.position_jitter, cfg.position_jitter, size=2)
    radius = cfg.radius + rng.uniform(-cfg.radius_jitter, cfg.radius_jitter)
    flip = bool(rng.integers(2))
    noise = rng.uniform(-cfg.noise, cfg.noise, size=(cfg.t_raw, cfg.size, cfg.size, cfg.channels))

    p = spec.params
    base = COLORS[p["color"]] if spec.family == "appearance" else NEUTRAL
    color = np.clip(np.asarray(base) + jitter, 0.0, 1.0)
    c = (cfg.size - 1) / 2
    mid = cfg.t_raw // 2

    frames = np.full((cfg.t_raw, cfg.size, cfg.size, cfg.channels), BACKGROUND)
    masks: dict = {}
    for t in range(cfg.t_raw):
        cx, cy = c + offset[0], c + offset[1]
        if spec.family == "appearance":
            shape = p["shape"]
        elif spec.family == "compositional":
            first, second = p["shapes"][::-1] if flip else p["shapes"]
            shape = first if t < mid else second
        else:
            shape = p["shape"]
            # sweep through the (offset) centre; the mid frame sits exactly on it
            step = (-1 if flip else 1) * cfg.sweep * (t - mid) / mid
            cx, cy = (cx + step, cy) if p["axis"] == "horizontally" else (cx, cy + step)
        key = (shape, round(cx, 6), round(cy, 6))
        if key not in masks:
            masks[key] = shape_mask(shape, cx, cy, radius, cfg.size)
        frames[t][masks[key]] = color
    frames = np.clip(frames + noise, 0.0, 1.0).astype(np.float32)
    return VideoSample(frames, spec.class_id, int(sample_seed))


# --- sparse sampling and views --------------------------------------------------

def segment_indices(t_raw: int, t: int, mode: str = "eval", rng=None, offset: float = 0.5) -> np.ndarray:
    """TSN sparse sampling: split [0, t_raw) into t segments and take one index per segment.

    eval picks the point at fraction ``offset`` of each segment (the centre by
    default); train picks uniformly at random inside each segment.
    """
    if t < 1 or t > t_raw:
        raise ConfigError(f"cannot sample {t} frames from {t_raw}")
    j = np.arange(t)
    if mode == "eval":
        return np.floor((j + offset) * t_raw / t).astype(np.int64)
    if mode == "train":
        rng = rng if rng is not None else np.random.default_rng()
        lo = np.floor(j * t_raw / t).astype(np.int64)
        hi = np.floor((j + 1) * t_raw / t).astype(np.int64)
        return lo + (rng.random(t) * (hi - lo)).astype(np.int64)
    raise ConfigError(f"unknown sampling mode {mode!r}")


def sample_frames(video, t: int, mode: str = "eval", seed=None) -> np.ndarray:
    frames = video.frames if isinstance(video, VideoSample) else np.asarray(video)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return frames[segment_indices(frames.shape[0], t, mode, rng)]


def crop_origin(position: str, size: int, crop: int) -> tuple[int, int]:
    far = size - crop
    return {
        "center": (far // 2, far // 2),
        "top_left": (0, 0),
        "top_right": (0, far),
        "bottom_left": (far, 0),
        "bottom_right": (far, far),
    }[position]


def crop(frames: np.ndarray, position: str, crop_size: int) -> np.ndarray:
    h, w = frames.shape[-3], frames.shape[-2]
    if crop_size > min(h, w):
        raise ConfigError(f"crop {crop_size} larger than frame {h}x{w}")
    y, x = crop_origin(position, min(h, w), crop_size)
    return frames[..., y:y + crop_size, x:x + crop_size, :]


@dataclass(frozen=True)
class ViewSet:
    spatial_crops: int = 1
    temporal_clips: int = 1
    crop_size: int = 32
    frames_per_clip: int = 8

    def validate(self, t_raw: int | None = None, size: int | None = None) -> "ViewSet":
        if not 1 <= self.spatial_crops <= len(CROP_GRID):
            raise ConfigError(f"spatial_crops must lie in [1, {len(CROP_GRID)}]")
        if self.temporal_clips < 1 or self.frames_per_clip < 1:
            raise ConfigError("temporal_clips and frames_per_clip must be >= 1")
        if size is not None and self.crop_size > size:
            raise ConfigError(f"crop {self.crop_size} larger than frame {size}")
        if t_raw is not None and self.frames_per_clip > t_raw:
            raise ConfigError(f"{self.frames_per_clip} frames per clip > {t_raw} raw frames")
        return self

    @property
    def n_views(self) -> int:
        return self.spatial_crops * self.temporal_clips


def make_views(video, vs: ViewSet, seed=None) -> list[np.ndarray]:
    """Deterministic eval views: temporal clips (outer) x spatial crops (inner).

    Clip ``c`` samples each segment at fraction (c + 0.5) / temporal_clips, so a
    single clip is the standard centre sampling. ``seed`` is accepted for API
    symmetry with training-time sampling and does not affect eval views.
    """
    frames = video.frames if isinstance(video, VideoSample) else np.asarray(video)
    vs.validate(frames.shape[0], min(frames.shape[1:3]))
    out = []
    for c in range(vs.temporal_clips):
        idx = segment_indices(frames.shape[0], vs.frames_per_clip, "eval",
                              offset=(c + 0.5) / vs.temporal_clips)
        clip = frames[idx]
        for position in CROP_GRID[:vs.spatial_crops]:
            out.append(crop(clip, position, vs.crop_size))
    return out


def train_clip(frames: np.ndarray, t: int, crop_size: int, rng: np.random.Generator) -> np.ndarray:
    """Random sparse sample plus a random crop from the fixed grid."""
    clip = frames[segment_indices(frames.shape[0], t, "train", rng)]
    return crop(clip, CROP_GRID[int(rng.integers(len(CROP_GRID)))], crop_size)


# --- manifests and materialised datasets ------------------------------------------

def sample_seed_for(dataset_seed: int, class_id: int, split: str, index: int) -> int:
    split_code = {"train": 0, "val": 1}[split]
    ss = np.random.SeedSequence([int(dataset_seed), int(class_id), split_code, int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class DatasetManifest:
    dataset_id: str
    classes: list  # list[ClassSpec]
    counts: dict  # class_id -> {"train": n, "val": m}
    seed: int = 0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    generator_version: str = GENERATOR_VERSION

    def validate(self) -> "DatasetManifest":
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ConfigError("class names must be unique")
        ids = [c.class_id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise ConfigError("class ids must be unique")
        for c in self.classes:
            if c.family not in FAMILIES:
                raise ConfigError(f"classes[{c.class_id}].family: unknown family {c.family!r}")
            n = self.counts.get(c.class_id)
            if n is None or n["train"] < 1 or n["val"] < 1:
                raise ConfigError(f"counts[{c.class_id}]: train and val counts must be >= 1")
        return self

    @property
    def class_ids(self) -> list[int]:
        return [c.class_id for c in self.classes]

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]

    def spec(self, class_id: int) -> ClassSpec:
        for c in self.classes:
            if c.class_id == class_id:
                return c
        raise DataError(f"class {class_id} not in manifest {self.dataset_id}")

    def subset(self, class_ids, dataset_id: str | None = None) -> "DatasetManifest":
        keep = set(class_ids)
        return DatasetManifest(
            dataset_id or f"{self.dataset_id}[{','.join(map(str, sorted(keep)))}]",
            [c for c in self.classes if c.class_id in keep],
            {k: dict(v) for k, v in self.counts.items() if k in keep},
            self.seed, self.generator, self.generator_version)

    def sample_seed(self, class_id: int, split: str, index: int) -> int:
        return sample_seed_for(self.seed, class_id, split, index)

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "generator_version": self.generator_version,
            "seed": self.seed,
            "generator": self.generator.to_dict(),
            "classes": [c.to_dict() for c in self.classes],
            "counts": {str(k): v for k, v in sorted(self.counts.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            d["dataset_id"],
            [ClassSpec.from_dict(c) for c in d["classes"]],
            {int(k): {"train": int(v["train"]), "val": int(v["val"])} for k, v in d["counts"].items()},
            int(d["seed"]),
            GeneratorConfig(**d.get("generator", {})),
            d.get("generator_version", GENERATOR_VERSION),
        ).validate()


def make_manifest(roster=None, train_per_class: int = 48, val_per_class: int = 16, seed: int = 0,
                  dataset_id: str = "synthetic", generator: GeneratorConfig | None = None) -> DatasetManifest:
    roster = list(roster) if roster is not None else default_roster()
    counts = {c.class_id: {"train": train_per_class, "val": val_per_class} for c in roster}
    return DatasetManifest(dataset_id, roster, counts, seed, generator or GeneratorConfig()).validate()


@dataclass
class VideoDataset:
    """In-memory videos with global class ids and the manifest they came from."""

    frames: np.ndarray  # N x T_raw x H x W x C
    labels: np.ndarray  # N, global class ids
    video_ids: list
    manifest: DatasetManifest

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def class_ids(self) -> list[int]:
        return sorted(set(int(x) for x in self.labels))

    def subset(self, indices) -> "VideoDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return VideoDataset(self.frames[indices], self.labels[indices],
                            [self.video_ids[i] for i in indices], self.manifest)


def materialize(manifest: DatasetManifest, split: str = "train", selection: dict | None = None) -> VideoDataset:
    """Generate the videos of one split. ``selection`` maps class_id -> sample indices."""
    if selection is None:
        selection = {c: list(range(manifest.counts[c][split])) for c in manifest.class_ids}
    g = manifest.generator
    total = sum(len(v) for v in selection.values())
    frames = np.empty((total, g.t_raw, g.size, g.size, g.channels), dtype=np.float32)
    labels, ids = [], []
    k = 0
    for cid in sorted(selection):
        spec = manifest.spec(cid)
        for i in selection[cid]:
            if not 0 <= i < manifest.counts[cid][split]:
                raise DataError(f"sample {i} outside {split} range of class {cid}")
            frames[k] = generate(spec, manifest.sample_seed(cid, split, i), g).frames
            labels.append(cid)
            ids.append(f"{split}/{cid:03d}_{i:04d}")
            k += 1
    return VideoDataset(frames, np.asarray(labels, dtype=np.int64), ids, manifest)


# --- on-disk format ----------------------------------------------------------------

def write_frames(path, frames: np.ndarray):
    """One JSON header line, then little-endian float32 pixels in row-major order."""
    arr = np.ascontiguousarray(frames, dtype="<f4")
    header = {"shape": list(arr.shape), "dtype": "<f4", "order": "C"}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        fh.write(arr.tobytes())


def read_frames(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        data = fh.read()
    if header.get("dtype") != "<f4":
        raise DataError(f"{path}: unsupported dtype {header.get('dtype')}")
    shape = tuple(header["shape"])
    if len(data) != 4 * int(np.prod(shape)):
        raise IntegrityError(f"{path}: payload size does not match shape {shape}")
    return np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)


def manifest_bytes(manifest: DatasetManifest) -> bytes:
    return (json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n").encode()


def save_dataset(manifest: DatasetManifest, out_dir, force: bool = False) -> Path:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} exists and is not empty (use force)")
    for split in ("train", "val"):
        (out / "samples" / split).mkdir(parents=True, exist_ok=True)
        for cid in manifest.class_ids:
            spec = manifest.spec(cid)
            for i in range(manifest.counts[cid][split]):
                video = generate(spec, manifest.sample_seed(cid, split, i), manifest.generator)
                write_frames(out / "samples" / split / f"{cid:03d}_{i:04d}.f32", video.frames)
    (out / "manifest.json").write_bytes(manifest_bytes(manifest))
    return out


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    return DatasetManifest.from_dict(json.loads(path.read_text()))


def load_split(dataset_dir, split: str = "train", selection: dict | None = None) -> VideoDataset:
    """Read a split back from disk (the files, not a regeneration)."""
    root = Path(dataset_dir)
    manifest = load_manifest(root)
    if selection is None:
        selection = {c: list(range(manifest.counts[c][split])) for c in manifest.class_ids}
    frames, labels, ids = [], [], []
    for cid in sorted(selection):
        for i in selection[cid]:
            frames.append(read_frames(root / "samples" / split / f"{cid:03d}_{i:04d}.f32"))
            labels.append(cid)
            ids.append(f"{split}/{cid:03d}_{i:04d}")
    return VideoDataset(np.stack(frames), np.asarray(labels, dtype=np.int64), ids, manifest)


def digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def default_output_root() -> Path:
    return Path(os.environ.get("VIDCLIP_OUT", "runs"))
