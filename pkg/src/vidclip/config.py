"""Run configuration files: one JSON document with sections
model / data / train / protocol / prompts."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .encoders import ModelConfig, TextConfig, VisionConfig
from .errors import ConfigError
from .prompting import PromptConfig
from .protocols import SETTINGS, default_views
from .tokenizer import DEFAULT_TEMPLATE, build_tokenizer, tokenize_classes
from .trainer import TrainConfig, config_hash
from .videogen import FAMILIES, ClassSpec, DatasetManifest, GeneratorConfig, ViewSet, default_roster, make_manifest

SECTIONS = ("model", "data", "train", "protocol", "prompts")


def _check_keys(d: dict, allowed, path: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(d).__name__}")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown key")


def _build(cls, d: dict, path: str):
    _check_keys(d, [f.name for f in fields(cls)], path)
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


@dataclass(frozen=True)
class ModelSection:
    embed_dim: int = 64
    image_size: int = 32
    patch_size: int = 8
    layers: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    max_tokens: int = 16
    template: str = DEFAULT_TEMPLATE
    seed: int = 0

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            embed_dim=self.embed_dim,
            vision=VisionConfig(self.image_size, 3, self.patch_size, self.layers, self.heads, self.mlp_ratio),
            text=TextConfig(vocab_size, self.max_tokens, self.layers, self.heads, self.mlp_ratio),
            seed=self.seed).validate()


@dataclass(frozen=True)
class DataSection:
    dataset_id: str = "synthetic"
    seed: int = 0
    train_per_class: int = 48
    val_per_class: int = 16
    include: tuple | None = None  # class names to keep; None keeps the whole roster
    exclude: tuple = ()
    classes: tuple | None = None  # custom roster as ClassSpec dicts
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def roster(self) -> list[ClassSpec]:
        return default_roster() if self.classes is None else list(self.classes)

    def manifest(self) -> DatasetManifest:
        roster = self.roster()
        names = {c.name for c in roster}
        for key in ("include", "exclude"):
            for name in getattr(self, key) or ():
                if name not in names:
                    raise ConfigError(f"data.{key}: unknown class {name!r}")
        keep = [c for c in roster if (self.include is None or c.name in self.include) and c.name not in self.exclude]
        if not keep:
            raise ConfigError("data: no classes left after include/exclude")
        return make_manifest(keep, self.train_per_class, self.val_per_class, self.seed, self.dataset_id,
                             self.generator)


@dataclass(frozen=True)
class ProtocolSection:
    setting: str = "fully_supervised"
    shots: int | None = None
    seed: int = 0
    n_splits: int = 3
    fusion: str = "embedding"
    views: ViewSet | None = None

    def view_set(self) -> ViewSet:
        return self.views or default_views(self.setting)


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    protocol: ProtocolSection = field(default_factory=ProtocolSection)
    prompts: PromptConfig = field(default_factory=PromptConfig)

    def validate(self) -> "RunConfig":
        if self.protocol.setting not in SETTINGS:
            raise ConfigError(f"protocol.setting: unknown setting {self.protocol.setting!r}")
        if self.protocol.shots is not None and self.protocol.shots < 1:
            raise ConfigError("protocol.shots must be >= 1")
        if self.train.learning_rate <= 0 and self.train.regime != "frozen":
            raise ConfigError("train.learning_rate must be > 0")
        self.train.validate()
        self.data.manifest()
        self.vocabulary()
        self.model.model_config(len(self.vocabulary()))
        self.prompts.validate(self.model.layers, self.model.layers)
        vocab = self.vocabulary()
        longest = max(t.attention_length for t in tokenize_classes([c.name for c in self.data.roster()], vocab))
        if longest + self.prompts.n_text_tokens > self.model.max_tokens:
            raise ConfigError(f"prompts.n_text_tokens: {self.prompts.n_text_tokens} prompt tokens plus a "
                              f"{longest}-token class prompt exceed model.max_tokens={self.model.max_tokens}")
        self.protocol.view_set().validate(self.data.generator.t_raw, self.data.generator.size)
        if self.protocol.view_set().crop_size != self.model.image_size:
            raise ConfigError("protocol.views.crop_size must equal model.image_size")
        return self

    def vocabulary(self):
        """Tokenizer over every roster name, so held-out classes stay encodable."""
        return build_tokenizer([c.name for c in self.data.roster()], self.model.template, self.model.max_tokens)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.data.classes is not None:
            d["data"]["classes"] = [c.to_dict() for c in self.data.classes]
        return d

    def digest(self) -> str:
        return config_hash(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _check_keys(d, SECTIONS, "config")
        model = _build(ModelSection, d.get("model", {}), "model")

        data = dict(d.get("data", {}))
        _check_keys(data, [f.name for f in fields(DataSection)], "data")
        data["generator"] = _build(GeneratorConfig, data.get("generator", {}), "data.generator")
        for key in ("include", "exclude"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        if data.get("classes") is not None:
            specs = []
            for i, c in enumerate(data["classes"]):
                _check_keys(c, ("class_id", "name", "family", "params"), f"data.classes[{i}]")
                if c.get("family") not in FAMILIES:
                    raise ConfigError(f"data.classes[{i}].family: unknown family {c.get('family')!r}")
                specs.append(ClassSpec.from_dict(c))
            data["classes"] = tuple(specs)
        data = _build(DataSection, data, "data")

        train = dict(d.get("train", {}))
        if "betas" in train:
            train["betas"] = tuple(train["betas"])
        train = _build(TrainConfig, train, "train")

        protocol = dict(d.get("protocol", {}))
        if protocol.get("views") is not None:
            protocol["views"] = _build(ViewSet, protocol["views"], "protocol.views")
        protocol = _build(ProtocolSection, protocol, "protocol")

        prompts = _build(PromptConfig, d.get("prompts", {}), "prompts")
        return cls(model, data, train, protocol, prompts)


def load_config(path=None) -> RunConfig:
    """Parse and validate a config file; ``None`` gives the defaults."""
    if path is None:
        return RunConfig().validate()
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return RunConfig.from_dict(raw).validate()
