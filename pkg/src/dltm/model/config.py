"""Model hyperparameters and the patch-token geometry they imply."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError

FINE, COARSE = 0, 1
KIND_FINE, KIND_COARSE, KIND_CLASS, KIND_META = "fine_patch", "coarse_patch", "class", "meta"
CONVENTIONS = ("figure_intuitive", "paper_text")


@dataclass(frozen=True)
class MetaField:
    name: str
    kind: str  # "continuous" | "categorical"
    categories: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("continuous", "categorical"):
            raise ConfigError(f"meta field {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical" and not self.categories:
            raise ConfigError(f"meta field {self.name!r}: categorical field needs categories")
        object.__setattr__(self, "categories", tuple(self.categories))


DEFAULT_META_FIELDS = (
    MetaField("age", "continuous"),
    MetaField("sex", "categorical", ("male", "female")),
    MetaField("height", "continuous"),
    MetaField("weight", "continuous"),
)


@dataclass(frozen=True)
class ModelConfig:
    num_leads: int = 12
    window_samples: int = 250
    segment_len: int = 50
    coarse_pool_factor: int = 5
    embed_dim: int = 160
    hidden_dim: int = 480
    num_ortho_blocks: int = 4
    num_msa_blocks: int = 2
    num_heads: int = 5
    num_classes: int = 71
    meta_fields: tuple[MetaField, ...] = DEFAULT_META_FIELDS
    dropout_rate: float = 0.0
    group_axis_convention: str = "figure_intuitive"
    norm_eps: float = 1e-5
    init_std: float = 0.02
    # samples per time slice when leads are not separated (0.05 s at 100 Hz)
    mixed_unit_samples: int = 5
    lead_separation: bool = True
    dual_scale: bool = True
    ortho_attention: bool = True
    use_meta: bool = True

    def __post_init__(self):
        fields = tuple(f if isinstance(f, MetaField) else MetaField(**f) for f in self.meta_fields)
        object.__setattr__(self, "meta_fields", fields)
        self.validate()

    def validate(self) -> None:
        positive = ("num_leads", "window_samples", "segment_len", "coarse_pool_factor", "embed_dim",
                    "hidden_dim", "num_heads", "num_classes", "mixed_unit_samples")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be positive, got {getattr(self, name)}")
        if self.num_ortho_blocks < 0 or self.num_msa_blocks < 0:
            raise ConfigError("block counts must be non-negative")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.group_axis_convention not in CONVENTIONS:
            raise ConfigError(f"group_axis_convention must be one of {CONVENTIONS}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        unit = self.segment_len if self.lead_separation else self.mixed_unit_samples
        if self.window_samples % unit:
            raise ConfigError(f"window_samples {self.window_samples} not divisible by patch length {unit}")
        if self.dual_scale:
            if self.window_samples % self.coarse_pool_factor:
                raise ConfigError("window_samples not divisible by coarse_pool_factor")
            pooled = self.pooled_len
            if not self.lead_separation and pooled % unit:
                raise ConfigError(f"pooled length {pooled} not divisible by unit {unit}")
        if self.ortho_attention and not self.lead_separation:
            raise ConfigError("lead-orthogonal attention requires lead_separation")
        names = [f.name for f in self.meta_fields]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate meta field names: {names}")

    # derived geometry
    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def pooled_len(self) -> int:
        return self.window_samples // self.coarse_pool_factor

    @property
    def fine_patch_len(self) -> int:
        return self.segment_len if self.lead_separation else self.mixed_unit_samples * self.num_leads

    @property
    def coarse_patch_len(self) -> int:
        if not self.lead_separation:
            return self.mixed_unit_samples * self.num_leads
        # whole pooled lead when it does not split into segment_len pieces
        return self.segment_len if self.pooled_len % self.segment_len == 0 else self.pooled_len

    @property
    def num_fine_steps(self) -> int:
        unit = self.segment_len if self.lead_separation else self.mixed_unit_samples
        return self.window_samples // unit

    @property
    def num_coarse_steps(self) -> int:
        if not self.dual_scale:
            return 0
        if not self.lead_separation:
            return self.pooled_len // self.mixed_unit_samples
        return self.pooled_len // self.coarse_patch_len

    @property
    def num_patch_tokens(self) -> int:
        per_step = self.num_leads if self.lead_separation else 1
        return per_step * (self.num_fine_steps + self.num_coarse_steps)

    @property
    def num_meta_tokens(self) -> int:
        return len(self.meta_fields) if self.use_meta else 0

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["meta_fields"] = [
            {"name": f.name, "kind": f.kind, "categories": list(f.categories)} for f in self.meta_fields
        ]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {unknown}")
        d = dict(d)
        if "meta_fields" in d:
            d["meta_fields"] = tuple(MetaField(**m) for m in d["meta_fields"])
        return cls(**d)


@dataclass
class TokenCoordinates:
    """Per-token coordinates; ``-1`` marks an absent lead or time index."""

    kind: list[str]
    lead_index: np.ndarray
    time_index: np.ndarray
    scale: np.ndarray  # FINE / COARSE, -1 for class and meta tokens

    def __len__(self):
        return len(self.kind)


def patch_coordinates(config: ModelConfig) -> TokenCoordinates:
    """Fine tokens lead-major then time, followed by coarse tokens lead-major."""
    kind, lead, time, scale = [], [], [], []
    leads = range(config.num_leads) if config.lead_separation else [-1]
    for steps, label, s in ((config.num_fine_steps, KIND_FINE, FINE),
                            (config.num_coarse_steps, KIND_COARSE, COARSE)):
        for l in leads:
            for t in range(steps):
                kind.append(label)
                lead.append(l)
                time.append(t)
                scale.append(s)
    return TokenCoordinates(kind, np.array(lead, dtype=np.int64), np.array(time, dtype=np.int64),
                            np.array(scale, dtype=np.int64))


def sequence_coordinates(config: ModelConfig, num_meta: int | None = None) -> TokenCoordinates:
    """Coordinates of the vanilla-attention input ``[class | patches | meta]``."""
    patches = patch_coordinates(config)
    m = config.num_meta_tokens if num_meta is None else num_meta
    neg = np.array([-1], dtype=np.int64)
    return TokenCoordinates(
        [KIND_CLASS] + patches.kind + [KIND_META] * m,
        np.concatenate([neg, patches.lead_index, np.full(m, -1)]),
        np.concatenate([neg, patches.time_index, np.full(m, -1)]),
        np.concatenate([neg, patches.scale, np.full(m, -1)]),
    )
