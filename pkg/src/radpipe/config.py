"""Model configuration, flat key=value config files, and seeded RNG substreams."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters for the full pipeline at desk scale.

    Defaults follow small masked-autoencoder / query-transformer conventions;
    every value is overridable from config files and CLI flags.
    """

    sub_image_size: int = 32       # S, pixels per tile side
    patch_size: int = 8            # P, pixels per patch side
    embed_dim: int = 64            # d, shared model width
    vision_layers: int = 4
    icc_layers: int = 2            # auxiliary inter-image context transformer
    qformer_layers: int = 2
    num_queries: int = 8           # K query tokens
    lm_layers: int = 4
    vocab_cap: int = 8192
    mask_ratio: float = 0.75
    temperature: float = 0.07      # contrastive softmax temperature
    icc_weight: float = 1.0        # weight of the contrastive term
    seed: int = 42

    # plumbing limits, not tuned per run
    max_images: int = 16           # image-index embedding table size
    max_slices: int = 16           # slice-index embedding table size
    max_seq_len: int = 512         # decoder position table size

    def __post_init__(self):
        if self.sub_image_size % self.patch_size != 0:
            raise ConfigError(
                f"sub_image_size {self.sub_image_size} not divisible by patch_size {self.patch_size}"
            )
        if not (0.0 < self.mask_ratio < 1.0):
            raise ConfigError(f"mask_ratio must be in (0,1), got {self.mask_ratio}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.icc_weight < 0:
            raise ConfigError(f"icc_weight must be >= 0, got {self.icc_weight}")
        if self.num_queries < 1:
            raise ConfigError("num_queries must be >= 1")
        for name in ("vision_layers", "icc_layers", "qformer_layers", "lm_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def patches_per_sub_image(self) -> int:
        n = self.sub_image_size // self.patch_size
        return n * n

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        """Stable hash of the canonical JSON form, used for checkpoint pairing."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def _coerce(value: str):
    for caster in (int, float):
        try:
            return caster(value)
        except ValueError:
            continue
    if value.lower() in ("true", "false"):
        return value.lower() == "true"
    return value


def load_kv_config(path) -> dict:
    """Parse a flat ``key = value`` UTF-8 config file. '#' starts a comment."""
    out = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"malformed config line: {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = _coerce(value.strip())
    return out


def save_kv_config(path, values: dict) -> None:
    lines = [f"{k} = {values[k]}" for k in sorted(values)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def substream(root_seed: int, name: str) -> np.random.Generator:
    """Named, independent RNG substream derived from one root seed.

    All randomness in the pipeline flows through these (vision, align, mask,
    bootstrap, rater-order, ...), so each stage is reproducible in isolation.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([int(root_seed) & 0xFFFFFFFF, *words]))


def substream_seed(root_seed: int, name: str, index: int = 0) -> int:
    """Deterministic integer seed for contexts that need a plain int."""
    digest = hashlib.sha256(f"{root_seed}:{name}:{index}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
