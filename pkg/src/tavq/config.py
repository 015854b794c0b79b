"""Flat run configuration: one document, every tunable, unknown keys rejected."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    image_size: int = 32
    data_count: int = 512
    data_seed: int = 0
    eval_count: int = 64
    data_dir: str | None = None        # load an exported dataset instead of generating inline
    vocabulary: str | None = None      # lexicon TSV; None uses the bundled one
    embeddings: str | None = None      # "count dim" table; None uses hash embeddings
    text_pool: int = 1                 # merge units of this many consecutive captions per image
    # model
    d_z: int = 32
    d: int = 32
    K: int = 64
    factors: list[int] = field(default_factory=lambda: [4, 8, 16])
    min_bottom_grid: int = 2
    # alignment
    q: int = 8
    eps: float | None = None           # None: eps_scale * mean(cost) per instance
    eps_scale: float = 0.05
    tol: float = 1e-6
    max_iter: int = 1000
    alpha: float = 0.001
    beta_p: float = 0.001
    gamma_s: float = 0.001
    full_set: bool = False
    # objective / optimizer
    commit_coeff: float = 0.25
    vq_all_levels: bool = True
    per_level_codebooks: bool = False
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # run
    batch: int = 8
    steps: int = 2000
    seed: int = 0
    checkpoint_every: int = 500
    out_dir: str = "runs/default"
    timing_steps: int = 100
    ablate_factors: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        self.factors = [int(f) for f in self.factors]
        self.ablate_factors = [[int(f) for f in fs] for fs in self.ablate_factors]

    # ---------------------------------------------------------------- checks

    def validate(self) -> "RunConfig":
        positive = ("image_size", "data_count", "d_z", "d", "K", "q", "batch", "max_iter",
                    "text_pool", "min_bottom_grid", "timing_steps", "checkpoint_every")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.K < 2:
            raise ConfigError("K must be >= 2")
        if self.steps < 0 or self.eval_count < 0:
            raise ConfigError("steps and eval_count must be >= 0")
        for name in ("alpha", "beta_p", "gamma_s", "commit_coeff"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.eps is not None and self.eps <= 0:
            raise ConfigError("eps must be positive (or null for the adaptive default)")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch > self.data_count:
            raise ConfigError(f"batch {self.batch} exceeds data_count {self.data_count}")
        check_factors(self.factors, self.image_size, self.min_bottom_grid)
        return self

    # ------------------------------------------------------------ round trip

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, doc: dict, base: "RunConfig | None" = None) -> "RunConfig":
        doc = dict(doc)
        preset = doc.pop("preset", None)
        start = base.to_dict() if base is not None else cls().to_dict()
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}; known: {', '.join(PRESETS)}")
            start.update(PRESETS[preset])
        unknown = sorted(set(doc) - set(cls.keys()))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        start.update(doc)
        try:
            return cls(**start)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        stripped = text.strip()
        if stripped.startswith("{"):
            try:
                doc = json.loads(stripped)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"invalid JSON config: {exc}") from exc
        else:
            doc = parse_key_values(text)
        return cls.from_dict(doc)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)


PRESETS: dict[str, dict] = {
    "desk": {},
    "full": {"image_size": 256, "K": 1024, "batch": 6, "factors": [4, 8, 16]},
}


def parse_key_values(text: str) -> dict:
    """``key = value`` lines; values are JSON literals, bare words are strings."""
    doc = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            doc[key] = json.loads(value)
        except json.JSONDecodeError:
            doc[key] = value
    return doc


def check_factors(factors, image_size: int, min_bottom_grid: int = 1) -> None:
    if len(factors) != 3:
        raise ConfigError(f"factors must list three levels, got {factors}")
    f1, f2, f3 = factors
    if f1 < 1 or f2 % f1 or f3 % f2 or f2 <= f1 or f3 <= f2:
        raise ConfigError(f"factors {factors} must strictly increase, each dividing the next")
    if image_size % f3:
        raise ConfigError(f"image_size {image_size} is not divisible by the coarsest factor {f3}")
    bottom = image_size // f3
    if bottom < min_bottom_grid:
        raise ConfigError(
            f"factors {factors} at {image_size}x{image_size} give a {bottom}x{bottom} coarsest grid, "
            f"below the minimum {min_bottom_grid}x{min_bottom_grid}")
