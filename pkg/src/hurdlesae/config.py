"""Run configuration: one JSON file, with command-line overrides applied on top."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError, MissingPrerequisiteError
from .mcmc import McmcConfig
from .model import PriorConfig
from .pipeline import STAGE1_SPEC, STAGE2_SPEC, FitSettings, StageSpec

# Settings that do not change any output and are left out of the config hash.
_UNHASHED = ("output_dir", "threads")


def _stage(d) -> StageSpec:
    if isinstance(d, StageSpec):
        return d
    unknown = set(d) - {"linear", "quadratic"}
    if unknown:
        raise ConfigError(f"unknown stage setting(s): {', '.join(sorted(unknown))}")
    return StageSpec(d.get("linear", ()), d.get("quadratic", ()))


@dataclass
class RunConfig:
    plots: str | None = None
    grid: str | None = None
    output_dir: str = "out"
    species: list[str] | None = None
    stage1: StageSpec = field(default_factory=lambda: StageSpec(STAGE1_SPEC.linear, STAGE1_SPEC.quadratic))
    stage2: StageSpec = field(default_factory=lambda: StageSpec(STAGE2_SPEC.linear, STAGE2_SPEC.quadratic))
    priors: PriorConfig = field(default_factory=PriorConfig)
    mcmc1: McmcConfig = field(default_factory=McmcConfig.stage1_default)
    mcmc2: McmcConfig = field(default_factory=McmcConfig.stage2_default)
    q: int = 5
    m: int = 15
    seed: int = 0
    level: float = 0.95
    block_size: int = 5000
    subsample: float | None = None
    trace_blocks: list[str] = field(default_factory=lambda: ["phi", "loadings"])
    threads: int = 1

    def __post_init__(self):
        self.stage1 = _stage(self.stage1)
        self.stage2 = _stage(self.stage2)
        if isinstance(self.priors, dict):
            self.priors = PriorConfig.from_dict(self.priors)
        if isinstance(self.mcmc1, dict):
            self.mcmc1 = McmcConfig.stage1_default(**self.mcmc1)
        if isinstance(self.mcmc2, dict):
            self.mcmc2 = McmcConfig.stage2_default(**self.mcmc2)
        if self.species is not None:
            self.species = [str(s) for s in self.species]
            if len(set(self.species)) != len(self.species):
                raise ConfigError("species list has duplicates")
        self.trace_blocks = list(self.trace_blocks)
        if self.q < 1:
            raise ConfigError(f"q must be >= 1, got {self.q}")
        if self.m < 1:
            raise ConfigError(f"m must be >= 1, got {self.m}")
        if not 0 < self.level < 1:
            raise ConfigError(f"level must be in (0, 1), got {self.level}")
        if self.block_size < 1:
            raise ConfigError("block_size must be positive")
        if self.subsample is not None and not 0 < self.subsample <= 1:
            raise ConfigError("subsample must be in (0, 1]")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        orphan = [n for s in (self.stage1, self.stage2) for n in s.quadratic if n not in s.linear]
        if orphan:
            raise ConfigError(f"quadratic term(s) without linear term: {', '.join(orphan)}")

    # ---- (de)serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, StageSpec):
                v = {"linear": list(v.linear), "quadratic": list(v.quadratic)}
            elif isinstance(v, (PriorConfig, McmcConfig)):
                v = v.to_dict()
            d[f.name] = v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown run setting(s): {', '.join(sorted(unknown))}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"invalid run configuration: {exc}") from None

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        path = Path(path)
        if not path.exists():
            raise MissingPrerequisiteError(f"run configuration not found: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None

    def override(self, **flags) -> "RunConfig":
        """New config with every non-None flag applied; MCMC keys go to both stages."""
        d = self.to_dict()
        for key in ("n_chains", "n_iters", "n_burn", "n_thin"):
            v = flags.pop(key, None)
            if v is not None:
                d["mcmc1"][key] = v
                d["mcmc2"][key] = v
        for key, v in flags.items():
            if v is not None:
                d[key] = v
        return RunConfig.from_dict(d)

    def config_hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        for stage in ("mcmc1", "mcmc2"):
            d[stage] = {k: v for k, v in d[stage].items() if k != "n_workers"}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def manifest(self, command: str) -> str:
        return f"manifest: command={command} config_hash={self.config_hash()} seed={self.seed}"

    # ---- derived settings -----------------------------------------------------

    def fit_settings(self) -> FitSettings:
        workers = {"n_workers": self.threads}
        mc1 = McmcConfig.from_dict({**self.mcmc1.to_dict(), "seed": self.seed, **workers})
        mc2 = McmcConfig.from_dict({**self.mcmc2.to_dict(), "seed": self.seed + 1, **workers})
        return FitSettings(stage1=self.stage1, stage2=self.stage2, q=self.q, m=self.m, priors=self.priors,
                           mcmc1=mc1, mcmc2=mc2)

    def require(self, name: str) -> Path:
        value = getattr(self, name)
        if value is None:
            raise ConfigError(f"no {name} path given (set it in the config or pass --{name})")
        p = Path(value)
        if not p.exists():
            raise MissingPrerequisiteError(f"{name} file not found: {p}")
        return p
