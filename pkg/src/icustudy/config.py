"""Run configuration: a flat key = value text file with documented
defaults; command-line flags override file values and unknown keys are
errors."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class RunConfig:
    extracts_dir: str = "extracts"
    out_dir: str = "out"
    seed: int = 0
    # variable preparation
    t1_default: int = 4
    t2_day: int = 3
    t3_day: int = 4
    # propensity modeling
    p_enter: float = 0.05
    refine_passes: int = 1
    refine_fraction: float = 0.25
    n_strata: int = 5
    # outcome analysis
    t_test_variant: str = "welch"
    # ML layer
    kmeans_k: int = 4
    gp_population_size: int = 100
    gp_generations: int = 10
    gp_max_depth: int = 17
    gp_init_depth: int = 6
    gp_tournament_size: int = 4
    gp_p_reproduction: float = 0.1
    gp_p_crossover: float = 0.5
    gp_p_mutation: float = 0.5
    # synthetic generation
    synth_n: int = 300
    synth_prevalence: float = 0.12

    _INT = ("seed", "t1_default", "t2_day", "t3_day", "refine_passes", "n_strata",
            "kmeans_k", "gp_population_size", "gp_generations", "gp_max_depth",
            "gp_init_depth", "gp_tournament_size", "synth_n")
    _FLOAT = ("p_enter", "refine_fraction", "gp_p_reproduction", "gp_p_crossover",
              "gp_p_mutation", "synth_prevalence")

    @classmethod
    def option_names(cls) -> list:
        return [f.name for f in fields(cls) if not f.name.startswith("_")]

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        config = cls()
        known = set(cls.option_names())
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown option {key!r}")
            config.set_option(key, value)
        return config

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_text(path.read_text())

    def set_option(self, key: str, value: str) -> None:
        if key not in self.option_names():
            raise ConfigError(f"unknown option {key!r}")
        try:
            if key in RunConfig._INT:
                parsed: object = int(value)
            elif key in RunConfig._FLOAT:
                parsed = float(value)
            else:
                parsed = value
        except ValueError:
            raise ConfigError(f"bad value for {key!r}: {value!r}") from None
        setattr(self, key, parsed)
