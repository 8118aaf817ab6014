"""Run configuration: one JSON file, plus --seed/--out overrides on the command line."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .corpus import ConceptSpec, default_concepts
from .errors import InvalidConfig
from .learners import PROBE_DEFAULTS, REFT_DEFAULTS, SSV_DEFAULTS, TrainConfig
from .steering import FACTOR_PRESETS, KINDS
from .toylm import ToyLMConfig

DETECT_METHODS = ("diffmean", "pca", "lat", "probe", "ssv", "reft_r1", "sae", "sae_a", "bow", "ixg", "ig")
STEER_METHODS = ("diffmean", "pca", "lat", "probe", "ssv", "reft_r1", "sae", "sae_a")
TRAINABLE = {"probe": PROBE_DEFAULTS, "ssv": SSV_DEFAULTS, "reft_r1": REFT_DEFAULTS}


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/desk"
    model: ToyLMConfig = field(default_factory=lambda: ToyLMConfig(seed=1))
    concepts: list[ConceptSpec] | None = None
    concepts_file: str | None = None
    n_concepts: int = 8
    plant_rate: float = 0.3
    layer: int = 1
    n_train: int = 144
    n_eval: int = 72
    hard_fraction: float = 1 / 3
    methods: list[str] = field(default_factory=lambda: ["diffmean", "pca", "lat", "probe", "ssv", "reft_r1", "sae", "sae_a", "bow"])
    steer_methods: list[str] = field(default_factory=lambda: ["diffmean", "reft_r1", "sae"])
    train: dict[str, TrainConfig] = field(default_factory=dict)
    pooling: str = "max"
    factor_preset: str = "default"
    sae_kind: str = "addition"
    sae_latents: int = 64
    n_instructions: int = 10
    max_new: int = 32
    negative_pool: int = 96
    extra_negatives: int = 360
    ig_steps: int = 50
    judge_endpoint: str | None = None
    judge_concurrency: int = 4
    winrate_baseline: str = "sae"

    def __post_init__(self):
        self.validate()

    # -- validation ---------------------------------------------------------

    def validate(self) -> None:
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise InvalidConfig("seed must be an unsigned 64-bit integer")
        try:
            self.model.validate()
        except Exception as exc:
            raise InvalidConfig(f"model: {exc}") from exc
        if not 1 <= self.layer <= self.model.layers:
            raise InvalidConfig(f"layer must lie in [1, {self.model.layers}]")
        if self.concepts_file is not None and not Path(self.concepts_file).is_file():
            raise InvalidConfig(f"concepts_file {self.concepts_file} does not exist")
        if self.n_train < 2 or self.n_eval < 2 or self.n_train % 2 or self.n_eval % 2:
            raise InvalidConfig("n_train and n_eval must be even and >= 2")
        if self.pooling not in ("max", "mean"):
            raise InvalidConfig("pooling must be max or mean")
        if self.factor_preset not in FACTOR_PRESETS:
            raise InvalidConfig(f"factor_preset must be one of {sorted(FACTOR_PRESETS)}")
        if self.sae_kind not in KINDS:
            raise InvalidConfig(f"sae_kind must be one of {KINDS}")
        if self.n_instructions < 2 or self.max_new < 1:
            raise InvalidConfig("need >= 2 steering instructions and max_new >= 1")
        for name in self.train:
            if name not in TRAINABLE:
                raise InvalidConfig(f"train config given for non-trainable method {name!r}")

    def unknown_methods(self) -> list[str]:
        """Method names outside the known sets; reported as a run error."""
        bad = [m for m in self.methods if m not in DETECT_METHODS]
        bad += [m for m in self.steer_methods if m not in STEER_METHODS]
        return bad

    # -- derived ------------------------------------------------------------

    def concept_specs(self) -> list[ConceptSpec]:
        if self.concepts is not None:
            return list(self.concepts)
        if self.concepts_file is not None:
            lines = Path(self.concepts_file).read_text().splitlines()
            return [ConceptSpec.from_json(json.loads(x)) for x in lines if x.strip()]
        return default_concepts(self.n_concepts, self.model.vocab_size, self.plant_rate)

    def train_config(self, method: str) -> TrainConfig:
        return self.train.get(method, TRAINABLE[method])

    def factors(self) -> tuple[float, ...]:
        return FACTOR_PRESETS[self.factor_preset]

    # -- (de)serialisation --------------------------------------------------

    def to_json(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["model"] = asdict(self.model)
        d["concepts"] = [c.to_json() for c in self.concepts] if self.concepts is not None else None
        d["train"] = {k: asdict(v) for k, v in sorted(self.train.items())}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise InvalidConfig("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown config keys {sorted(unknown)}")
        d = dict(d)
        try:
            if "model" in d:
                d["model"] = ToyLMConfig(**d["model"])
            if d.get("concepts") is not None:
                d["concepts"] = [ConceptSpec.from_json(c) for c in d["concepts"]]
            if "train" in d:
                d["train"] = {k: TrainConfig(**v) for k, v in d["train"].items()}
            return cls(**d)
        except InvalidConfig:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise InvalidConfig(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path, seed: int | None = None, out: str | None = None) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise InvalidConfig(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"config file {path} is not valid JSON: {exc}") from exc
        if isinstance(d, dict):
            if seed is not None:
                d["seed"] = seed
            if out is not None:
                d["out"] = out
        return cls.from_json(d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")
