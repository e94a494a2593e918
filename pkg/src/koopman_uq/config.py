"""Run configuration: a flat JSON object, unknown keys rejected."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

DEFAULT_CHECKPOINTS = (10, 100, 1000, 10_000, 100_000)
OUTPUT_KEYS = ("json", "convergence_csv", "trace_csv")


@dataclass
class ScenarioConfig:
    scenario: str = "bouncing_ball"
    overrides: dict = field(default_factory=dict)
    rtol: float = 1e-2
    atol: float = 1e-2
    max_evals: int = 1_000_000
    n: int = 100_000
    seed: int = 0
    checkpoints: Optional[list] = None
    moments: int = 5
    noise: Optional[dict] = None
    bounds: list = field(default_factory=lambda: [[-100.0, 0.0], [1.0, 3.0], [10.0, 50.0]])
    x0: list = field(default_factory=lambda: [0.0, 2.0, 50.0])
    ftol_rel: float = 1e-3
    max_iter: int = 200
    outputs: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("rtol and atol must be positive")
        if self.max_evals < 1:
            raise ValueError("max_evals must be positive")
        if self.n < 2:
            raise ValueError("n must be at least 2")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a non-negative 64-bit integer")
        if not 2 <= self.moments <= 8:
            raise ValueError("moments must be in 2..8")
        if len(self.bounds) != len(self.x0):
            raise ValueError("bounds and x0 must have equal length")
        for b in self.bounds:
            if len(b) != 2 or not b[0] < b[1]:
                raise ValueError(f"invalid bound {b}")
        extra = set(self.outputs) - set(OUTPUT_KEYS)
        if extra:
            raise ValueError(f"unknown output keys: {sorted(extra)}")
        if not isinstance(self.overrides, dict):
            raise ValueError("overrides must be an object")

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        if not isinstance(data, dict):
            raise ValueError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ScenarioConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        return cls.from_json(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")
