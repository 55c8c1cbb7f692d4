"""Run configuration and reproducibility manifest."""
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

from app.schemas.phylo import ModelKind, PriorSpec

Subcommand = Literal["simulate", "sample", "evidence", "compare", "trees", "validate"]


class RunConfig(BaseModel):
    """Validated view over the command line for one subcommand."""

    subcommand: Subcommand
    alignment: Optional[Path] = None
    trees: list[Path] = Field(default_factory=list)
    chains: list[Path] = Field(default_factory=list)
    out: Path = Path("out")
    model: ModelKind = ModelKind.JC69
    models: list[ModelKind] = Field(default_factory=list)
    priors: PriorSpec = Field(default_factory=PriorSpec)
    n_categories: int = Field(default=4, ge=1)
    estimators: list[str] = Field(default=["idr", "hm", "am"])
    k_grid: list[float] = Field(default_factory=list)
    draws: int = Field(default=5000, ge=2)
    burn_in: int = Field(default=5000, ge=0)
    thin: int = Field(default=5, ge=1)
    seed: int = Field(ge=0)
    replicates: int = Field(default=1, ge=1)
    bootstrap: int = Field(default=1000, ge=0)
    jobs: int = Field(default=1, ge=1)
    sites: int = Field(default=200, ge=1)
    literal_hm: bool = False

    @field_validator("k_grid")
    @classmethod
    def _increasing(cls, grid: list[float]) -> list[float]:
        if any(k <= 0 for k in grid):
            raise ValueError("k grid must be positive")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("k grid must be strictly increasing")
        return grid

    @field_validator("estimators")
    @classmethod
    def _known_estimators(cls, names: list[str]) -> list[str]:
        unknown = set(names) - {"idr", "hm", "am"}
        if unknown:
            raise ValueError(f"unknown estimator(s): {', '.join(sorted(unknown))}")
        return names

    @model_validator(mode="after")
    def _inputs_exist(self) -> "RunConfig":
        paths = ([self.alignment] if self.alignment else []) + self.trees + self.chains
        missing = [str(p) for p in paths if not p.exists()]
        if missing:
            raise ValueError(f"input path(s) do not exist: {', '.join(missing)}")
        return self


class RunManifest(BaseModel):
    """Everything needed to rerun a command bit-identically."""

    command: str
    argv: list[str]
    seed: int
    derived_seeds: dict[str, int] = Field(default_factory=dict)
    inputs: dict[str, str] = Field(default_factory=dict, description="path -> sha256")
    outputs: list[str] = Field(default_factory=list)
    versions: dict[str, str] = Field(default_factory=dict)
    packing_order: list[str] = Field(default_factory=list)
