"""Validated experiment configuration and report models."""

from typing import Annotated, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .config import config


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class _EnvCommon(_Section):
    discount: float = Field(0.8, ge=0.0, lt=1.0)
    seed: int = Field(0, ge=0)
    policy: Literal["random", "greedy"] = "random"
    policy_seed: int = Field(1, ge=0)
    policy_epsilon: float = Field(0.0, ge=0.0, le=1.0)


class GarnetEnvConfig(_EnvCommon):
    """Garnet(n_states, n_actions, branching)."""
    kind: Literal["garnet"] = "garnet"
    n_states: int = Field(6, ge=1)
    n_actions: int = Field(2, ge=1)
    branching: int = Field(3, ge=1)

    @model_validator(mode="after")
    def _branching_fits(self):
        if self.branching > self.n_states:
            raise ValueError("branching cannot exceed n_states")
        return self


class LakeEnvConfig(_EnvCommon):
    """Gridworld with holes; the start tile is state 0."""
    kind: Literal["lake"]
    width: int = Field(8, ge=1)
    height: int = Field(8, ge=1)
    hole_fraction: float = Field(0.2, ge=0.0, lt=1.0)
    slippery: bool = True
    policy: Literal["random", "greedy"] = "greedy"
    policy_epsilon: float = Field(0.1, ge=0.0, le=1.0)


EnvConfig = Annotated[Union[GarnetEnvConfig, LakeEnvConfig], Field(discriminator="kind")]


class FeaturesConfig(_Section):
    dim: int = Field(2, ge=1)
    seed: int = Field(2, ge=0)


class ScheduleConfig(_Section):
    """c0 / k0 left unset are derived from the TD stability threshold."""
    c0: Optional[float] = Field(None, gt=0.0)
    k0: Optional[int] = Field(None, ge=0)
    gamma: float = Field(0.6, ge=0.5, lt=1.0)


class ExperimentSection(_Section):
    n_grid: List[int] = Field(..., min_length=1)
    replicates: int = Field(..., ge=1)
    levels: List[float] = Field(default_factory=lambda: [0.8, 0.9, 0.95])
    direction: Literal["feature_of_state", "random_unit", "explicit"] = "feature_of_state"
    direction_state: int = Field(0, ge=0)
    direction_seed: int = Field(0, ge=0)
    direction_vector: Optional[List[float]] = None
    base_seed: int = Field(0, ge=0, lt=2 ** 64)
    threads: int = Field(default_factory=lambda: config.THREADS, ge=1)
    batch_size: int = Field(default_factory=lambda: config.BATCH_SIZE, ge=1)
    burn_in: int = Field(0, ge=0)

    @field_validator("n_grid")
    @classmethod
    def _increasing_grid(cls, v: List[int]) -> List[int]:
        if any(n < 4 for n in v):
            raise ValueError("every n in n_grid must be >= 4")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("n_grid must be strictly increasing")
        return v

    @field_validator("levels")
    @classmethod
    def _open_levels(cls, v: List[float]) -> List[float]:
        if not v or any(not 0.0 < level < 1.0 for level in v):
            raise ValueError("levels must be non-empty and lie in (0, 1)")
        return v

    @model_validator(mode="after")
    def _direction_vector_given(self):
        if self.direction == "explicit" and not self.direction_vector:
            raise ValueError("explicit direction requires direction_vector")
        return self


class BootstrapConfig(_Section):
    block_rule: Literal["explicit", "pow45", "pow34"] = "pow45"
    block_len: Optional[Union[int, List[int]]] = None

    @model_validator(mode="after")
    def _explicit_needs_length(self):
        if self.block_rule == "explicit" and self.block_len is None:
            raise ValueError("explicit block rule requires block_len")
        return self


class ExperimentConfig(_Section):
    """Full experiment file: [env], [features], [schedule], [experiment], [bootstrap]."""

    env: EnvConfig
    features: FeaturesConfig = Field(default_factory=FeaturesConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    experiment: ExperimentSection
    bootstrap: BootstrapConfig = Field(default_factory=BootstrapConfig)

    @model_validator(mode="after")
    def _block_list_matches_grid(self):
        block_len = self.bootstrap.block_len
        if isinstance(block_len, list) and len(block_len) != len(self.experiment.n_grid):
            raise ValueError("bootstrap.block_len list must align with experiment.n_grid")
        if self.experiment.direction_vector is not None and \
                len(self.experiment.direction_vector) != self.features.dim:
            raise ValueError("direction_vector length must equal features.dim")
        return self

    def block_for(self, index: int) -> Optional[int]:
        """Explicit block length for the index-th grid point, None for the power rules."""
        block_len = self.bootstrap.block_len
        if self.bootstrap.block_rule != "explicit":
            return None
        return block_len[index] if isinstance(block_len, list) else block_len


class DiagnosticsReport(BaseModel):
    """Assumption checklist for one configured problem."""

    t_mix: Optional[int]
    dobrushin_at_t_mix: Optional[float]
    hurwitz: bool
    lambda_min_design: float
    a_td: float
    alpha_max_td: float
    a_lyapunov: float
    alpha_max_lyapunov: float
    kappa_q: float
    noise_sup: float
    noise_bound_td: float
    c_a: float
    c_a_bound_td: float
    c0: float
    k0: int
    gamma: float
    c0_within_alpha_max: bool
    sigma2_u: float
    theta_star: List[float]
    value_rms_error: float
