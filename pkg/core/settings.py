"""
Configuration for SCGA runs
Loads the flat config.json into a validated pydantic model; CLI flags override file values.
"""
import json
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from core.errors import ConfigError

DEFAULT_CONFIG_PATH = Path(__file__).parent.parent / "config.json"

# Allocation used for the default distance set: more heads on wider neighborhoods.
DEFAULT_HEAD_ALLOCATION = {1: 1, 2: 1, 3: 2, 4: 4}


def allocate_heads(distances: List[int], K: int) -> Dict[int, int]:
    """
    Assign attention heads to adjacency distances

    Args:
        distances: Sorted distance list, e.g. [1, 2, 3, 4]
        K: Total number of heads

    Returns:
        Map distance -> head count summing to K
    """
    if list(distances) == [1, 2, 3, 4] and K == 8:
        return dict(DEFAULT_HEAD_ALLOCATION)
    if K < len(distances):
        raise ConfigError(f"K={K} heads cannot cover {len(distances)} distances")
    allocation = {n: 1 for n in distances}
    allocation[max(distances)] += K - len(distances)
    return allocation


class SCGAConfig(BaseModel):
    """Every hyperparameter, named after its symbol"""

    model_config = ConfigDict(extra="forbid")

    # model
    d: int = Field(64, ge=2, description="Hidden width shared by text, video and decoder")
    K: int = Field(8, ge=1, description="Attention heads for GAT, GN-GAT and the decoder")
    d_v: int = Field(32, ge=1, description="Appearance feature width")
    T: int = Field(6, ge=1, description="Frames per video")
    O: int = Field(3, ge=1, description="Objects per frame")
    tau_s: float = Field(0.4, gt=0.0, description="Spatial edge threshold on center deltas")
    tau_t: float = Field(0.2, gt=0.0, description="Temporal edge threshold on center deltas")
    distances: List[int] = Field(default_factory=lambda: [1, 2, 3, 4], description="GN-GAT adjacency distances")
    heads_per_distance: Optional[Dict[int, int]] = Field(None, description="Heads per distance (derived when omitted)")
    st_residual: bool = Field(True, description="Residual connection around GN-GAT")
    gumbel_temperature: float = Field(1.0, gt=0.0)
    decoder_blocks: int = Field(1, ge=1)
    ffn: bool = Field(True, description="Position-wise feed-forward sublayer after the four attentions")
    dropout: float = Field(0.3, ge=0.0, lt=1.0)
    max_answer_len: int = Field(30, ge=1)

    # ablation switches
    use_textual_coref: bool = True
    use_visual_coref: bool = True
    use_st_reasoner: bool = True
    use_caption: bool = True

    # optimization
    warmup: int = Field(10000, ge=1)
    lr_factor: float = Field(1.0, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.98, ge=0.0, lt=1.0)
    eps: float = Field(1e-9, gt=0.0)
    batch_size: int = Field(8, ge=1)
    epochs: int = Field(20, ge=1)
    seed: int = Field(7, ge=0)
    decode_eval: bool = Field(True, description="Run greedy decoding for exact-match during evaluation")

    # inference
    beam: int = Field(5, ge=1)
    length_penalty: float = Field(1.0, ge=0.0)

    # synthetic world
    rounds: int = Field(10, ge=1, le=10, description="Dialogue rounds per generated dialogue")
    drift: float = Field(0.05, ge=0.0, description="Max per-frame center drift of an entity")
    grid_size: int = Field(4, ge=1)
    appearance_noise: float = Field(0.1, ge=0.0)
    train_samples: int = Field(500, ge=1)
    eval_samples: int = Field(100, ge=1)

    @field_validator("distances")
    @classmethod
    def _distances_sorted(cls, value: List[int]) -> List[int]:
        if not value or any(n < 1 for n in value) or sorted(set(value)) != list(value):
            raise ValueError("distances must be a strictly increasing list of positive integers")
        return value

    @model_validator(mode="after")
    def _check_shapes(self) -> "SCGAConfig":
        if self.d % 2:
            raise ValueError("d must be even for the sinusoidal position table")
        if self.d % self.K:
            raise ValueError(f"d={self.d} is not divisible by K={self.K}")
        if self.drift >= self.tau_t:
            raise ValueError(f"drift={self.drift} must stay below tau_t={self.tau_t}")
        if self.heads_per_distance is not None:
            if sorted(self.heads_per_distance) != list(self.distances):
                raise ValueError("heads_per_distance keys must match distances")
            if sum(self.heads_per_distance.values()) != self.K:
                raise ValueError(f"heads_per_distance must sum to K={self.K}")
        elif self.use_st_reasoner and self.K < len(self.distances):
            raise ValueError(f"K={self.K} heads cannot cover {len(self.distances)} distances")
        return self

    def head_assignment(self) -> Dict[int, int]:
        if self.heads_per_distance is not None:
            return dict(self.heads_per_distance)
        return allocate_heads(self.distances, self.K)


def _format_validation_error(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        key = ".".join(str(p) for p in err.get("loc", ())) or "config"
        parts.append(f"{key}: {err.get('msg')}")
    return "; ".join(parts)


def build_config(values: Dict[str, Any]) -> SCGAConfig:
    try:
        return SCGAConfig(**values)
    except ValidationError as exc:
        raise ConfigError(f"Invalid configuration - {_format_validation_error(exc)}") from exc


def load_config(path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> SCGAConfig:
    """
    Load configuration from a flat JSON file

    Args:
        path: Config file (defaults to config.json at the project root)
        overrides: Values taking precedence over the file (None entries ignored)

    Returns:
        Validated SCGAConfig
    """
    path = Path(path) if path else DEFAULT_CONFIG_PATH
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            values = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"Config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(values, dict):
        raise ConfigError(f"Config file {path} must hold a flat JSON object")
    values = {k: v for k, v in values.items() if not k.startswith("_")}
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return build_config(values)
