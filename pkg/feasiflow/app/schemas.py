"""Validated records exchanged between the library, the CLI and the files it writes."""

from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator

from feasiflow.app.base_dist import BaseKind
from feasiflow.app.coupling_flow import DEFAULT_SCALE_CLAMP

# ============================================================================
# Training
# ============================================================================

class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    batch_size: int = Field(default=32, ge=1)
    learning_rate: float = Field(default=1e-5, gt=0)
    epochs: int = Field(default=500, ge=0)
    seed: int = 0
    num_coupling_layers: int = Field(default=8, ge=2)
    conditioner_depth: int = Field(default=4, ge=1)
    conditioner_width: int = Field(default=94, ge=1)
    base_kind: BaseKind = BaseKind.GAUSSIAN
    checkpoint_every: int = Field(default=0, ge=0)
    early_stop_patience: int = Field(default=50, ge=0)

    scale_clamp: float = Field(default=DEFAULT_SCALE_CLAMP, gt=0)
    resampling_T: int = Field(default=100, ge=1)
    ema_decay: float = Field(default=0.95, ge=0, le=1)
    n_mc: int = Field(default=1024, ge=1)
    z_init_samples: int = Field(default=4096, ge=1)
    accept_width: int = Field(default=94, ge=1)
    accept_depth: int = Field(default=2, ge=1)
    exact_kernels: bool = False
    progress: bool = False

    @field_validator("base_kind", mode="before")
    @classmethod
    def normalize_base_kind(cls, value: Any) -> Any:
        return value.strip().lower() if isinstance(value, str) else value


class EpochRecord(BaseModel):
    epoch: int
    train_nll: float
    val_log_likelihood: Optional[float] = None
    val_auroc: Optional[float] = None
    criterion: Optional[float] = None
    z_ema: Optional[float] = None
    seconds: float


class TrainReport(BaseModel):
    history: List[EpochRecord] = Field(default_factory=list)
    best_epoch: Optional[int] = None
    best_criterion: Optional[float] = None
    criterion: str = "none"
    stopped_early: bool = False
    checkpoint_path: Optional[str] = None
    num_parameters: int = 0


# ============================================================================
# Evaluation
# ============================================================================

class ThresholdRecord(BaseModel):
    threshold: float
    youden_j: float
    tpr: float
    fpr: float
    n_feasible: int
    n_infeasible: int


class EvalSummary(BaseModel):
    auroc: float
    threshold: Optional[float] = None
    n: int
    n_feasible: int
    n_infeasible: int
    tp: Optional[int] = None
    fp: Optional[int] = None
    tn: Optional[int] = None
    fn: Optional[int] = None
    tpr: Optional[float] = None
    fpr: Optional[float] = None
    accuracy: Optional[float] = None
    checkpoint: Optional[str] = None


# ============================================================================
# Runs
# ============================================================================

class RunManifest(BaseModel):
    command: str
    argv: List[str]
    config: Dict[str, Any]
    seed: int
    threads: int
    versions: Dict[str, str]
    created_at: str
