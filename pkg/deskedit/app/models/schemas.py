from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, ValidationError, model_validator

from deskedit.app.core.config import (
    BETA_MAX, BETA_MIN, CFG_SCALE, DENOISER_BATCH, DENOISER_LR, DENOISER_STEPS, GRAD_CLIP,
    GUIDANCE_LR, IMAGE_SIZE, INFER_STEPS, PROMPT_DROP_PROB, PROMPT_GAMMA, PROMPT_STEPS,
    SDE_ETA1, SDE_ETA2, T_TRAIN, TIME_TRAVEL_U,
)
from deskedit.app.utils.exceptions import ConfigurationError

TaskName = Literal["move", "resize", "paste", "replace", "drag"]


# --- Configuration Models ---
class ScheduleConfig(BaseModel):
    """Noise schedule parameters"""
    t_train: int = Field(T_TRAIN, ge=1, description="Number of training diffusion steps")
    beta_min: float = Field(BETA_MIN, gt=0.0, lt=1.0, description="First beta of the linear ramp")
    beta_max: float = Field(BETA_MAX, gt=0.0, lt=1.0, description="Last beta of the linear ramp")
    infer_steps: int = Field(INFER_STEPS, ge=1, description="Number of inference steps")

    @model_validator(mode="after")
    def check_ranges(self) -> "ScheduleConfig":
        if self.beta_min > self.beta_max:
            raise ValueError("beta_min must not exceed beta_max")
        if self.infer_steps > self.t_train:
            raise ValueError("infer_steps must not exceed t_train")
        return self


class SamplerConfig(BaseModel):
    """Knobs of the editing loop"""
    n: int = Field(30, ge=0, description="Guidance is applied on the first n inference steps")
    guidance_stride: int = Field(2, ge=1, description="Steps between guidance applications")
    tau_sde: Tuple[int, int] = Field((0, 25), description="Step-index interval [start, end) for regional SDE")
    tau_tt: Tuple[int, int] = Field((0, 25), description="Step-index interval [start, end) for time travel")
    U: int = Field(TIME_TRAVEL_U, ge=1, description="Inner iterations on time-travel steps")
    eta1: float = Field(SDE_ETA1, ge=0.0, le=1.0, description="SDE strength inside the edit mask")
    eta2: float = Field(SDE_ETA2, ge=0.0, le=1.0, description="SDE strength outside the edit mask")
    guidance_lr: float = Field(GUIDANCE_LR, ge=0.0, description="Base learning rate for energy guidance")
    cfg_scale: float = Field(CFG_SCALE, description="Classifier-free guidance scale")
    gamma: float = Field(PROMPT_GAMMA, ge=0.0, description="Weight of the image-prompt attention branch")
    rng_seed: int = Field(0, description="Seed for SDE noise and random initialization")
    time_travel: Literal["accurate", "random", "off"] = Field("accurate", description="Rollback mode")
    regional_guidance: bool = Field(True, description="Blend energy gradients by the edit mask")
    content_guidance: bool = Field(True, description="Include the content-consistency energy")
    random_init: bool = Field(False, description="Start from seeded noise instead of the inverted latent")
    visual_cross_attention: bool = Field(True, description="Inject memory-bank K/V into self-attention")

    @model_validator(mode="after")
    def check_invariants(self) -> "SamplerConfig":
        if self.eta2 > self.eta1:
            raise ValueError("eta2 must not exceed eta1")
        for name in ("tau_sde", "tau_tt"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValueError(f"{name} must satisfy 0 <= start <= end")
        return self


class DenoiserConfig(BaseModel):
    """Shape of the tiny attention denoiser"""
    image_size: int = Field(IMAGE_SIZE, ge=1, description="Square image side")
    patch_size: int = Field(4, ge=1, description="Patch side")
    width: int = Field(32, ge=2, description="Token width d; must be even for the timestep embedding")
    num_labels: int = Field(4, ge=1, description="Number of shape classes (a null label is added)")
    zero_init_output: bool = Field(True, description="Zero-initialize the output projection")
    seed: int = Field(0, description="Parameter initialization seed")

    @model_validator(mode="after")
    def check_geometry(self) -> "DenoiserConfig":
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.width % 2:
            raise ValueError("width must be even")
        return self


class PromptConfig(BaseModel):
    """Image tokenizer and QFormer shape"""
    image_size: int = Field(IMAGE_SIZE, ge=1, description="Square image side")
    patch_size: int = Field(8, ge=1, description="Tokenizer patch side")
    token_width: int = Field(32, ge=1, description="Width of the frozen image tokens")
    width: int = Field(32, ge=1, description="Prompt width d; matches the denoiser")
    num_queries: int = Field(8, ge=1, description="Learnable query count")
    num_blocks: int = Field(2, ge=1, description="Cross-attention submodules")
    positional: bool = Field(True, description="Add fixed positional codes to patch tokens")
    seed: int = Field(0, description="Initialization seed")

    @model_validator(mode="after")
    def check_geometry(self) -> "PromptConfig":
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        return self


class TrainConfig(BaseModel):
    """Plain SGD training budget"""
    steps: int = Field(DENOISER_STEPS, ge=0, description="Optimizer steps")
    batch_size: int = Field(DENOISER_BATCH, ge=1, description="Samples per step")
    learning_rate: float = Field(DENOISER_LR, gt=0.0, description="Fixed SGD learning rate")
    grad_clip: Optional[float] = Field(GRAD_CLIP, gt=0.0, description="Global gradient-norm clip; None is plain SGD")
    label_drop_prob: float = Field(0.1, ge=0.0, le=1.0, description="Probability of the null label (CFG)")
    drop_prob: float = Field(PROMPT_DROP_PROB, ge=0.0, le=1.0, description="Probability of the zero image prompt")
    gamma: float = Field(1.0, ge=0.0, description="Image-branch weight during prompt training")
    holdout_fraction: float = Field(0.1, ge=0.0, lt=1.0, description="Trailing share of the dataset held out")
    log_every: int = Field(500, ge=1, description="Steps between progress log lines")
    seed: int = Field(0, description="Seed for batches, timesteps and noise")


class EditSpecFile(BaseModel):
    """On-disk edit description"""
    task: TaskName
    mask: str = Field(..., description="Path to the TNSR edit mask")
    region_map: List[Tuple[int, int, int, int]] = Field(
        default_factory=list, description="(src_y, src_x, dst_y, dst_x) coordinate pairs")
    reference_id: Optional[str] = Field(None, description="Name of the reference image entries")


class ExperimentConfig(BaseModel):
    """Everything one edit run needs"""
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    image: str = Field(..., description="Source image (TNSR)")
    reference_image: Optional[str] = Field(None, description="Reference image for paste/replace (TNSR)")
    edit_spec: str = Field(..., description="EditSpec JSON path")
    denoiser: Optional[str] = Field(None, description="Trained denoiser bundle; analytic prior when empty")
    prior: Optional[str] = Field(None, description="GMM prior bundle for the analytic denoiser")
    prompt_encoder: Optional[str] = Field(None, description="Trained prompt encoder bundle")
    label: int = Field(0, ge=0, description="Class label used as the text condition")
    output_dir: str = Field("edit", description="Output directory")
    seeds: List[int] = Field(default_factory=lambda: [0], description="One run per seed")

    @model_validator(mode="after")
    def check_model_source(self) -> "ExperimentConfig":
        if self.denoiser is None and self.prior is None:
            raise ValueError("either a denoiser bundle or a GMM prior is required")
        if self.sampler.n > self.schedule.infer_steps:
            raise ValueError("sampler.n must not exceed schedule.infer_steps")
        return self

    def referenced_files(self) -> List[str]:
        paths = [self.image, self.edit_spec, self.reference_image, self.denoiser, self.prior, self.prompt_encoder]
        return [p for p in paths if p]

    def validate_paths(self) -> None:
        missing = [p for p in self.referenced_files() if not Path(p).is_file()]
        if missing:
            raise ConfigurationError(f"referenced files do not exist: {', '.join(missing)}")


# --- Report Models ---
class StepLog(BaseModel):
    """One inference step of an edit run"""
    step: int
    timestep: int
    sigma_inside: float
    sigma_outside: float
    guidance_applied: bool
    time_travel_iters: int
    e_edit: Optional[float] = None
    e_content: Optional[float] = None


class RunLog(BaseModel):
    """Per-run log written next to the edited image"""
    task: str
    seed: int
    config: Dict
    steps: List[StepLog]


class TrainReport(BaseModel):
    """Summary of a training run"""
    steps: int
    initial_loss: Optional[float] = None
    final_loss: Optional[float] = None
    heldout_initial: Optional[float] = None
    heldout_final: Optional[float] = None
    dropped_prompts: int = 0
    losses: List[float] = Field(default_factory=list)


class MetricsRow(BaseModel):
    """One row of the metrics CSV"""
    task: str
    seed: int
    objective: str
    objective_value: float
    out_of_mask_mse: float
    in_mask_change: float
    wall_time_s: float
    output: str


class CheckResult(BaseModel):
    """A single verification check"""
    name: str
    value: float
    threshold: float
    passed: bool


class VerifyReport(BaseModel):
    """Machine-readable verification report"""
    suite: str
    passed: bool
    checks: List[CheckResult]


def parse_model(model_cls, raw: str):
    """Validate JSON text into ``model_cls``; validation failures become ConfigurationError."""
    try:
        return model_cls.model_validate_json(raw)
    except ValidationError as e:
        raise ConfigurationError(f"invalid {model_cls.__name__}: {e}")


def build_model(model_cls, **values):
    try:
        return model_cls(**values)
    except ValidationError as e:
        raise ConfigurationError(f"invalid {model_cls.__name__}: {e}")
