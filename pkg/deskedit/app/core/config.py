import os
from pathlib import Path

from dotenv import load_dotenv

from deskedit.app.core.logger import setup_logger
from deskedit.app.utils.exceptions import ConfigurationError

# Setup logger
logger = setup_logger("config")

# Load environment variables
load_dotenv()

# --- Output Configuration ---
OUTPUT_ROOT = Path(os.getenv("DESKEDIT_OUTPUT_ROOT", "./runs"))
METRICS_FILE = os.getenv("METRICS_FILE", "metrics.csv")

# --- Noise Schedule Configuration ---
T_TRAIN = int(os.getenv("T_TRAIN", "1000"))
BETA_MIN = float(os.getenv("BETA_MIN", "1e-4"))
BETA_MAX = float(os.getenv("BETA_MAX", "0.02"))
INFER_STEPS = int(os.getenv("INFER_STEPS", "50"))

# --- Sampling Configuration ---
CFG_SCALE = float(os.getenv("CFG_SCALE", "5.0"))
GUIDANCE_LR = float(os.getenv("GUIDANCE_LR", "0.1"))
SDE_ETA1 = float(os.getenv("SDE_ETA1", "0.4"))
SDE_ETA2 = float(os.getenv("SDE_ETA2", "0.2"))
TIME_TRAVEL_U = int(os.getenv("TIME_TRAVEL_U", "3"))

# --- Image Prompt Configuration ---
PROMPT_GAMMA = float(os.getenv("PROMPT_GAMMA", "0.5"))
PROMPT_DROP_PROB = float(os.getenv("PROMPT_DROP_PROB", "0.1"))

# --- Denoiser Training Configuration ---
IMAGE_SIZE = int(os.getenv("IMAGE_SIZE", "32"))
DENOISER_LR = float(os.getenv("DENOISER_LR", "1e-3"))
DENOISER_BATCH = int(os.getenv("DENOISER_BATCH", "32"))
DENOISER_STEPS = int(os.getenv("DENOISER_STEPS", "20000"))
PROMPT_STEPS = int(os.getenv("PROMPT_STEPS", "5000"))
# Unset means plain SGD; a positive value enables global-norm clipping.
GRAD_CLIP = float(os.environ["GRAD_CLIP"]) if os.getenv("GRAD_CLIP") else None

# Reference configuration at full Stable Diffusion scale, kept for the docs and run logs.
REFERENCE_TRAINING = {
    "optimizer": "adam",
    "learning_rate": 1e-5,
    "batch_size": 16,
    "steps": 1_000_000,
    "resolution": 512,
}


def output_dir(*parts: str) -> Path:
    """Return a directory under the output root, creating it if needed."""
    path = OUTPUT_ROOT.joinpath(*parts)
    path.mkdir(parents=True, exist_ok=True)
    logger.debug(f"Using output directory: {path}")
    return path


def assert_config():
    """Basic sanity checks for the environment-provided configuration."""
    if not 0.0 < BETA_MIN <= BETA_MAX < 1.0:
        logger.error(f"Invalid beta range [{BETA_MIN}, {BETA_MAX}]")
        raise ConfigurationError(f"BETA_MIN/BETA_MAX must satisfy 0 < min <= max < 1, got [{BETA_MIN}, {BETA_MAX}]")
    if not 0 < INFER_STEPS <= T_TRAIN:
        logger.error(f"INFER_STEPS={INFER_STEPS} incompatible with T_TRAIN={T_TRAIN}")
        raise ConfigurationError("INFER_STEPS must be positive and no larger than T_TRAIN")
    if IMAGE_SIZE <= 0 or DENOISER_BATCH <= 0:
        logger.error("IMAGE_SIZE and DENOISER_BATCH must be positive")
        raise ConfigurationError("IMAGE_SIZE and DENOISER_BATCH must be positive")
    if not 0.0 <= PROMPT_DROP_PROB <= 1.0:
        logger.error(f"PROMPT_DROP_PROB={PROMPT_DROP_PROB} outside [0, 1]")
        raise ConfigurationError("PROMPT_DROP_PROB must lie in [0, 1]")

    logger.info("Configuration validation passed")
