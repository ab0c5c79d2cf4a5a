import json
from pathlib import Path
from typing import Any, Optional, Union

import click
from pydantic import BaseModel

from deskedit.app.core.logger import setup_logger
from deskedit.app.models.schemas import ScheduleConfig
from deskedit.app.services.denoiser_service import AnalyticGmmDenoiser, Denoiser, load_denoiser, load_prior
from deskedit.app.services.prompt_service import PromptEncoder, load_prompt_encoder
from deskedit.app.services.schedule_service import NoiseSchedule, build_schedule
from deskedit.app.utils.exceptions import ConfigurationError, DatasetError

logger = setup_logger("commands")


def get_schedule(cfg: Optional[ScheduleConfig] = None) -> NoiseSchedule:
    cfg = cfg or ScheduleConfig()
    return build_schedule(cfg.t_train, cfg.beta_min, cfg.beta_max, cfg.infer_steps)


def get_denoiser(schedule: NoiseSchedule, denoiser_path: Optional[str], prior_path: Optional[str]) -> Denoiser:
    """Trained tiny denoiser when a bundle is given, else the analytic oracle over the prior."""
    if denoiser_path:
        logger.info(f"Loading denoiser from {denoiser_path}")
        return load_denoiser(denoiser_path)
    if prior_path:
        logger.info(f"Using analytic denoiser over prior {prior_path}")
        return AnalyticGmmDenoiser(load_prior(prior_path), schedule)
    raise ConfigurationError("either a denoiser bundle or a GMM prior is required")


def get_prompt_encoder(path: Optional[str]) -> Optional[PromptEncoder]:
    return load_prompt_encoder(path) if path else None


def read_text(path: Union[str, Path]) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as e:
        logger.exception(f"Failed to read {path}: {e}")
        raise DatasetError(str(e), str(path))


def write_json(path: Union[str, Path], payload: Any) -> Path:
    path = Path(path)
    text = payload.model_dump_json(indent=2) if isinstance(payload, BaseModel) else json.dumps(payload, indent=2)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text + "\n", encoding="utf-8")
    except OSError as e:
        logger.exception(f"Failed to write {path}: {e}")
        raise DatasetError(str(e), str(path))
    return path


def emit(payload: Any) -> None:
    """Machine-readable result on stdout."""
    if isinstance(payload, BaseModel):
        click.echo(payload.model_dump_json(indent=2))
    else:
        click.echo(json.dumps(payload, indent=2, default=str))
