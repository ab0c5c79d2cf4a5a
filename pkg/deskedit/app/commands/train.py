from pathlib import Path
from typing import Optional

import click

from deskedit.app.commands.common import emit, get_schedule, write_json
from deskedit.app.core.config import DENOISER_BATCH, DENOISER_LR, DENOISER_STEPS, OUTPUT_ROOT, PROMPT_STEPS
from deskedit.app.core.logger import setup_logger
from deskedit.app.models.schemas import DenoiserConfig, PromptConfig, TrainConfig, build_model
from deskedit.app.services.dataset_service import load_dataset
from deskedit.app.services.denoiser_service import (
    TinyAttentionDenoiser, heldout_loss, load_denoiser, save_denoiser, train_denoiser,
)
from deskedit.app.services.prompt_service import PromptEncoder, save_prompt_encoder, train_prompt_encoder

logger = setup_logger("train_commands")


def _report_path(out: Path) -> Path:
    return out.with_suffix(".report.json")


@click.command("train-denoiser")
@click.option("--data-dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Denoiser bundle path")
@click.option("--steps", type=int, default=DENOISER_STEPS, show_default=True)
@click.option("--batch-size", type=int, default=DENOISER_BATCH, show_default=True)
@click.option("--learning-rate", type=float, default=DENOISER_LR, show_default=True)
@click.option("--width", type=int, default=32, show_default=True)
@click.option("--patch-size", type=int, default=4, show_default=True)
@click.option("--holdout-fraction", type=float, default=0.1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def train_denoiser_cmd(data_dir: str, out: Optional[str], steps: int, batch_size: int, learning_rate: float,
                       width: int, patch_size: int, holdout_fraction: float, seed: int):
    """Train the tiny attention denoiser with plain SGD on the noise-prediction loss."""
    out = Path(out) if out else OUTPUT_ROOT / "models" / "denoiser.bundle"
    cfg = build_model(TrainConfig, steps=steps, batch_size=batch_size, learning_rate=learning_rate,
                      holdout_fraction=holdout_fraction, seed=seed)
    schedule = get_schedule()
    train, held = load_dataset(data_dir).split(cfg.holdout_fraction)
    model = TinyAttentionDenoiser.init(build_model(DenoiserConfig, image_size=train.image_size, width=width,
                                                   patch_size=patch_size, seed=seed))

    before = heldout_loss(model, held, schedule) if len(held) else None
    model, report = train_denoiser(model, train, schedule, cfg)
    after = heldout_loss(model, held, schedule) if len(held) else None
    report = report.model_copy(update={"heldout_initial": before, "heldout_final": after})

    save_denoiser(out, model)
    write_json(_report_path(out), report)
    logger.info(f"Saved denoiser to {out}; held-out loss {before} -> {after}")
    emit({"denoiser": str(out), "report": str(_report_path(out)), "heldout_initial": before,
          "heldout_final": after, "final_loss": report.final_loss})


@click.command("train-prompt")
@click.option("--data-dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--denoiser", "denoiser_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Prompt encoder bundle path")
@click.option("--steps", type=int, default=PROMPT_STEPS, show_default=True)
@click.option("--batch-size", type=int, default=DENOISER_BATCH, show_default=True)
@click.option("--learning-rate", type=float, default=DENOISER_LR, show_default=True)
@click.option("--drop-prob", type=float, default=None, help="Zero-image prompt probability")
@click.option("--gamma", type=float, default=1.0, show_default=True, help="Image-branch weight during training")
@click.option("--num-queries", type=int, default=8, show_default=True)
@click.option("--holdout-fraction", type=float, default=0.1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def train_prompt_cmd(data_dir: str, denoiser_path: str, out: Optional[str], steps: int, batch_size: int,
                     learning_rate: float, drop_prob: Optional[float], gamma: float, num_queries: int,
                     holdout_fraction: float, seed: int):
    """Train the QFormer prompt encoder against a frozen denoiser."""
    out = Path(out) if out else OUTPUT_ROOT / "models" / "prompt.bundle"
    values = dict(steps=steps, batch_size=batch_size, learning_rate=learning_rate, gamma=gamma,
                  holdout_fraction=holdout_fraction, seed=seed)
    if drop_prob is not None:
        values["drop_prob"] = drop_prob
    cfg = build_model(TrainConfig, **values)
    schedule = get_schedule()
    denoiser = load_denoiser(denoiser_path)
    train, held = load_dataset(data_dir).split(cfg.holdout_fraction)
    prompt = PromptEncoder.init(build_model(PromptConfig, image_size=train.image_size,
                                            width=denoiser.config.width, num_queries=num_queries, seed=seed))

    prompt, report = train_prompt_encoder(prompt, denoiser, train, schedule, cfg)
    text_only = with_prompt = None
    if len(held):
        text_only = heldout_loss(denoiser, held, schedule)
        with_prompt = heldout_loss(denoiser, held, schedule, image_tokens_fn=prompt.encode, gamma=cfg.gamma)
    report = report.model_copy(update={"heldout_initial": text_only, "heldout_final": with_prompt})

    save_prompt_encoder(out, prompt)
    write_json(_report_path(out), report)
    logger.info(f"Saved prompt encoder to {out}; held-out text-only {text_only}, with prompt {with_prompt}")
    emit({"prompt_encoder": str(out), "report": str(_report_path(out)), "heldout_text_only": text_only,
          "heldout_with_prompt": with_prompt, "dropped_prompts": report.dropped_prompts})
