import threading
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence, Tuple

import click

from deskedit.app.commands.common import emit, get_denoiser, get_prompt_encoder, get_schedule, read_text, write_json
from deskedit.app.core.config import METRICS_FILE, OUTPUT_ROOT, output_dir
from deskedit.app.core.logger import setup_logger
from deskedit.app.models.schemas import EditSpecFile, ExperimentConfig, MetricsRow, parse_model
from deskedit.app.services.guidance_service import EditSpec
from deskedit.app.services.metrics_service import append_metrics, edit_objective, in_mask_change, out_of_mask_mse
from deskedit.app.services.prompt_service import build_condition
from deskedit.app.services.sampler_service import MemoryBank, invert, reconstruct, run_edit, save_bank
from deskedit.app.utils.exceptions import DeskEditException
from deskedit.app.utils.tensor import Tensor
from deskedit.app.utils.tensor_io import load_tensor, save_pgm, save_tensor

logger = setup_logger("edit_commands")

# Appends from parallel runs must not interleave.
_metrics_lock = threading.Lock()


@click.command("invert")
@click.option("--image", "image_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--denoiser", "denoiser_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--prior", "prior_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--reference", "reference_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--prompt-encoder", "prompt_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--label", type=int, default=0, show_default=True)
@click.option("--cfg-scale", type=float, default=1.0, show_default=True)
@click.option("--gamma", type=float, default=0.0, show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False), default="invert", show_default=True)
def invert_cmd(image_path: str, denoiser_path: Optional[str], prior_path: Optional[str],
               reference_path: Optional[str], prompt_path: Optional[str], label: int, cfg_scale: float,
               gamma: float, out_dir: str):
    """Invert an image to z_T, store the memory bank and the reconstruction."""
    schedule = get_schedule()
    denoiser = get_denoiser(schedule, denoiser_path, prior_path)
    x0 = load_tensor(image_path)
    x0_ref = load_tensor(reference_path) if reference_path else None
    cond = build_condition(denoiser, label, cfg_scale, gamma, get_prompt_encoder(prompt_path), x0,
                           x0_ref)

    z_T, bank = invert(x0, cond, denoiser, schedule, x0_ref)
    rec = reconstruct(z_T, cond, denoiser, schedule)
    err = float(((rec.data - x0.data) ** 2).sum() / max((x0.data ** 2).sum(), 1e-12))

    out = output_dir(out_dir)
    save_tensor(out / "z_T.tnsr", z_T)
    save_bank(out / "bank.bundle", bank)
    save_tensor(out / "reconstruction.tnsr", rec)
    save_pgm(out / "reconstruction.pgm", rec)
    logger.info(f"Inverted {image_path}: reconstruction relative MSE {err:.3e}")
    emit({"z_T": str(out / "z_T.tnsr"), "bank": str(out / "bank.bundle"), "bank_entries": len(bank),
          "reconstruction_rel_mse": err})


def _run_one(seed: int, config: ExperimentConfig, spec: EditSpec, x0: Tensor, x0_ref: Optional[Tensor], cond,
             denoiser, schedule, inversion: Tuple[Tensor, MemoryBank], out: Path, metrics_path: Path) -> dict:
    cfg = config.sampler.model_copy(update={"rng_seed": seed})
    resolved = config.model_copy(update={"sampler": cfg}).model_dump(mode="json")
    started = time.perf_counter()
    try:
        result = run_edit(x0, x0_ref, spec, cond, denoiser, schedule, cfg, inversion=inversion)
    except DeskEditException as e:
        logger.error(f"Edit run failed for seed {seed} ({config.edit_spec}): {e.message}")
        raise
    wall = time.perf_counter() - started

    stem = f"{spec.task}_seed{seed}"
    save_tensor(out / f"{stem}.tnsr", result.image)
    save_pgm(out / f"{stem}.pgm", result.image)
    write_json(out / f"{stem}.log.json", result.run_log(spec.task, seed, resolved))

    edited, source = result.image.data, x0.data
    objective, value = edit_objective(spec, edited, source, x0_ref.data if x0_ref is not None else None)
    row = MetricsRow(task=spec.task, seed=seed, objective=objective, objective_value=value,
                     out_of_mask_mse=out_of_mask_mse(edited, source, spec.mask),
                     in_mask_change=in_mask_change(edited, source, spec.mask),
                     wall_time_s=wall, output=str(out / f"{stem}.tnsr"))
    with _metrics_lock:
        append_metrics(metrics_path, row)
    logger.info(f"Seed {seed}: {objective}={value:.4f}, out-of-mask MSE {row.out_of_mask_mse:.2e}, {wall:.1f}s")
    return row.model_dump()


@click.command("edit")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="ExperimentConfig JSON")
@click.option("--seed", "seeds", type=int, multiple=True, help="Overrides the config's seeds (repeatable)")
@click.option("--output-dir", "output_override", type=str, default=None, help="Overrides the config's output_dir")
@click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True, help="Seeds run in parallel")
@click.option("--metrics", "metrics_path", type=click.Path(dir_okay=False), default=None,
              help="Metrics CSV (appended)")
def edit_cmd(config_path: str, seeds: Sequence[int], output_override: Optional[str], jobs: int,
             metrics_path: Optional[str]):
    """Run one editing task for every seed; writes images, run logs and metrics rows."""
    config = parse_model(ExperimentConfig, read_text(config_path))
    updates = {}
    if seeds:
        updates["seeds"] = list(seeds)
    if output_override:
        updates["output_dir"] = output_override
    config = config.model_copy(update=updates)
    config.validate_paths()

    schedule = get_schedule(config.schedule)
    denoiser = get_denoiser(schedule, config.denoiser, config.prior)
    spec = EditSpec.from_file(parse_model(EditSpecFile, read_text(config.edit_spec)))
    x0 = load_tensor(config.image)
    x0_ref = load_tensor(config.reference_image) if config.reference_image else None
    prompt = get_prompt_encoder(config.prompt_encoder)
    sampler = config.sampler
    cond = build_condition(denoiser, config.label, sampler.cfg_scale, sampler.gamma, prompt, x0, x0_ref)

    # one inversion shared read-only by every seed
    inversion = invert(x0, cond, denoiser, schedule, x0_ref)
    out = output_dir(config.output_dir)
    metrics = Path(metrics_path) if metrics_path else OUTPUT_ROOT / METRICS_FILE
    logger.info(f"Editing {config.image} ({spec.task}) for seeds {config.seeds} with {jobs} job(s)")

    def task(seed: int) -> dict:
        return _run_one(seed, config, spec, x0, x0_ref, cond, denoiser, schedule, inversion, out, metrics)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(task, config.seeds))
    else:
        rows = [task(seed) for seed in config.seeds]
    emit({"output_dir": str(out), "metrics": str(metrics), "runs": rows})
