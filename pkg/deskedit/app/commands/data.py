from pathlib import Path
from typing import Optional, Tuple

import click
import numpy as np

from deskedit.app.commands.common import emit, write_json
from deskedit.app.core.config import IMAGE_SIZE, OUTPUT_ROOT
from deskedit.app.core.logger import setup_logger
from deskedit.app.services.dataset_service import blob_mask, blob_position_prior, generate_blobs, write_dataset
from deskedit.app.services.denoiser_service import save_prior
from deskedit.app.services.task_service import (
    build_drag_spec, build_move_spec, build_paste_spec, build_replace_spec, build_resize_spec,
)
from deskedit.app.utils.exceptions import ConfigurationError
from deskedit.app.utils.tensor_io import load_tensor

logger = setup_logger("data_commands")


@click.command("gen-data")
@click.option("--out-dir", type=click.Path(file_okay=False), default=None, help="Dataset directory")
@click.option("--count", type=int, default=1000, show_default=True)
@click.option("--image-size", type=int, default=IMAGE_SIZE, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--prior-out", type=click.Path(dir_okay=False), default=None,
              help="Also write the blob-position GMM prior used by the analytic denoiser")
def gen_data(out_dir: Optional[str], count: int, image_size: int, seed: int, prior_out: Optional[str]):
    """Generate labeled grayscale blob images as TNSR files plus a JSON manifest."""
    out_dir = Path(out_dir) if out_dir else OUTPUT_ROOT / "data"
    dataset = generate_blobs(count, image_size, seed)
    manifest = write_dataset(out_dir, dataset)
    result = {"manifest": str(manifest), "count": len(dataset), "image_size": image_size, "seed": seed}
    if prior_out:
        prior = blob_position_prior(image_size)
        save_prior(prior_out, prior)
        result["prior"] = prior_out
        logger.info(f"Wrote blob-position prior with {len(prior.weights)} components to {prior_out}")
    emit(result)


@click.command("make-spec")
@click.option("--task", type=click.Choice(["move", "resize", "paste", "replace", "drag"]), required=True)
@click.option("--image", "image_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Source image; its bright blob is the object to edit")
@click.option("--reference", "reference_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--offset", type=(int, int), default=(0, 0), show_default=True, help="dy dx for move and paste")
@click.option("--scale", type=float, default=1.0, show_default=True, help="Resize factor")
@click.option("--handle", "handles", type=(int, int), multiple=True, help="Drag handle y x (repeatable)")
@click.option("--target", "targets", type=(int, int), multiple=True, help="Drag target y x (repeatable)")
@click.option("--radius", type=int, default=3, show_default=True, help="Drag neighbourhood radius")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="EditSpec JSON path")
def make_spec(task: str, image_path: str, reference_path: Optional[str], offset: Tuple[int, int], scale: float,
              handles, targets, radius: int, out: str):
    """Build an EditSpec from intuitive task parameters."""
    source = load_tensor(image_path).numpy()
    reference = load_tensor(reference_path).numpy() if reference_path else None
    if task in ("paste", "replace") and reference is None:
        raise ConfigurationError(f"task '{task}' needs --reference")

    if task == "move":
        spec = build_move_spec(blob_mask(source), offset)
    elif task == "resize":
        spec = build_resize_spec(blob_mask(source), scale)
    elif task == "paste":
        spec = build_paste_spec(blob_mask(reference), offset)
    elif task == "replace":
        spec = build_replace_spec(blob_mask(source), blob_mask(reference))
    else:
        spec = build_drag_spec(list(handles), list(targets), source.shape, radius)

    out = Path(out)
    spec_file = spec.to_file(out.with_suffix(".mask.tnsr"))
    write_json(out, spec_file)
    emit({"spec": str(out), "task": task, "pairs": len(spec.region_map),
          "mask_area": int(np.count_nonzero(spec.mask))})
