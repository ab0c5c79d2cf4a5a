from pathlib import Path
from typing import Optional

import click

from deskedit.app.commands.common import emit, write_json
from deskedit.app.core.config import METRICS_FILE, OUTPUT_ROOT
from deskedit.app.core.logger import setup_logger
from deskedit.app.services.metrics_service import load_metrics, summarize
from deskedit.app.services.verify_service import run_suite

logger = setup_logger("verify_commands")


@click.command("verify")
@click.argument("suite_name")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Also write the report here")
@click.pass_context
def verify_cmd(ctx: click.Context, suite_name: str, seed: int, out: Optional[str]):
    """Run a verification suite; exit status 0 only if every check passes.

    Suites: limits, inverse, oracle, marginals, roundtrip, gradcheck, sde,
    masking, fused, blobmove, training.
    """
    report = run_suite(suite_name, seed)
    if out:
        write_json(out, report)
    emit(report)
    ctx.exit(0 if report.passed else 1)


@click.command("stats")
@click.option("--metrics", "metrics_path", type=click.Path(dir_okay=False), default=None, help="Metrics CSV")
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="csv", show_default=True)
def stats_cmd(metrics_path: Optional[str], fmt: str):
    """Aggregate the metrics CSV per task and objective for plotting."""
    path = Path(metrics_path) if metrics_path else OUTPUT_ROOT / METRICS_FILE
    stats = summarize(load_metrics(path))
    logger.info(f"Summarized {path}: {len(stats)} groups")
    if fmt == "json":
        emit(stats.to_dict(orient="records"))
    else:
        click.echo(stats.to_csv(index=False), nl=False)

