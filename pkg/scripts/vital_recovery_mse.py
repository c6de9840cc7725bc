"""Existing-value experiment: how well can a generator recover held-out vitals?

Offline by default: the Gaussian baseline against scripted backends that
return the truth plus standardized noise of each ``--sigma``.  Pass
``--config`` to also score the configured LLM through its replay cache.
"""

import json
import re
from pathlib import Path

import click

from dallm.augment import gaussian_baseline, generate_existing_values
from dallm.cli import Pipeline
from dallm.config import load_config
from dallm.core import VITALS, load_dataset, standardize
from dallm.evaluation.harness import format_mse_tables, mse_table, write_mse_tables
from dallm.llm import FunctionBackend, LLMClient
from dallm.synthetic import gaussian_noise_responder, synthetic_dataset

PATIENT = re.compile(r"^Patient: (\S+)$", re.M)


def noise_client(truth, sigma: float, seed: int) -> LLMClient:
    _, stats = standardize(truth, VITALS)
    respond = gaussian_noise_responder(truth, stats, sigma, seed)
    backend = FunctionBackend(lambda prompt, cfg: json.dumps(respond(PATIENT.search(prompt).group(1))),
                              descriptor=f"noise-sigma-{sigma}")
    return LLMClient(backend, mode="live", max_concurrent=8)


@click.command()
@click.option("--dataset", type=click.Path(exists=True, path_type=Path), help="Cohort CSV; synthetic if omitted.")
@click.option("--n", default=2000, show_default=True, help="Synthetic cohort size.")
@click.option("--sigma", type=float, multiple=True, default=(0.5, 1.0), show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path),
              help="Also score the configured LLM (uses its cache mode).")
@click.option("--output-dir", type=click.Path(path_type=Path), default=Path("runs/vital_recovery"), show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--workers", default=4, show_default=True)
def main(dataset, n, sigma, config_path, output_dir, seed, workers):
    truth = load_dataset(dataset) if dataset else synthetic_dataset(n, seed)
    tables = [mse_table(gaussian_baseline(truth, VITALS, seed), truth, VITALS, "gaussian")]
    for s in sigma:
        values = generate_existing_values(truth, VITALS, noise_client(truth, s, seed), workers)
        tables.append(mse_table(values, truth, VITALS, f"oracle sigma={s:g}"))
    if config_path:
        cfg = load_config(config_path, {"seed": seed, "workers": workers})
        client = Pipeline(cfg, output_dir).client()
        values = generate_existing_values(truth, VITALS, client, workers, cfg.failure_threshold)
        tables.append(mse_table(values, truth, VITALS, cfg.backend.model))
    output_dir.mkdir(parents=True, exist_ok=True)
    path = write_mse_tables(tables, output_dir / "mse_table.csv")
    click.echo(format_mse_tables(tables))
    click.echo(f"wrote {path}")


if __name__ == "__main__":
    main()
