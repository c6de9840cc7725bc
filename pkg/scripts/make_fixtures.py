"""Regenerate the packaged synthetic patient cohort (fixtures/patients.csv)."""

from pathlib import Path

import click

from dallm.core import save_dataset
from dallm.synthetic import synthetic_dataset

FIXTURES = Path(__file__).resolve().parents[1] / "src" / "dallm" / "fixtures"


@click.command()
@click.option("--n", default=120, show_default=True, help="Number of patients.")
@click.option("--seed", default=7, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), default=FIXTURES / "patients.csv", show_default=True)
def main(n: int, seed: int, out: Path):
    ds = synthetic_dataset(n, seed)
    save_dataset(ds, out)
    click.echo(f"wrote {len(ds)} patients to {out}")


if __name__ == "__main__":
    main()
