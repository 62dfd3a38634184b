import json
import sys
from dataclasses import replace
from functools import wraps
from pathlib import Path

import click

from infrastructure.config import load_config
from infrastructure.errors import ConfigurationError, MaskLabError
from infrastructure.logger import log
from infrastructure.run_log import log_digest
from services.analysis.report import emit_report
from services.bench import MIN_EPOCHS, bench
from services.datasets import DatasetKind, SyntheticDatasetSpec, generate, write_dataset
from services.grid import load_records, run_grid
from services.verify import SUITE_NAMES, run_verify

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG_ERROR = 2
EXIT_NOTHING_TO_REPORT = 3


def exit_codes(command):
    """Maps library exceptions onto the documented exit codes."""
    @wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except ConfigurationError as e:
            click.secho(f"Configuration error: {e}", fg='red', err=True)
            sys.exit(EXIT_CONFIG_ERROR)
        except OSError as e:
            click.secho(f"I/O error: {e}", fg='red', err=True)
            sys.exit(EXIT_CONFIG_ERROR)
        except MaskLabError as e:
            log.error(f"[CLI] {type(e).__name__}: {e}")
            click.secho(f"{type(e).__name__}: {e}", fg='red', err=True)
            sys.exit(EXIT_VERIFY_FAILED)
    return wrapper


def _with_overrides(config, out, seed):
    """--out and --seed win over the config file; the seed also keys fixed masks."""
    if out is not None:
        config = replace(config, out_dir=Path(out))
    if seed is not None:
        config = replace(config, train=replace(config.train, seed=seed),
                         variants=[replace(v, spec=replace(v.spec, seed=seed)) for v in config.variants])
    return config


@click.group(epilog="Example: python3 src/cli.py grid --config configs/example.toml --jobs 4")
def cli():
    """🧪 MaskLab CLI: stochastic-mask regularization experiments.

    Generate datasets, sweep regularizer variants over drop rates, run the
    verification suites and turn run logs into tables and charts.
    """
    pass


@cli.command(name='gen-data')
@click.option('--config', 'config_path', type=click.Path(), help='Take the [dataset] section of this config.')
@click.option('--kind', type=click.Choice([k.value for k in DatasetKind]), default=DatasetKind.GAUSSIAN_BLOBS.value,
              show_default=True)
@click.option('--n-samples', default=512, type=int, show_default=True)
@click.option('--n-features', default=8, type=int, show_default=True)
@click.option('--n-classes', default=4, type=int, show_default=True)
@click.option('--label-noise', default=0.0, type=float, show_default=True)
@click.option('--seed', default=None, type=int, help='Dataset seed (default 0).')
@click.option('--out', default='data', type=click.Path(), show_default=True, help='Output directory.')
@exit_codes
def gen_data(config_path, kind, n_samples, n_features, n_classes, label_noise, seed, out):
    """Write a synthetic dataset as features.csv + labels.csv."""
    if config_path:
        spec = load_config(config_path).dataset
        if seed is not None:
            spec = replace(spec, seed=seed)
    else:
        spec = SyntheticDatasetSpec(kind, n_samples, n_features, n_classes, label_noise, seed or 0)
    features, labels = write_dataset(generate(spec), out)
    click.secho(f"\n📁 DATASET {spec.kind.value} (id {spec.dataset_id})", fg='cyan', bold=True)
    click.echo(f"  {features}")
    click.echo(f"  {labels}")


@cli.command()
@click.option('--config', 'config_path', required=True, type=click.Path(), help='Experiment TOML file.')
@click.option('--out', default=None, type=click.Path(), help='Output directory (overrides out_dir).')
@click.option('--seed', default=None, type=int, help='Training seed (overrides [train].seed).')
@click.option('--jobs', default=1, type=click.IntRange(min=1), show_default=True, help='Parallel runs.')
@exit_codes
def grid(config_path, out, seed, jobs):
    """Train every variant at every drop rate; finished runs are skipped."""
    config = _with_overrides(load_config(config_path), out, seed)
    result = run_grid(config, jobs=jobs)

    click.secho("\n📊 GRID", fg='green', bold=True)
    click.echo(f"  Logs:     {result.log_dir}")
    click.echo(f"  Executed: {result.executed} | Skipped (complete): {result.skipped}")
    click.echo(f"  Records:  {len(result.records)}")
    click.echo(f"  Digest:   {log_digest(result.log_dir)}")
    for key, error in sorted(result.errors.items()):
        click.secho(f"  ⚠️  {key}: {error}", fg='yellow')


@cli.command()
@click.argument('suite', type=click.Choice(list(SUITE_NAMES) + ['all']), default='all')
@click.option('--out', default=None, type=click.Path(), help='Also write verify_report.json here.')
@exit_codes
def verify(suite, out):
    """Run the property-check suites; prints a JSON pass/fail report."""
    report_path = Path(out) / "verify_report.json" if out else None
    report = run_verify(suite, report_path)
    click.echo(json.dumps(report.to_dict(), indent=2))
    for check in report.failures:
        click.secho(f"FAILED {check.suite}/{check.name}: {check.detail}", fg='red', err=True)
    if not report.passed:
        sys.exit(EXIT_VERIFY_FAILED)


@cli.command()
@click.option('--logs', 'log_dir', required=True, type=click.Path(), help='Run log directory written by grid.')
@click.option('--out', default='report', type=click.Path(), show_default=True, help='Output directory.')
@click.option('--k', default=3, type=click.IntRange(min=1), show_default=True, help='Records per variant in topk.csv.')
@click.option('--rank-k', default=5, type=click.IntRange(min=1), show_default=True, help='Records per variant for the Friedman test.')
@exit_codes
def report(log_dir, out, k, rank_k):
    """Top-k tables, rank statistics and SVG charts from run logs."""
    result = emit_report(load_records(log_dir), out, k=k, rank_k=rank_k)
    click.secho("\n📊 REPORT", fg='green', bold=True)
    click.echo(f"  {result.topk_csv}")
    click.echo(f"  {result.rank_csv}")
    for svg in result.svgs:
        click.echo(f"  {svg}")
    if result.rank_report is not None:
        r = result.rank_report
        click.echo(f"  Friedman χ²={r.friedman_chi2:.3f}, p={r.p_value:.2e}, W={r.kendall_w:.3f} "
                   f"(n={r.n_blocks}, k={r.k_variants})")
    if result.empty:
        click.secho("No usable records: wrote header-only tables, no charts.", fg='yellow', err=True)
        sys.exit(EXIT_NOTHING_TO_REPORT)


@cli.command(name='bench')
@click.option('--config', 'config_path', required=True, type=click.Path(), help='Experiment TOML file.')
@click.option('--epochs', default=MIN_EPOCHS, type=int, show_default=True)
@click.option('--seed', default=None, type=int)
@click.option('--out', default=None, type=click.Path(), help='Also write bench.csv here.')
@exit_codes
def bench_cmd(config_path, epochs, seed, out):
    """Mean ± std epoch seconds per variant, with overhead relative to Dropout."""
    config = _with_overrides(load_config(config_path), None, seed)
    table = bench(config, epochs=epochs)
    click.secho("\n⏱️  EPOCH DURATION (seconds)", fg='cyan', bold=True)
    click.echo(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        table.to_csv(Path(out) / "bench.csv", index=False, lineterminator="\n")


if __name__ == "__main__":
    cli()
