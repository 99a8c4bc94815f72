"""
PDE Workbench command line
Dataset generation, pre-training, fine-tuning, evaluation, sweeps and report assembly.

Exit codes: 0 ok, 2 configuration, 3 file I/O, 4 numeric abort, 5 channel layout.
"""

import functools
import json
import logging
import os
from pathlib import Path

import click
from dotenv import load_dotenv

from checkpoint import load_checkpoint, save_checkpoint
from config import default_output_dir, load_config, thread_count
from data_factory import SPLITS, build_dataset, residual_pass_rate
from dataset_io import read_dataset, write_dataset
from errors import ConfigError, DatasetFormatError, NumericAbortError, WorkbenchError
from ledger import LedgerManager
from metrics import emit_report, evaluate as evaluate_checkpoint, load_report, report_filename, reports_dir
from pde_systems import SystemTag
from training import finetune as finetune_checkpoint, prepare_layout, pretrain as pretrain_checkpoint
from sweep import SweepService

load_dotenv()

logger = logging.getLogger(__name__)

IO_EXIT_CODE = 3
MERGED_REPORT = 'merged.csv'


def handle_errors(command):
    """Map workbench and file-system errors onto the exit-code contract."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except NumericAbortError as e:
            click.echo(f"Error: {e}", err=True)
            if e.checkpoint is not None and kwargs.get('out'):
                rescue = Path(kwargs['out']).with_suffix('.aborted.pdewbck')
                save_checkpoint(e.checkpoint, rescue)
                click.echo(f"Last good checkpoint saved to {rescue}", err=True)
            raise click.exceptions.Exit(e.exit_code)
        except WorkbenchError as e:
            click.echo(f"Error: {e}", err=True)
            raise click.exceptions.Exit(e.exit_code)
        except OSError as e:
            click.echo(f"Error: {e}", err=True)
            raise click.exceptions.Exit(IO_EXIT_CODE)

    return wrapper


def _load(config_source, seed):
    overrides = {'seed': seed} if seed is not None else None
    return load_config(config_source, overrides)


def _read_splits(data_dir, splits=SPLITS):
    directory = Path(data_dir)
    if not directory.is_dir():
        raise DatasetFormatError(f"dataset directory {directory} does not exist")
    return {split: read_dataset(directory / f'{split}.pdewb') for split in splits}


config_option = click.option('--config', 'config_source', default=None, help='Preset name or JSON configuration file.')
seed_option = click.option('--seed', type=int, default=None, help='Override the configuration seed.')


@click.group()
def cli():
    """PDE workbench: datasets, FNO pre-training, fine-tuning and evaluation."""
    logging.basicConfig(
        level=os.environ.get('PDEWB_LOG_LEVEL', 'INFO').upper(),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )


@cli.command()
@config_option
@seed_option
@click.option('--plan', required=True, help='expensive, synthetic, extended or downstream:<task>[:<ood>].')
@click.option('--out', required=True, type=click.Path(file_okay=False), help='Output directory.')
@handle_errors
def generate(config_source, seed, plan, out):
    """Generate train/val/test dataset files for a plan."""
    config = _load(config_source, seed)
    dataset_plan = config.plan(plan, workers=thread_count())
    out_dir = Path(out)
    summary = {'plan': dataset_plan.name, 'seed': dataset_plan.seed, 'ranges': dataset_plan.ranges(), 'splits': {}}
    for split in SPLITS:
        ds = build_dataset(dataset_plan, split)
        write_dataset(ds, out_dir / f'{split}.pdewb')
        summary['splits'][split] = {
            'samples': len(ds),
            'with_solution': ds.manifest['with_solution'],
            'residual_pass_rate': residual_pass_rate(ds),
            'calibration_failures': ds.manifest['calibration_failures'],
        }
    summary['config'] = config.document
    with open(out_dir / 'manifest.json', 'w') as f:
        json.dump(summary, f, indent=2, sort_keys=True)

    click.echo(f"Plan {dataset_plan.name} (seed {dataset_plan.seed}) -> {out_dir}")
    for split, info in summary['splits'].items():
        rate = info['residual_pass_rate']
        rate_text = 'n/a' if rate is None else f"{100.0 * rate:.1f}%"
        click.echo(f"  {split}: {info['samples']} samples, {info['with_solution']} solved, residual check {rate_text}")


@cli.command()
@config_option
@seed_option
@click.option('--loss', 'loss_mode', type=click.Choice(['data', 'physics', 'hybrid']), required=True)
@click.option('--data', 'data_dir', required=True, type=click.Path(), help='Directory written by generate.')
@click.option('--out', required=True, type=click.Path(dir_okay=False), help='Checkpoint file.')
@click.option('--variant', default=None, help='Model variant name recorded in the checkpoint.')
@handle_errors
def pretrain(config_source, seed, loss_mode, data_dir, out, variant):
    """Pre-train the eight-channel model with the data, physics or hybrid loss."""
    config = _load(config_source, seed)
    splits = _read_splits(data_dir, ('train', 'val'))
    log_path = Path(out).with_suffix('.log.jsonl')
    checkpoint = pretrain_checkpoint(
        config.train_config(mode=loss_mode),
        splits['train'],
        splits['val'],
        config.fno_config(),
        variant=variant,
        log_path=log_path,
    )
    checkpoint.meta['config'] = config.document
    save_checkpoint(checkpoint, out)
    click.echo(f"Best validation loss {checkpoint.meta['best_val_loss']:.6e} at epoch {checkpoint.meta['best_epoch']}")
    click.echo(f"Checkpoint: {out}  log: {log_path}")


@cli.command()
@config_option
@seed_option
@click.option('--from', 'source', required=True, help="Checkpoint file or 'scratch'.")
@click.option('--task', required=True, help='Downstream system.')
@click.option('--data', 'data_dir', required=True, type=click.Path(), help='Downstream dataset directory.')
@click.option('--n', 'n_shot', type=int, required=True, help='Training samples; 0 means zero-shot.')
@click.option('--sigma', type=float, default=0.0, show_default=True, help='Relative solution noise.')
@click.option('--out', required=True, type=click.Path(dir_okay=False), help='Checkpoint file.')
@handle_errors
def finetune(config_source, seed, source, task, data_dir, n_shot, sigma, out):
    """Fine-tune a checkpoint (or the scratch baseline) on n downstream samples."""
    config = _load(config_source, seed)
    system = SystemTag.parse(task)
    splits = _read_splits(data_dir, ('train', 'val'))
    base = None if source == 'scratch' else load_checkpoint(source)
    checkpoint = finetune_checkpoint(
        base,
        config.train_config(mode='data'),
        splits['train'],
        splits['val'],
        n_shot=n_shot,
        task=system,
        fno_config=config.fno_config(),
        sigma=sigma,
        log_path=Path(out).with_suffix('.log.jsonl') if n_shot > 0 else None,
    )
    save_checkpoint(checkpoint, out)
    if n_shot == 0:
        click.echo(f"Zero-shot: checkpoint passed through to {out}")
    else:
        click.echo(f"Fine-tuned on {n_shot} samples (sigma={sigma:g}); best validation loss "
                   f"{checkpoint.meta['best_val_loss']:.6e} -> {out}")


@cli.command()
@click.option('--checkpoint', 'checkpoint_path', required=True, type=click.Path(dir_okay=False))
@click.option('--data', 'data_path', required=True, type=click.Path(), help='Dataset file or directory (uses test).')
@click.option('--out', default=None, type=click.Path(dir_okay=False),
              help='Report file (.csv or .json); default <output_dir>/reports/<model>-<task>-<ood>-<n>.json.')
@click.option('--model', default=None, help='Model name for the report row.')
@click.option('--ood', default='', help='OOD level for the report row.')
@handle_errors
def evaluate(checkpoint_path, data_path, out, model, ood):
    """Score a checkpoint and write a one-row report."""
    checkpoint = load_checkpoint(checkpoint_path)
    data_path = Path(data_path)
    if data_path.is_dir():
        dataset = read_dataset(data_path / 'test.pdewb')
        val_path = data_path / 'val.pdewb'
        selection = read_dataset(val_path) if val_path.exists() else dataset
    else:
        dataset = read_dataset(data_path)
        selection = dataset

    tasks = {s.system for s in dataset.samples}
    for task in sorted(tasks, key=lambda t: t.code):
        prepared = prepare_layout(checkpoint, task, selection)
        if prepared is not checkpoint:
            for name, channel in prepared.meta['assigned_channels'].items():
                click.echo(f"Assigned new coefficient '{name}' to channel {channel}")
            checkpoint = prepared

    report = evaluate_checkpoint(
        checkpoint,
        dataset,
        model=model or checkpoint.meta.get('variant', ''),
        ood=ood or dataset.manifest.get('ood') or '',
        n_shot=int(checkpoint.meta.get('n_shot', 0)),
        sigma=float(checkpoint.meta.get('sigma', 0.0)),
    )
    if out is None:
        name = report_filename(report.model or 'model', report.task, report.ood or 'na', report.n_shot, 'json')
        out = reports_dir(default_output_dir()) / name
    emit_report([report], out, 'json' if Path(out).suffix == '.json' else 'csv')
    click.echo(f"mu_l2={report.mu_l2:.6e} l_inf={report.l_inf:.6e} "
               f"frmse=({report.frmse_low:.3e}, {report.frmse_mid:.3e}, {report.frmse_high:.3e}) -> {out}")


@cli.command()
@config_option
@seed_option
@click.option('--name', default='default', show_default=True, help='Sweep name under <output_dir>/sweeps.')
@click.option('--resume/--no-resume', default=True, show_default=True, help='Skip cells already finished.')
@click.option('--strict', is_flag=True, help='Exit non-zero when any cell failed.')
@handle_errors
def sweep(config_source, seed, name, resume, strict):
    """Run the model x task x OOD x n-shot x noise matrix."""
    config = _load(config_source, seed)
    ledger = LedgerManager(config.output_dir / 'sweeps').ledger(name)
    service = SweepService(config, ledger, workers=thread_count())
    summary = service.run(resume=resume)
    click.echo(f"Sweep '{name}': {summary['done']} done, {summary['failed']} failed -> {service.report_path}")
    if strict and summary['failed']:
        raise click.exceptions.Exit(1)


@cli.command()
@click.argument('inputs', nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--out', default=None, type=click.Path(dir_okay=False),
              help='Consolidated report (.csv or .json); default <output_dir>/reports/merged.csv.')
@handle_errors
def report(inputs, out):
    """Merge JSON reports into one sorted table."""
    reports = []
    for path in inputs:
        if Path(path).suffix != '.json':
            raise ConfigError(f"report merges JSON reports, got {path}")
        reports.extend(load_report(path))
    if out is None:
        out = reports_dir(default_output_dir()) / MERGED_REPORT
    emit_report(reports, out, 'json' if Path(out).suffix == '.json' else 'csv')
    click.echo(f"{len(reports)} rows -> {out}")


if __name__ == '__main__':
    cli()
