"""
ablate: train and evaluate every cell of an ablation grid over several seeds
"""
import os

import click

from commands import handle_errors
from config import build_run_config
from engine.corpus import generate_corpus
from engine.evalkit import ablation_grid
from utils.errors import ConfigError
from utils.report import write_csv, write_pdf, write_summary, write_xlsx
from utils.serialization import load_corpus, read_json

GRID_KEYS = ('axes', 'seeds', 'run')


def load_grid_config(path):
    """{"axes": {field: [values]}, "seeds": [ints], "run": {run config}}"""
    data = read_json(path)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: grid config must be a JSON object")
    unknown = sorted(set(data) - set(GRID_KEYS))
    if unknown:
        raise ConfigError(f"Unknown grid key(s): {', '.join(unknown)}")
    axes = data.get('axes') or {}
    if not isinstance(axes, dict) or not axes:
        raise ConfigError("grid config needs a non-empty 'axes' object")
    for name, values in axes.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"axis '{name}' must be a non-empty list")
    seeds = data.get('seeds', [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("'seeds' must be a non-empty list of integers")
    run = build_run_config(data.get('run', {}))
    unknown_axes = [name for name in axes if not hasattr(run.train, name) or name == 'seed']
    if unknown_axes:
        raise ConfigError(f"Unknown ablation axis: {', '.join(unknown_axes)}")
    return axes, seeds, run


@click.command('ablate')
@click.option('--grid', 'grid_path', type=click.Path(dir_okay=False), required=True,
              help='Grid config JSON.')
@click.option('--corpus', 'corpus_path', type=click.Path(exists=True, dir_okay=False), default=None,
              help='Corpus JSON (default: generate from the grid run config).')
@click.option('--out-dir', type=click.Path(file_okay=False), default=None,
              help='Output directory (default: output.dir from the run config).')
@click.option('--workers', type=int, default=1, show_default=True, help='Cells trained in parallel.')
@click.option('--xlsx', is_flag=True, help='Also write an Excel workbook.')
@click.option('--pdf', is_flag=True, help='Also write a PDF table of the medians.')
@handle_errors
def ablate_command(grid_path, corpus_path, out_dir, workers, xlsx, pdf):
    """Run an ablation grid and write the result tables."""
    axes, seeds, run = load_grid_config(grid_path)
    out_dir = out_dir or run.output.dir
    os.makedirs(out_dir, exist_ok=True)
    corpus = load_corpus(corpus_path) if corpus_path else generate_corpus(run.gen)

    table = ablation_grid(axes, corpus, seeds, run, workers=max(1, workers))
    echo = {'axes': axes, 'seeds': seeds, 'run': run.to_dict()}
    csv_path = os.path.join(out_dir, 'ablation.csv')
    write_csv(table, csv_path, echo)
    write_summary(table, os.path.join(out_dir, 'ablation.json'), echo, axes, seeds)
    if xlsx or run.output.xlsx:
        write_xlsx(table, os.path.join(out_dir, 'ablation.xlsx'))
    if pdf or run.output.pdf:
        write_pdf(table, os.path.join(out_dir, 'ablation.pdf'))

    is_median = table['seed'] == 'median'
    failed = int((~is_median & (table['status'] == 'failed')).sum())
    click.echo(f"rows: {int((~is_median).sum())} (+{int(is_median.sum())} medians)")
    click.echo(f"failed: {failed}")
    click.echo(f"table: {csv_path}")
