"""
gen: write a synthetic corpus with ground truth
"""
import click

from commands import handle_errors
from config import load_run_config
from engine.corpus import corpus_summary, generate_corpus
from utils.serialization import save_corpus


@click.command('gen')
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
              help='Run config JSON (defaults apply when omitted).')
@click.option('--out', 'out_path', type=click.Path(dir_okay=False), required=True,
              help='Corpus JSON to write.')
@click.option('--seed', type=int, default=None, help='Override the top-level seed.')
@handle_errors
def gen_command(config_path, out_path, seed):
    """Generate a narrated-stream corpus."""
    run = load_run_config(config_path, seed)
    corpus = generate_corpus(run.gen)
    save_corpus(out_path, corpus, config_echo=run.to_dict())

    stats = corpus_summary(corpus)
    click.echo(f"streams: {stats['num_streams']}")
    click.echo(f"segments: {stats['num_segments']}")
    click.echo(f"held_out_streams: {stats['held_out_streams']}")
    click.echo(f"misaligned_fraction: {stats['misaligned_fraction']:.4f}")
    click.echo(f"irrelevant_fraction: {stats['irrelevant_fraction']:.4f}")
