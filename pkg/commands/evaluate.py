"""
eval: retrieval, localization, candidate selection and probe metrics for a checkpoint
"""
import click

from commands import handle_errors
from config import build_run_config, load_run_config
from engine.evalkit import OracleEmbedder, evaluate
from engine.trainer import load_checkpoint
from utils.serialization import canonical_json, load_corpus, write_json


@click.command('eval')
@click.option('--checkpoint', 'checkpoint_path', type=click.Path(exists=True, dir_okay=False), required=True)
@click.option('--corpus', 'corpus_path', type=click.Path(exists=True, dir_okay=False), required=True)
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
              help='Run config whose eval section is used (default: the checkpoint echo).')
@click.option('--out', 'out_path', type=click.Path(dir_okay=False), default=None,
              help='Metrics JSON to write.')
@click.option('--oracle', is_flag=True, hidden=True,
              help='Score ground-truth pairs 1 and everything else 0.')
@handle_errors
def eval_command(checkpoint_path, corpus_path, config_path, out_path, oracle):
    """Evaluate a checkpoint on the held-out streams."""
    ckpt = load_checkpoint(checkpoint_path)
    corpus = load_corpus(corpus_path)
    if config_path:
        run = load_run_config(config_path)
    else:
        echo = ckpt.config if 'gen' in ckpt.config else {}
        run = build_run_config({k: echo[k] for k in ('eval',) if k in echo})

    metrics = evaluate(ckpt.params, corpus, run.eval, embedder=OracleEmbedder() if oracle else None)
    result = {
        'checkpoint_step': ckpt.step,
        'checkpoint_config': ckpt.config,
        'eval_config': run.to_dict()['eval'],
        'metrics': metrics,
    }
    if out_path:
        write_json(out_path, result)
    click.echo(canonical_json(result['metrics'], indent=2))
