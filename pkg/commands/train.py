"""
train: fit the encoders on a corpus, writing checkpoints and a metrics log
"""
import os

import click

from commands import handle_errors
from config import load_run_config
from engine.trainer import load_checkpoint, save_checkpoint, train
from extensions import logger
from utils.serialization import append_jsonl, atomic_write_text, canonical_json, load_corpus

CHECKPOINT_NAME = 'checkpoint.bin'
METRICS_NAME = 'metrics.jsonl'


@click.command('train')
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
              help='Run config JSON (defaults apply when omitted).')
@click.option('--corpus', 'corpus_path', type=click.Path(exists=True, dir_okay=False), required=True)
@click.option('--out-dir', type=click.Path(file_okay=False), default=None,
              help='Output directory (default: output.dir from the config).')
@click.option('--seed', type=int, default=None, help='Override the top-level seed.')
@click.option('--resume', 'resume_path', type=click.Path(exists=True, dir_okay=False), default=None,
              help='Continue from a checkpoint written by an earlier run.')
@handle_errors
def train_command(config_path, corpus_path, out_dir, seed, resume_path):
    """Train the video and text encoders."""
    run = load_run_config(config_path, seed)
    out_dir = out_dir or run.output.dir
    os.makedirs(out_dir, exist_ok=True)
    corpus = load_corpus(corpus_path)
    echo = run.to_dict()
    resume = load_checkpoint(resume_path) if resume_path else None

    metrics_path = os.path.join(out_dir, METRICS_NAME)
    if resume is None:
        atomic_write_text(metrics_path, canonical_json({'config': echo}) + '\n')

    def on_record(record):
        append_jsonl(metrics_path, record.to_dict())

    def on_checkpoint(ckpt):
        save_checkpoint(os.path.join(out_dir, f'checkpoint-step{ckpt.step}.bin'), ckpt)

    final, records = train(run.train, corpus, resume=resume, config_echo=echo,
                           on_record=on_record, on_checkpoint=on_checkpoint)
    ckpt_path = os.path.join(out_dir, CHECKPOINT_NAME)
    save_checkpoint(ckpt_path, final)
    logger.info(f"Training finished at step {final.step}")

    click.echo(f"checkpoint: {ckpt_path}")
    click.echo(f"metrics: {metrics_path}")
    if records:
        click.echo(f"final_loss: {records[-1].loss:.6f}")
