"""
Direction-of-effect checks on the default desk-scale corpus
Run this from the project root: python scripts/run_trend_checks.py --out-dir runs/trends

Each check trains a small grid over several seeds and compares median
held-out text-to-video R@10 (in points) between cells.
"""
import os
import sys
from dataclasses import replace

import click
import numpy as np

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import build_run_config  # noqa: E402
from engine.corpus import generate_corpus  # noqa: E402
from engine.evalkit import ablation_grid, localize_steps, median_rows  # noqa: E402
from engine.trainer import train  # noqa: E402
from extensions import configure_logging, logger  # noqa: E402
from utils.report import write_csv  # noqa: E402

RECALL = 't2v_R@10'


def median_recall(axes, corpus, seeds, run, workers=1, out_dir=None, name=None):
    """cell id -> median R@10 in points"""
    table = ablation_grid(axes, corpus, seeds, run, workers)
    if out_dir:
        write_csv(table, os.path.join(out_dir, f'{name}.csv'), {'axes': axes, 'seeds': list(seeds)})
    medians = median_rows(table)
    return {row['cell']: 100.0 * row[RECALL] for _, row in medians.iterrows()}


def check_bag_size(corpus, seeds, run, **kw):
    """Larger positive bags help: K=5 >= K=3 - 1 and K=5 > single-positive NCE + 2"""
    mil = median_recall({'loss_kind': ['mil-nce'], 'K': [3, 5]}, corpus, seeds, run, name='bag_size', **kw)
    nce = median_recall({'loss_kind': ['nce'], 'K': [1]}, corpus, seeds, run, name='bag_size_nce', **kw)
    k3, k5, k1 = mil['loss_kind=mil-nce,K=3'], mil['loss_kind=mil-nce,K=5'], nce['loss_kind=nce,K=1']
    return k5 >= k3 - 1.0 and k5 > k1 + 2.0, f"R@10 K=1 {k1:.1f}, K=3 {k3:.1f}, K=5 {k5:.1f}"


def check_negatives(corpus, seeds, run, **kw):
    """Joint negatives are at least as good as text-given-video negatives"""
    res = median_recall({'neg_mode': ['joint', 'text_given_video']}, corpus, seeds, run, name='negatives', **kw)
    joint, one_sided = res['neg_mode=joint'], res['neg_mode=text_given_video']
    return joint >= one_sided, f"R@10 joint {joint:.1f}, (y|x) {one_sided:.1f}"


def check_batch_size(corpus, seeds, run, **kw):
    """62 joint negatives (B=32) are no worse than 14 (B=8), one point of slack"""
    res = median_recall({'batch_size': [8, 32]}, corpus, seeds, run, name='batch_size', **kw)
    small, large = res['batch_size=8'], res['batch_size=32']
    return large >= small - 1.0, f"R@10 B=8 {small:.1f}, B=32 {large:.1f}"


class RandomEmbedder:
    def __init__(self, seed, dim=16):
        self.rng = np.random.default_rng(seed)
        self.dim = dim

    def __call__(self, streams):
        clips = sum(len(s) for s in streams)
        narrations = sum(1 for s in streams for seg in s.segments if not seg.is_irrelevant)
        return self.rng.standard_normal((clips, self.dim)), self.rng.standard_normal((narrations, self.dim))


def check_clean_corpus(seeds, run, **kw):
    """On aligned data NCE localizes >= 0.9; random embeddings stay near 1/L"""
    gen = replace(run.gen, p_aligned=1.0, p_irrelevant=0.0)
    corpus = generate_corpus(gen)
    scores = []
    for seed in seeds:
        cfg = replace(run.train, loss_kind='nce', K=1, seed=seed, total_steps=min(run.train.total_steps, 2000))
        ckpt, _ = train(cfg, corpus)
        scores.append(localize_steps(corpus, ckpt.params))
    trained = float(np.median(scores))

    held = corpus.held_out_streams()
    chance = 1.0 / gen.segments_per_stream
    queries = sum(len(s) for s in held)
    sigma = np.sqrt(chance * (1 - chance) / queries)
    baseline = localize_steps(corpus, RandomEmbedder(seeds[0]))
    ok = trained >= 0.9 and abs(baseline - chance) <= 3 * sigma
    return ok, f"localization trained {trained:.3f}, random {baseline:.3f} (chance {chance:.3f})"


def run_checks(seeds=(0, 1, 2, 3, 4), run=None, workers=1, out_dir=None):
    """Run every check; returns a list of (name, passed, detail)"""
    run = run or build_run_config({})
    corpus = generate_corpus(run.gen)
    kw = {'workers': workers, 'out_dir': out_dir}
    results = []
    for name, check in (('bag_size', check_bag_size), ('negatives', check_negatives),
                        ('batch_size', check_batch_size)):
        passed, detail = check(corpus, seeds, run, **kw)
        logger.info(f"{name}: {'PASS' if passed else 'FAIL'} ({detail})")
        results.append((name, passed, detail))
    passed, detail = check_clean_corpus(seeds, run)
    results.append(('clean_corpus', passed, detail))
    return results


@click.command()
@click.option('--seeds', default=5, show_default=True, help='Number of seeds per cell.')
@click.option('--workers', default=1, show_default=True, help='Cells trained in parallel.')
@click.option('--out-dir', type=click.Path(file_okay=False), default=None, help='Where to write grid CSVs.')
def main(seeds, workers, out_dir):
    configure_logging('INFO')
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    results = run_checks(tuple(range(seeds)), workers=workers, out_dir=out_dir)
    for name, passed, detail in results:
        click.echo(f"{name:<13} {'PASS' if passed else 'FAIL'}  {detail}")
    if not all(passed for _, passed, _ in results):
        sys.exit(1)


if __name__ == '__main__':
    main()
