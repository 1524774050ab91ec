"""
Held-out evaluation: retrieval, step localization, linear probe, ablation grids

Every metric reads the held-out tail of the corpus only and never modifies
the parameters it is given.
"""
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np
import pandas as pd

from engine.corpus import stream_truth
from engine.encoders import clip_features, encode_clips, encode_narrations
from engine.sampling import build_positive_bag
from extensions import logger
from models import Corpus, EncoderParams, EvalConfig, ProbeResult, RetrievalResult, RunConfig
from utils.errors import MilNceError


# ---------------------------------------------------------------------------
# Retrieval
# ---------------------------------------------------------------------------

def rank_of_truth(S, gt):
    """1 + number of items scoring strictly higher than the correct one

    Ties go to the correct item.
    """
    S = np.asarray(S, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.int64)
    if S.ndim != 2:
        raise ValueError(f"score matrix must be 2-D, got shape {S.shape}")
    if gt.shape != (S.shape[0],):
        raise ValueError(f"need one ground-truth index per query, got {gt.shape} for {S.shape[0]} queries")
    if gt.size and (gt.min() < 0 or gt.max() >= S.shape[1]):
        raise ValueError(f"ground-truth index out of range [0, {S.shape[1]})")
    correct = S[np.arange(S.shape[0]), gt]
    return 1 + np.sum(S > correct[:, None], axis=1)


def summarize_ranks(ranks, ks=(1, 5, 10)) -> RetrievalResult:
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        raise ValueError("no queries to summarize")
    recall = {int(k): float(np.mean(ranks <= k)) for k in ks}
    return RetrievalResult(recall_at_k=recall, median_rank=float(np.median(ranks)), ranks=ranks)


def retrieval_eval(S, gt, ks=(1, 5, 10)) -> RetrievalResult:
    """R@K and median rank for a (queries x items) score matrix"""
    return summarize_ranks(rank_of_truth(S, gt), ks)


# ---------------------------------------------------------------------------
# Embedders
# ---------------------------------------------------------------------------

def relevant_indices(stream):
    return [j for j, entry in enumerate(stream_truth(stream)) if entry.match_index is not None]


def truth_rows(streams):
    """Flat clip row of each relevant narration's matching segment"""
    rows = []
    offset = 0
    for stream in streams:
        rows.extend(offset + entry.match_index for entry in stream_truth(stream) if entry.match_index is not None)
        offset += len(stream)
    return np.asarray(rows, dtype=np.int64)


class EncoderEmbedder:
    """Embeds every clip and every relevant narration of a group of streams"""

    def __init__(self, params: EncoderParams):
        self.params = params

    def __call__(self, streams):
        X = np.stack([seg.clip for stream in streams for seg in stream.segments])
        F = encode_clips(self.params.video, X).value[0]
        narrations = [stream.segments[j].tokens for stream in streams for j in relevant_indices(stream)]
        if not narrations:
            return F, np.zeros((0, F.shape[1]))
        return F, encode_narrations(self.params.text, narrations).value[0]


class OracleEmbedder:
    """One-hot embeddings: a pair scores 1 iff it is a ground-truth pair"""

    def __call__(self, streams):
        total = sum(len(stream) for stream in streams)
        F = np.eye(total)
        return F, F[truth_rows(streams)]


def as_embedder(source):
    if isinstance(source, EncoderParams):
        return EncoderEmbedder(source)
    return source


def pools(streams, pool_streams):
    return [streams[i:i + pool_streams] for i in range(0, len(streams), pool_streams)]


def pooled_retrieval(streams, embedder, ks=(1, 5, 10), pool_streams=10):
    """Text-to-video and video-to-text retrieval inside pools of held-out streams

    Queries are the relevant narrations (or their matching clips); the
    candidate items are every clip (or every relevant narration) of the pool.
    """
    embedder = as_embedder(embedder)
    t2v, v2t = [], []
    for group in pools(streams, pool_streams):
        rows = truth_rows(group)
        if rows.size == 0:
            continue
        F, G = embedder(group)
        t2v.append(rank_of_truth(G @ F.T, rows))
        v2t.append(rank_of_truth(F[rows] @ G.T, np.arange(rows.size)))
    if not t2v:
        logger.warning("Held-out streams contain no relevant narrations; retrieval metrics are undefined")
        return RetrievalResult.undefined(ks), RetrievalResult.undefined(ks)
    return summarize_ranks(np.concatenate(t2v), ks), summarize_ranks(np.concatenate(v2t), ks)


# ---------------------------------------------------------------------------
# Localization
# ---------------------------------------------------------------------------

def localize_steps(corpus: Corpus, embedder, streams=None):
    """Average recall of narration-to-segment localization

    Within each stream every relevant narration is assigned the clip with the
    highest score (lowest index on ties). Recall is averaged per stream and
    then over streams; streams without relevant narrations are skipped.
    """
    embedder = as_embedder(embedder)
    streams = corpus.held_out_streams() if streams is None else streams
    per_stream = []
    for stream in streams:
        relevant = relevant_indices(stream)
        if not relevant:
            continue
        F, G = embedder([stream])
        predicted = np.argmax(F @ G.T, axis=0)
        truth = truth_rows([stream])
        per_stream.append(float(np.mean(predicted == truth)))
    if not per_stream:
        logger.warning("No held-out stream has a relevant narration; localization recall is 0")
        return 0.0
    return float(np.mean(per_stream))


# ---------------------------------------------------------------------------
# Candidate selection
# ---------------------------------------------------------------------------

def _bag_size(K, length):
    K = min(K, length)
    return K if K % 2 else K - 1


def candidate_selection(corpus: Corpus, embedder, K=5, streams=None):
    """Fraction of bags whose best-scoring candidate is the truly aligned narration

    For every clip of a held-out stream the candidates are the relevant
    narrations among its K nearest in time (the positive bag used during
    training). A bag counts as a hit when its highest-scoring candidate
    (earliest on ties) describes that clip. Bags where no candidate does
    are skipped; no bag at all gives NaN.
    """
    embedder = as_embedder(embedder)
    streams = corpus.held_out_streams() if streams is None else streams
    hits = total = 0
    for stream in streams:
        relevant = relevant_indices(stream)
        if not relevant:
            continue
        row_of = {j: r for r, j in enumerate(relevant)}
        matches = truth_rows([stream])
        F, G = embedder([stream])
        scores = F @ G.T
        k = _bag_size(K, len(stream))
        for clip in range(len(stream)):
            bag = [row_of[j] for _, j in build_positive_bag(stream, clip, k).candidates if j in row_of]
            aligned = [r for r in bag if matches[r] == clip]
            if not aligned:
                continue
            best = bag[int(np.argmax(scores[clip, bag]))]
            hits += int(matches[best] == clip)
            total += 1
    if not total:
        logger.warning("No held-out bag contains its aligned narration; candidate selection is undefined")
        return float('nan')
    return hits / total


# ---------------------------------------------------------------------------
# Linear probe
# ---------------------------------------------------------------------------

def _softmax_rows(Z):
    Z = Z - Z.max(axis=1, keepdims=True)
    P = np.exp(Z)
    return P / P.sum(axis=1, keepdims=True)


def fit_logistic(X, y, num_classes, l2=1e-4, tol=1e-6, max_iter=5000, lr=0.5):
    """Multinomial logistic regression by full-batch gradient descent

    The weight matrix carries the L2 penalty; the bias is unpenalized. Step
    sizes are lr over each block's curvature bound.
    """
    n, d = X.shape
    Y = np.eye(num_classes)[y]
    W = np.zeros((d, num_classes))
    b = np.zeros(num_classes)
    curvature = 0.5 * float(np.linalg.eigvalsh(X.T @ X / n)[-1]) if d else 0.0
    step_w = lr / (curvature + l2 + 1e-12)
    step_b = lr / 0.5
    norm = float('inf')
    for it in range(max_iter):
        P = _softmax_rows(X @ W + b)
        R = (P - Y) / n
        dW = X.T @ R + l2 * W
        db = R.sum(axis=0)
        norm = math.sqrt(float(np.sum(dW * dW) + np.sum(db * db)))
        if norm < tol:
            logger.debug(f"Probe converged after {it} iterations")
            break
        W -= step_w * dW
        b -= step_b * db
    else:
        logger.warning(
            f"Probe did not converge: stopped at max_iter={max_iter} with gradient norm {norm:.2e} > tol {tol:.0e}")
    return W, b


def linear_probe(features, labels, test_mask, l2=1e-4, tol=1e-6, max_iter=5000, lr=0.5) -> ProbeResult:
    """Held-out accuracy of a logistic regression on frozen features

    test_mask marks the held-out rows; the remaining rows train the probe.
    Features are standardized with training statistics.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    test_mask = np.asarray(test_mask, dtype=bool)
    if features.shape[0] != labels.shape[0] or labels.shape != test_mask.shape:
        raise ValueError("features, labels and test_mask must have the same number of rows")
    train_mask = ~test_mask
    if not train_mask.any() or not test_mask.any():
        raise ValueError("linear_probe needs non-empty train and test splits")

    classes = np.unique(labels[train_mask])
    if classes.size < 2:
        raise ValueError("linear_probe: training split has a single class")
    raw_to_idx = {int(c): i for i, c in enumerate(classes)}

    mean = features[train_mask].mean(axis=0)
    std = features[train_mask].std(axis=0)
    std[std == 0] = 1.0
    Xs = (features - mean) / std

    y_train = np.array([raw_to_idx[int(v)] for v in labels[train_mask]])
    W, b = fit_logistic(Xs[train_mask], y_train, classes.size, l2, tol, max_iter, lr)
    predicted = classes[np.argmax(Xs[test_mask] @ W + b, axis=1)]

    truth = labels[test_mask]
    per_class, support = {}, {}
    for c in np.unique(truth):
        hit = truth == c
        per_class[int(c)] = float(np.mean(predicted[hit] == c))
        support[int(c)] = int(hit.sum())
    return ProbeResult(accuracy=float(np.mean(predicted == truth)), per_class=per_class, support=support)


def probe_split(corpus: Corpus, params: EncoderParams, cfg: EvalConfig):
    """Topic-labelled clip features of the held-out streams, split by stream"""
    streams = corpus.held_out_streams()
    if len(streams) < 2:
        raise ValueError("probe needs at least two held-out streams")
    n_train = min(max(1, int(round(len(streams) * cfg.probe_train_fraction))), len(streams) - 1)
    X = np.stack([seg.clip for stream in streams for seg in stream.segments])
    labels = np.array([seg.topic_id for stream in streams for seg in stream.segments])
    test_mask = np.repeat([i >= n_train for i in range(len(streams))], [len(s) for s in streams])
    return clip_features(params, X, cfg.probe_features), labels, test_mask


def probe_eval(corpus: Corpus, params: EncoderParams, cfg: EvalConfig) -> ProbeResult:
    features, labels, test_mask = probe_split(corpus, params, cfg)
    return linear_probe(features, labels, test_mask, cfg.probe_l2, cfg.probe_tol, cfg.probe_max_iter, cfg.probe_lr)


# ---------------------------------------------------------------------------
# Full evaluation
# ---------------------------------------------------------------------------

def evaluate(params: EncoderParams, corpus: Corpus, cfg: EvalConfig = None, embedder=None):
    """Retrieval in both directions, localization, candidate selection and probe on held-out streams

    embedder replaces the encoders for retrieval and localization scoring
    (the probe always uses params).
    """
    cfg = (cfg or EvalConfig()).validate()
    embedder = embedder or EncoderEmbedder(params)
    held_out = corpus.held_out_streams()
    t2v, v2t = pooled_retrieval(held_out, embedder, cfg.ks, cfg.pool_streams)
    localization = localize_steps(corpus, embedder, held_out)
    selection = candidate_selection(corpus, embedder, cfg.selection_k, held_out)
    probe = probe_eval(corpus, params, cfg)
    logger.info(
        f"Eval: t2v R@{max(cfg.ks)} {t2v.recall_at_k[max(cfg.ks)]:.3f}, "
        f"localization {localization:.3f}, probe {probe.accuracy:.3f}")
    return {
        'held_out_streams': len(held_out),
        'queries': int(t2v.ranks.size),
        'text_to_video': t2v.to_dict(),
        'video_to_text': v2t.to_dict(),
        'localization_recall': localization,
        'candidate_selection': None if math.isnan(selection) else selection,
        'probe': probe.to_dict(),
    }


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------

def grid_cells(axes):
    """Cartesian product of axis values, in axis order; each cell is a dict"""
    names = list(axes)
    for name in names:
        if not axes[name]:
            raise ValueError(f"ablation axis '{name}' has no values")
    return [dict(zip(names, values)) for values in itertools.product(*(axes[n] for n in names))]


def cell_id(cell):
    return ','.join(f'{k}={v}' for k, v in cell.items())


def apply_cell(run: RunConfig, cell, seed) -> RunConfig:
    """RunConfig with the cell's train overrides and the given seed"""
    if 'seed' in cell:
        raise ValueError("seeds come from the seed list, not from an ablation axis")
    unknown = [k for k in cell if not hasattr(run.train, k)]
    if unknown:
        raise ValueError(f"unknown ablation axis: {', '.join(unknown)}")
    train = replace(run.train, seed=seed, **cell)
    return replace(run, seed=seed, train=train)


def flatten_metrics(metrics):
    row = {}
    for direction, prefix in (('text_to_video', 't2v'), ('video_to_text', 'v2t')):
        for name, value in metrics[direction].items():
            row[f'{prefix}_{name}'] = float('nan') if value is None else value
    row['localization'] = metrics['localization_recall']
    selection = metrics['candidate_selection']
    row['selection'] = float('nan') if selection is None else selection
    row['probe_accuracy'] = metrics['probe']['accuracy']
    return row


def run_cell(task):
    """Train and evaluate one (cell, seed); failures are reported, not raised"""
    from engine.trainer import train

    index, cell, seed, run, corpus = task
    row = {'cell': cell_id(cell), 'seed': str(seed), **cell}
    try:
        cfg = apply_cell(run, cell, seed)
        ckpt, records = train(cfg.train, corpus, config_echo=cfg.to_dict())
        row.update(flatten_metrics(evaluate(ckpt.params, corpus, cfg.eval)))
        row['final_loss'] = records[-1].loss if records else float('nan')
        row['status'] = 'ok'
    except (MilNceError, ValueError, ArithmeticError) as e:
        logger.error(f"Ablation cell {cell_id(cell)} seed {seed} failed: {e}", exc_info=True)
        row['status'] = 'failed'
        row['error'] = str(e)
    return index, row


def ablation_grid(axes, corpus: Corpus, seeds, run: RunConfig = None, workers=1):
    """One row per (cell, seed) followed by one median row per cell

    Rows are ordered by cell then seed regardless of the number of workers.
    Median rows aggregate successful seeds only and carry seed 'median'.
    """
    run = run or RunConfig()
    cells = grid_cells(axes)
    tasks = [(i, cell, seed, run, corpus)
             for i, (cell, seed) in enumerate(itertools.product(cells, seeds))]
    logger.info(f"Ablation grid: {len(cells)} cells x {len(seeds)} seeds")

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(run_cell, tasks))
    else:
        results = [run_cell(task) for task in tasks]
    results.sort(key=lambda item: item[0])

    table = pd.DataFrame([row for _, row in results])
    if 'error' not in table:
        table['error'] = ''
    table['error'] = table['error'].fillna('')
    metric_cols = [c for c in table.columns
                   if c not in ('cell', 'seed', 'status', 'error') and c not in axes]

    medians = []
    for cell in cells:
        name = cell_id(cell)
        ok = table[(table['cell'] == name) & (table['status'] == 'ok')]
        row = {'cell': name, 'seed': 'median', **cell,
               'status': 'ok' if len(ok) else 'failed', 'error': ''}
        for col in metric_cols:
            row[col] = float(ok[col].median()) if len(ok) else float('nan')
        medians.append(row)
    table = pd.concat([table, pd.DataFrame(medians)], ignore_index=True)

    leading = ['cell', 'seed', *axes]
    trailing = ['status', 'error']
    return table[leading + [c for c in table.columns if c not in leading + trailing] + trailing]


def median_rows(table):
    return table[table['seed'] == 'median'].reset_index(drop=True)
