"""
Central finite-difference check of every loss, end to end through both encoders

Coordinates whose +/-h perturbation changes a discrete decision (a relu
sign, a max-pool winner, a hinge becoming active, the max-nce winner) are
skipped: the loss is not differentiable across them.
"""
from dataclasses import dataclass

import numpy as np

from engine.encoders import init_params, truncate
from engine.losses import batch_loss_and_grads
from engine.sampling import build_batch, gather_clips, sample_batch
from engine.corpus import generate_corpus
from extensions import logger
from models import GenConfig
from utils.constants import GRADCHECK_STEP, GRADCHECK_TOLERANCE, LOSS_KINDS

# Denominator floor for the relative error of near-zero gradient entries
RELATIVE_FLOOR = 1e-3
MARGIN = 0.2


@dataclass
class GradCheckReport:
    loss_kind: str
    max_rel_error: float
    checked: int
    skipped: int
    worst: str = ''

    @property
    def passed(self):
        return self.max_rel_error <= GRADCHECK_TOLERANCE

    def to_dict(self):
        return {
            'loss_kind': self.loss_kind,
            'max_rel_error': self.max_rel_error,
            'checked': self.checked,
            'skipped': self.skipped,
            'worst': self.worst,
            'passed': self.passed,
        }


def tiny_problem(loss_kind, seed=0, batch_size=4, K=3):
    """Small corpus, parameters with non-zero biases and one batch plan"""
    corpus = generate_corpus(GenConfig(
        num_streams=6, segments_per_stream=6, num_topics=4, topic_dim=3, clip_dim=5,
        vocab_size=30, tokens_per_narration=3, held_out_fraction=0.0, seed=seed,
    ))
    rng = np.random.default_rng(seed)
    params = init_params(5, 30, word_dim=4, hidden_dim=6, embed_dim=4, max_words=4,
                         rng=rng, attention=loss_kind == 'attn-nce')
    for name, value in params.trainable().items():
        if value.ndim == 1:
            params.set_array(name, 0.1 * rng.standard_normal(value.shape))
    anchors = sample_batch(corpus.streams, batch_size, rng)
    plan = build_batch(corpus, anchors, K, 'joint', 'text', loss_kind, max_words=4)
    return params, plan, gather_clips(corpus, plan.clip_keys)


def decision_pattern(params, plan, clips, loss_kind, margin=MARGIN):
    """Every discrete choice the forward pass makes, as one flat bool/int vector"""
    parts = [(clips @ params.video.W1 + params.video.b1 > 0).ravel()]
    text = params.text
    for tokens in plan.narrations:
        ids = list(truncate(tokens, text.max_words))
        pre = text.E[ids] @ text.W1 + text.b1
        parts.append(np.argmax(pre, axis=0))
        parts.append(pre.max(axis=0) > 0)
    if loss_kind in ('max-nce', 'max-margin'):
        batch, _ = batch_loss_and_grads(params, plan, clips, loss_kind, margin)
        for res in batch.samples:
            if loss_kind == 'max-nce':
                parts.append(np.array([np.argmax(res.d_positives != 0)]))
            else:
                parts.append(res.d_negatives != 0)
    return np.concatenate([np.asarray(p, dtype=np.int64).ravel() for p in parts])


def _shifted(params, clips, name, index, delta):
    p = params.copy()
    c = clips
    if name == 'clips':
        c = clips.copy()
        c[index] += delta
    else:
        p.named_arrays()[name][index] += delta
    return p, c


def check_loss(loss_kind, seed=0, step=GRADCHECK_STEP, corrupt=False) -> GradCheckReport:
    """Largest relative error between analytic and central-difference gradients

    corrupt perturbs the analytic gradient of video.W2 (a negative control).
    """
    params, plan, clips = tiny_problem(loss_kind, seed)
    _, grads = batch_loss_and_grads(params, plan, clips, loss_kind, MARGIN, clip_grad=True)
    if corrupt:
        grads['video.W2'] = grads['video.W2'] * 1.01 + 1e-3

    base = decision_pattern(params, plan, clips, loss_kind)
    worst, worst_at, checked, skipped = 0.0, '', 0, 0
    for name, analytic in grads.items():
        for index in np.ndindex(analytic.shape):
            plus = _shifted(params, clips, name, index, step)
            minus = _shifted(params, clips, name, index, -step)
            if not (np.array_equal(decision_pattern(plus[0], plan, plus[1], loss_kind), base)
                    and np.array_equal(decision_pattern(minus[0], plan, minus[1], loss_kind), base)):
                skipped += 1
                continue
            f_plus = batch_loss_and_grads(plus[0], plan, plus[1], loss_kind, MARGIN)[0].loss
            f_minus = batch_loss_and_grads(minus[0], plan, minus[1], loss_kind, MARGIN)[0].loss
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic[index])
            err = abs(a - numeric) / max(abs(a), abs(numeric), RELATIVE_FLOOR)
            checked += 1
            if err > worst:
                worst, worst_at = err, f'{name}{list(index)}'
    report = GradCheckReport(loss_kind, worst, checked, skipped, worst_at)
    logger.info(f"gradcheck {loss_kind}: max rel error {worst:.2e} ({checked} checked, {skipped} skipped)")
    return report


def check_all(seed=0, corrupt=False):
    """One report per loss kind, in LOSS_KINDS order"""
    return [check_loss(kind, seed, corrupt=corrupt) for kind in LOSS_KINDS]
