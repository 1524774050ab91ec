"""
Training objectives

The NCE family (nce, mil-nce, max-nce, attn-nce, cat-nce) returns a
log-ratio to maximize, always as a difference of logsumexp terms so large
dot products never overflow. max-margin and binary-ce return a loss to
minimize. Per-sample gradients are taken w.r.t. the raw scores; the batch
helpers chain them through the score matrices into the encoders.
"""
from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from engine.encoders import encode_clips, encode_narrations
from engine.numkernel import DTYPE, logsumexp, softmax, score_matrix, log_sigmoid, sigmoid
from models import BatchPlan, EncoderParams, LossResult, SampleScores
from utils.constants import LOSS_KINDS, is_maximized


def _contrast(pooled, negatives):
    """pooled - logsumexp([pooled] + negatives) with its partials"""
    lse = logsumexp(np.concatenate([[pooled], negatives]))
    weights = lse.backward(1.0)
    return pooled - lse.value, 1.0 - weights[0], -weights[1:]


def nce(s: SampleScores) -> LossResult:
    if s.positives.size != 1:
        raise ValueError(f"nce takes exactly one positive, got {s.positives.size}")
    value, d_pooled, d_neg = _contrast(float(s.positives[0]), s.negatives)
    return LossResult(value, np.array([d_pooled]), d_neg)


def mil_nce(s: SampleScores) -> LossResult:
    """log(sum_P e^s / (sum_P e^s + sum_N e^s))"""
    k = s.positives.size
    both = np.concatenate([s.positives, s.negatives])
    num = logsumexp(s.positives)
    den = logsumexp(both)
    d_den = den.backward(1.0)
    d_pos = num.backward(1.0) - d_den[:k]
    return LossResult(num.value - den.value, d_pos, -d_den[k:])


def max_nce(s: SampleScores) -> LossResult:
    """Hard max over the positive candidates; gradient only reaches the argmax"""
    best = int(np.argmax(s.positives))
    value, d_pooled, d_neg = _contrast(float(s.positives[best]), s.negatives)
    d_pos = np.zeros_like(s.positives)
    d_pos[best] = d_pooled
    return LossResult(value, d_pos, d_neg)


def attn_nce(s: SampleScores) -> LossResult:
    """Soft-attention pooled positive score contrasted against the negatives"""
    if s.attn_scores is None:
        raise ValueError("attn_nce needs attention scores")
    a = softmax(s.attn_scores)
    pooled = float(a @ s.positives)
    value, d_pooled, d_neg = _contrast(pooled, s.negatives)
    d_pos = d_pooled * a
    d_attn = d_pooled * a * (s.positives - pooled)
    return LossResult(value, d_pos, d_neg, d_attn=d_attn)


def margin_ranking(s: SampleScores, margin=0.2) -> LossResult:
    """sum over negatives of max(0, margin - s+ + s-), one positive per sample"""
    if s.positives.size != 1:
        raise ValueError("max-margin takes exactly one positive per sample")
    hinge = margin - s.positives[0] + s.negatives
    active = (hinge > 0.0).astype(DTYPE)
    value = float(np.sum(np.maximum(hinge, 0.0)))
    return LossResult(value, np.array([-active.sum()]), active, maximize=False)


def max_margin(S, margin=0.2) -> LossResult:
    """Bidirectional ranking hinge over a square score matrix, diagonal positive

    value = (1/B) sum_i sum_{j != i} [max(0, m - S_ii + S_ij) + max(0, m - S_ii + S_ji)]
    d_positives holds the diagonal gradient, d_negatives the full matrix gradient.
    """
    S = np.asarray(S, dtype=DTYPE)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"max_margin needs a square score matrix, got {S.shape}")
    size = S.shape[0]
    dS = np.zeros_like(S)
    total = 0.0
    for i in range(size):
        others = [j for j in range(size) if j != i]
        negs = np.concatenate([S[i, others], S[others, i]])
        res = margin_ranking(SampleScores([S[i, i]], negs), margin)
        total += res.value
        dS[i, i] += res.d_positives[0]
        dS[i, others] += res.d_negatives[:len(others)]
        dS[others, i] += res.d_negatives[len(others):]
    dS /= size
    return LossResult(total / size, np.diag(dS).copy(), dS, maximize=False)


def binary_ce(pos_scores, neg_scores) -> LossResult:
    """Sigmoid cross entropy: mean -log s(p) plus mean -log(1 - s(n))"""
    pos = np.atleast_1d(np.asarray(pos_scores, dtype=DTYPE))
    neg = np.atleast_1d(np.asarray(neg_scores, dtype=DTYPE))
    if pos.size == 0 or neg.size == 0:
        raise ValueError("binary_ce needs positive and negative scores")
    value = float(-np.mean(log_sigmoid(pos)) - np.mean(log_sigmoid(-neg)))
    d_pos = -(1.0 - sigmoid(pos)) / pos.size
    d_neg = sigmoid(neg) / neg.size
    return LossResult(value, d_pos, d_neg, maximize=False)


def sample_objective(loss_kind, s: SampleScores, margin=0.2) -> LossResult:
    if loss_kind in ('nce', 'cat-nce'):
        return nce(s)
    if loss_kind == 'mil-nce':
        return mil_nce(s)
    if loss_kind == 'max-nce':
        return max_nce(s)
    if loss_kind == 'attn-nce':
        return attn_nce(s)
    if loss_kind == 'max-margin':
        return margin_ranking(s, margin)
    if loss_kind == 'binary-ce':
        return binary_ce(s.positives, s.negatives)
    raise ValueError(f"Unknown loss kind: {loss_kind}")


@dataclass
class BatchResult:
    loss_kind: str
    value: float
    loss: float
    samples: List[LossResult]


def batch_objective(loss_kind, samples, margin=0.2) -> BatchResult:
    """Mean of the per-sample objectives; gradients are already scaled by 1/B"""
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"Unknown loss kind: {loss_kind}")
    if not samples:
        raise ValueError("batch_objective needs at least one sample")
    sizes = {s.positives.size for s in samples}
    if len(sizes) != 1:
        raise ValueError(f"inconsistent positive bag sizes in batch: {sorted(sizes)}")
    if len({s.attn_scores is None for s in samples}) != 1:
        raise ValueError("attention scores present for some samples only")

    size = len(samples)
    results = []
    for s in samples:
        res = sample_objective(loss_kind, s, margin)
        res.d_positives = res.d_positives / size
        res.d_negatives = res.d_negatives / size
        if res.d_attn is not None:
            res.d_attn = res.d_attn / size
        results.append(res)
    value = float(sum(r.value for r in results) / size)
    loss = -value if is_maximized(loss_kind) else value
    return BatchResult(loss_kind, value, loss, results)


# ---------------------------------------------------------------------------
# Chaining through the encoders
# ---------------------------------------------------------------------------

def plan_scores(plan: BatchPlan, S, Sa=None):
    samples = []
    for pos, neg in zip(plan.positives, plan.negatives):
        attn = Sa[pos[:, 0], pos[:, 1]] if Sa is not None else None
        samples.append(SampleScores(S[pos[:, 0], pos[:, 1]], S[neg[:, 0], neg[:, 1]], attn))
    return samples


def batch_loss_and_grads(params: EncoderParams, plan: BatchPlan, clips, loss_kind,
                         margin=0.2, clip_grad=False):
    """Loss to minimize and its gradient for every trainable array

    clips is the (len(plan.clip_keys), D_in) feature stack. With clip_grad the
    gradient w.r.t. the clip features is returned under 'clips'.
    """
    with_attention = loss_kind == 'attn-nce'
    video = encode_clips(params.video, clips, with_attention)
    text = encode_narrations(params.text, plan.narrations, with_attention)
    F, Fa = video.value
    G, Ga = text.value
    scores = score_matrix(F, G)
    attn = score_matrix(Fa, Ga) if with_attention else None

    batch = batch_objective(loss_kind, plan_scores(plan, scores.value, attn.value if attn else None), margin)
    # gradients of the minimized loss
    sign = -1.0 if is_maximized(loss_kind) else 1.0
    dS = np.zeros_like(scores.value)
    dSa = np.zeros_like(attn.value) if attn is not None else None
    for pos, neg, res in zip(plan.positives, plan.negatives, batch.samples):
        np.add.at(dS, (pos[:, 0], pos[:, 1]), sign * res.d_positives)
        np.add.at(dS, (neg[:, 0], neg[:, 1]), sign * res.d_negatives)
        if dSa is not None:
            np.add.at(dSa, (pos[:, 0], pos[:, 1]), sign * res.d_attn)

    dF, dG = scores.backward(dS)
    dFa = dGa = None
    if attn is not None:
        dFa, dGa = attn.backward(dSa)
    grads: Dict[str, np.ndarray] = {}
    grads.update(video.backward((dF, dFa)))
    grads.update(text.backward((dG, dGa)))
    if not clip_grad:
        grads.pop('clips', None)
    return batch, grads
