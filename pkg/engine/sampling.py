"""
Positive candidate bags, negative sets and batch plans
"""
import numpy as np

from models import BatchPlan, CandidateBag, Corpus, NegativeSpec, Stream


def _nearest_in_time(stream: Stream, anchor_idx, K):
    length = len(stream)
    if K < 1 or K % 2 == 0:
        raise ValueError(f"bag size K must be odd and at least 1, got {K}")
    if K > length:
        raise ValueError(f"bag size K={K} exceeds stream length {length}")
    if not 0 <= anchor_idx < length:
        raise IndexError(f"anchor {anchor_idx} outside stream of length {length}")
    t0 = stream.segments[anchor_idx].timestamp
    others = sorted(
        (j for j in range(length) if j != anchor_idx),
        key=lambda j: (abs(stream.segments[j].timestamp - t0), j),
    )
    # temporal order; near a boundary the window simply extends to the open side
    return tuple(sorted([anchor_idx] + others[:K - 1]))


def build_positive_bag(stream: Stream, anchor_idx, K) -> CandidateBag:
    """Anchor narration plus its K-1 nearest narrations in time, ties toward earlier"""
    chosen = _nearest_in_time(stream, anchor_idx, K)
    return CandidateBag(
        anchor=(stream.id, anchor_idx),
        candidates=tuple((stream.id, j) for j in chosen),
        side='text',
    )


def build_clip_bag(stream: Stream, anchor_idx, K) -> CandidateBag:
    """Anchor clip plus its K-1 nearest clips in time, for one narration"""
    chosen = _nearest_in_time(stream, anchor_idx, K)
    return CandidateBag(
        anchor=(stream.id, anchor_idx),
        candidates=tuple((stream.id, j) for j in chosen),
        side='video',
    )


def build_negatives(spec: NegativeSpec, i):
    """(clip sample, narration sample) pairs contrasted against sample i"""
    size = len(spec.batch)
    if size < 2:
        raise ValueError("negatives need a batch of at least 2 samples")
    others = [j for j in range(size) if j != i]
    text_given_video = [(i, j) for j in others]
    video_given_text = [(j, i) for j in others]
    if spec.mode == 'text_given_video':
        return text_given_video
    if spec.mode == 'video_given_text':
        return video_given_text
    return text_given_video + video_given_text


def concat_candidates(bag: CandidateBag, stream: Stream, max_words):
    """Candidate narrations joined in temporal order, truncated to max_words"""
    if len(bag) == 0:
        raise ValueError("cannot concatenate an empty bag")
    tokens = []
    for _, j in sorted(bag.candidates, key=lambda key: key[1]):
        tokens.extend(stream.segments[j].tokens)
    return tuple(tokens[:max_words])


def sample_batch(streams, batch_size, rng):
    """One (stream id, segment) anchor from each of batch_size distinct streams

    Streams are drawn without replacement, weighted by length, and the
    segment uniformly inside each; with equal-length streams every segment
    is equally likely. Anchors come back sorted by stream position.
    """
    if batch_size > len(streams):
        raise ValueError(f"batch of {batch_size} from only {len(streams)} streams")
    lengths = np.array([len(s) for s in streams], dtype=np.float64)
    picks = np.sort(rng.choice(len(streams), size=batch_size, replace=False, p=lengths / lengths.sum()))
    segments = rng.integers(0, lengths[picks].astype(np.int64))
    return [(streams[k].id, int(j)) for k, j in zip(picks, segments)]


def build_batch(corpus: Corpus, anchors, K=1, neg_mode='joint', bag_side='text',
                loss_kind='mil-nce', max_words=16) -> BatchPlan:
    """Lay out one batch as a single clip-by-narration score matrix

    Rows 0..B-1 on both sides are the anchors' own clips and narrations, so a
    negative (x_i, y_j) is simply the pair (i, j). Extra bag members are
    appended after the anchors.
    """
    by_id = {s.id: s for s in corpus.streams}
    size = len(anchors)
    if len({sid for sid, _ in anchors}) != size:
        raise ValueError("a batch takes at most one anchor per stream")
    effective_k = 1 if loss_kind in ('nce', 'max-margin') else K

    clip_keys = list(anchors)
    narrations = []
    if loss_kind == 'cat-nce':
        for sid, j in anchors:
            bag = build_positive_bag(by_id[sid], j, K)
            narrations.append(concat_candidates(bag, by_id[sid], max_words))
        effective_k = 1
    else:
        narrations = [by_id[sid].segments[j].tokens for sid, j in anchors]

    extra_narr = {}
    extra_clip = {}
    positives = []
    for i, (sid, j) in enumerate(anchors):
        stream = by_id[sid]
        pairs = []
        if bag_side == 'video':
            for key in build_clip_bag(stream, j, effective_k).candidates:
                if key == (sid, j):
                    pairs.append((i, i))
                    continue
                if key not in extra_clip:
                    extra_clip[key] = len(clip_keys)
                    clip_keys.append(key)
                pairs.append((extra_clip[key], i))
        else:
            for key in build_positive_bag(stream, j, effective_k).candidates:
                if key == (sid, j):
                    pairs.append((i, i))
                    continue
                if key not in extra_narr:
                    extra_narr[key] = size + len(extra_narr)
                    narrations.append(stream.segments[key[1]].tokens)
                pairs.append((i, extra_narr[key]))
        positives.append(np.array(pairs, dtype=np.int64).reshape(-1, 2))

    spec = NegativeSpec(mode=neg_mode, batch=tuple(range(size)))
    negatives = [np.array(build_negatives(spec, i), dtype=np.int64).reshape(-1, 2) for i in range(size)]

    return BatchPlan(
        anchors=list(anchors),
        clip_keys=clip_keys,
        narrations=narrations,
        positives=positives,
        negatives=negatives,
    )


def gather_clips(corpus: Corpus, keys):
    """(len(keys), D_in) stack of clip features"""
    by_id = {s.id: s for s in corpus.streams}
    return np.stack([by_id[sid].segments[j].clip for sid, j in keys]).astype(np.float64)
