"""
Synthetic narrated streams

Each segment carries a clip feature, a narration and a timestamp. The
narration may describe the clip's own topic, the topic of a nearby segment
(before or after it), or nothing at all (noise vocabulary).

Seeding: SeedSequence(cfg.seed).spawn(2) gives a world sequence (projection A
and topic latents) and a stream sequence; the stream sequence is spawned once
more into one child per stream id. Each stream therefore depends only on
(seed, stream id), so streams can be generated in any order or in parallel.
All draws use numpy's PCG64 bit generator.

Topics within a stream are a run of independent permutations of the topic
ids: every position is uniform over topics, and no two segments of a stream
share a topic while segments_per_stream <= num_topics.

A misaligned narration describes a segment at a nonzero offset of at most
max_offset. The offset is drawn among targets inside the stream instead of
being clamped to the bounds, so a boundary segment never falls back to its
own topic and the misaligned fraction stays 1 - p_aligned.
"""
from typing import NamedTuple, Optional

import numpy as np

from extensions import logger
from models import Corpus, GenConfig, Segment, Stream


class AlignmentTruth(NamedTuple):
    match_index: Optional[int]
    aligned_topic_id: int
    topic_id: int


def slice_width(cfg: GenConfig):
    """Width of each topic's token slice; the noise class owns slice num_topics"""
    return cfg.vocab_size // (cfg.num_topics + 1)


def topic_slice(cfg: GenConfig, topic):
    width = slice_width(cfg)
    return topic * width, (topic + 1) * width


def _world(cfg: GenConfig, world_seq):
    rng = np.random.Generator(np.random.PCG64(world_seq))
    A = rng.standard_normal((cfg.clip_dim, cfg.topic_dim)) / np.sqrt(cfg.topic_dim)
    Z = rng.standard_normal((cfg.num_topics, cfg.topic_dim))
    return Z @ A.T


def _offset_choices(idx, length, max_offset):
    return [o for o in range(-max_offset, max_offset + 1) if o != 0 and 0 <= idx + o < length]


def stream_topics(cfg: GenConfig, rng):
    length = cfg.segments_per_stream
    runs = -(-length // cfg.num_topics)
    return np.concatenate([rng.permutation(cfg.num_topics) for _ in range(runs)])[:length]


def generate_stream(cfg: GenConfig, stream_id, rng, prototypes):
    length = cfg.segments_per_stream
    width = slice_width(cfg)
    topics = stream_topics(cfg, rng)
    timestamps = np.cumsum(1.0 + rng.uniform(0.0, 4.0, size=length))
    clips = prototypes[topics] + cfg.noise_sigma * rng.standard_normal((length, cfg.clip_dim))

    segments = []
    for j in range(length):
        # fixed number of draws per segment regardless of the branch taken
        u_irrelevant, u_aligned, u_offset = rng.random(3)
        token_draws = rng.integers(0, width, size=cfg.tokens_per_narration)

        if u_irrelevant < cfg.p_irrelevant:
            narrated_topic = cfg.num_topics
            aligned_index = None
        else:
            if u_aligned < cfg.p_aligned:
                aligned_index = j
            else:
                choices = _offset_choices(j, length, cfg.max_offset)
                aligned_index = j + choices[int(u_offset * len(choices))]
            narrated_topic = int(topics[aligned_index])

        start, _ = topic_slice(cfg, narrated_topic)
        segments.append(Segment(
            timestamp=float(timestamps[j]),
            topic_id=int(topics[j]),
            clip=clips[j],
            tokens=tuple(int(start + t) for t in token_draws),
            aligned_topic_id=narrated_topic,
            aligned_index=aligned_index,
            is_irrelevant=aligned_index is None,
        ))
    return Stream(id=stream_id, segments=segments)


def generate_corpus(cfg: GenConfig) -> Corpus:
    """Deterministic corpus for (cfg, cfg.seed)"""
    cfg.validate()
    world_seq, stream_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    prototypes = _world(cfg, world_seq)
    streams = []
    for stream_id, child in enumerate(stream_seq.spawn(cfg.num_streams)):
        rng = np.random.Generator(np.random.PCG64(child))
        streams.append(generate_stream(cfg, stream_id, rng, prototypes))
    corpus = Corpus(config=cfg, streams=streams)
    stats = corpus_summary(corpus)
    logger.info(
        f"Generated {stats['num_streams']} streams / {stats['num_segments']} segments "
        f"(misaligned {stats['misaligned_fraction']:.3f}, irrelevant {stats['irrelevant_fraction']:.3f})")
    return corpus


def ground_truth(corpus: Corpus):
    """(stream id, segment index) -> AlignmentTruth

    match_index is the segment whose topic the narration actually describes,
    or None for irrelevant narrations (excluded from retrieval scoring).
    """
    truth = {}
    for stream in corpus.streams:
        for j, entry in enumerate(stream_truth(stream)):
            truth[(stream.id, j)] = entry
    return truth


def stream_truth(stream: Stream):
    """AlignmentTruth of each segment of one stream, in segment order"""
    return [
        AlignmentTruth(
            match_index=seg.aligned_index,
            aligned_topic_id=seg.aligned_topic_id,
            topic_id=seg.topic_id,
        )
        for seg in stream.segments
    ]


def corpus_summary(corpus: Corpus):
    segments = [seg for stream in corpus.streams for seg in stream.segments]
    relevant = [seg for stream in corpus.streams
                for j, seg in enumerate(stream.segments) if not seg.is_irrelevant]
    misaligned = sum(
        1 for stream in corpus.streams
        for j, seg in enumerate(stream.segments)
        if not seg.is_irrelevant and seg.aligned_index != j
    )
    total = len(segments)
    return {
        'num_streams': len(corpus.streams),
        'num_segments': total,
        'misaligned_fraction': misaligned / len(relevant) if relevant else 0.0,
        'irrelevant_fraction': (total - len(relevant)) / total if total else 0.0,
        'held_out_streams': corpus.num_held_out(),
    }
