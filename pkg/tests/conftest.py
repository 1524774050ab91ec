import json
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from engine.corpus import generate_corpus  # noqa: E402
from models import GenConfig, Segment, Stream, TrainConfig  # noqa: E402

TINY_GEN = dict(
    num_streams=40, segments_per_stream=8, num_topics=5, topic_dim=4, clip_dim=8,
    vocab_size=60, tokens_per_narration=4, held_out_fraction=0.25, seed=3,
)

TINY_TRAIN = dict(
    loss_kind='mil-nce', K=3, batch_size=8, total_steps=12, word_dim=6, hidden_dim=12,
    embed_dim=6, max_words=6, warmup_steps=2, log_every=4, seed=1,
)


@pytest.fixture
def tiny_gen_config():
    return GenConfig(**TINY_GEN)


@pytest.fixture(scope='session')
def tiny_corpus():
    return generate_corpus(GenConfig(**TINY_GEN))


@pytest.fixture
def tiny_train_config():
    return TrainConfig(**TINY_TRAIN)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_run_config_file(tmp_path):
    """Run config JSON matching the tiny fixtures"""
    path = tmp_path / 'run.json'
    path.write_text(json.dumps({
        'seed': 3,
        'gen': {k: v for k, v in TINY_GEN.items() if k != 'seed'},
        'train': {k: v for k, v in TINY_TRAIN.items() if k != 'seed'},
        'eval': {'pool_streams': 5, 'probe_max_iter': 500},
        'output': {'dir': str(tmp_path / 'runs')},
    }))
    return path


def make_stream(timestamps, tokens=None, stream_id=0):
    """Hand-built stream; every segment is its own aligned match"""
    segments = []
    for j, t in enumerate(timestamps):
        segments.append(Segment(
            timestamp=float(t),
            topic_id=0,
            clip=np.zeros(2),
            tokens=tuple(tokens[j]) if tokens is not None else (j,),
            aligned_topic_id=0,
            aligned_index=j,
        ))
    return Stream(id=stream_id, segments=segments)
