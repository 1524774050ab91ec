"""
Domain types for the MIL-NCE toolkit
Plain dataclasses; numeric payloads are float64 numpy arrays
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict, fields
from typing import Dict, List, Optional, Tuple

import numpy as np

from utils.constants import (
    LOSS_KINDS, NEG_MODES, BAG_SIDES, PROBE_FEATURES, CHECKPOINT_FORMAT_VERSION,
)
from utils.errors import ConfigError


def _check_probability(name, value):
    if not 0.0 <= value <= 1.0:
        raise ConfigError(f"{name} must lie in [0, 1], got {value}")


def _json_number(value):
    return None if value != value else value


def held_out_count(num_streams, fraction):
    """Size of the held-out tail: at least one stream when fraction > 0, never all of them"""
    held = int(round(num_streams * fraction))
    if fraction > 0 and num_streams > 1:
        held = max(held, 1)
    return min(held, num_streams - 1) if num_streams > 1 else 0


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------

@dataclass
class GenConfig:
    num_streams: int = 2000
    segments_per_stream: int = 12
    num_topics: int = 20
    topic_dim: int = 8
    clip_dim: int = 32
    vocab_size: int = 200
    tokens_per_narration: int = 8
    noise_sigma: float = 1.0
    p_aligned: float = 0.5
    max_offset: int = 2
    p_irrelevant: float = 0.1
    held_out_fraction: float = 0.1
    seed: int = 0

    def validate(self):
        for name in ('num_streams', 'segments_per_stream', 'num_topics', 'topic_dim',
                     'clip_dim', 'vocab_size', 'tokens_per_narration'):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")
        _check_probability('p_aligned', self.p_aligned)
        _check_probability('p_irrelevant', self.p_irrelevant)
        _check_probability('held_out_fraction', self.held_out_fraction)
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be non-negative, got {self.noise_sigma}")
        if self.p_aligned < 1.0:
            if self.max_offset < 1:
                raise ConfigError("max_offset must be at least 1 when p_aligned < 1")
            if self.segments_per_stream < 2:
                raise ConfigError("misaligned narrations need at least 2 segments per stream")
        if self.vocab_size // (self.num_topics + 1) < 1:
            raise ConfigError(
                f"vocab_size {self.vocab_size} too small for {self.num_topics} topics plus noise")
        return self

    def num_held_out(self):
        return held_out_count(self.num_streams, self.held_out_fraction)


@dataclass
class Segment:
    timestamp: float
    topic_id: int
    clip: np.ndarray
    tokens: Tuple[int, ...]
    aligned_topic_id: int
    aligned_index: Optional[int]
    is_irrelevant: bool = False


@dataclass
class Stream:
    id: int
    segments: List[Segment]

    def __len__(self):
        return len(self.segments)


@dataclass
class Corpus:
    config: GenConfig
    streams: List[Stream]

    @property
    def noise_topic(self):
        return self.config.num_topics

    def num_held_out(self):
        return held_out_count(len(self.streams), self.config.held_out_fraction)

    def train_streams(self):
        """Streams available to the trainer (all but the held-out tail)"""
        return self.streams[:len(self.streams) - self.num_held_out()]

    def held_out_streams(self):
        """Last fraction of streams by id, never sampled during training"""
        held = self.num_held_out()
        return self.streams[len(self.streams) - held:] if held else []


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CandidateBag:
    anchor: Tuple[int, int]
    candidates: Tuple[Tuple[int, int], ...]
    side: str = 'text'

    def __len__(self):
        return len(self.candidates)


@dataclass(frozen=True)
class NegativeSpec:
    mode: str
    batch: Tuple[int, ...]

    def __post_init__(self):
        if self.mode not in NEG_MODES:
            raise ValueError(f"Unknown negative mode: {self.mode}")


@dataclass
class BatchPlan:
    """Rows of one score matrix and the (clip row, narration row) pairs each sample uses"""
    anchors: List[Tuple[int, int]]
    clip_keys: List[Tuple[int, int]]
    narrations: List[Tuple[int, ...]]
    positives: List[np.ndarray]
    negatives: List[np.ndarray]

    @property
    def batch_size(self):
        return len(self.anchors)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

@dataclass
class SampleScores:
    positives: np.ndarray
    negatives: np.ndarray
    attn_scores: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positives = np.atleast_1d(np.asarray(self.positives, dtype=np.float64))
        self.negatives = np.atleast_1d(np.asarray(self.negatives, dtype=np.float64))
        if self.attn_scores is not None:
            self.attn_scores = np.atleast_1d(np.asarray(self.attn_scores, dtype=np.float64))
            if self.attn_scores.shape != self.positives.shape:
                raise ValueError("attn_scores must have the same length as positives")
        if self.positives.size == 0:
            raise ValueError("positives must be non-empty")


@dataclass
class LossResult:
    value: float
    d_positives: np.ndarray
    d_negatives: np.ndarray
    d_attn: Optional[np.ndarray] = None
    maximize: bool = True

    @property
    def loss(self):
        """Value as a quantity to minimize"""
        return -self.value if self.maximize else self.value


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------

@dataclass
class VideoEncoderParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    Wa: Optional[np.ndarray] = None
    ba: Optional[np.ndarray] = None

    @property
    def has_attention(self):
        return self.Wa is not None and self.ba is not None


@dataclass
class TextEncoderParams:
    E: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    Wa: Optional[np.ndarray] = None
    ba: Optional[np.ndarray] = None
    max_words: int = 16

    @property
    def has_attention(self):
        return self.Wa is not None and self.ba is not None


# Names of the arrays each encoder owns, in checkpoint order
VIDEO_ARRAYS = ('W1', 'b1', 'W2', 'b2', 'Wa', 'ba')
TEXT_ARRAYS = ('E', 'W1', 'b1', 'W2', 'b2', 'Wa', 'ba')
FROZEN_ARRAYS = ('text.E',)


@dataclass
class EncoderParams:
    video: VideoEncoderParams
    text: TextEncoderParams

    def named_arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for name in VIDEO_ARRAYS:
            value = getattr(self.video, name)
            if value is not None:
                out[f'video.{name}'] = value
        for name in TEXT_ARRAYS:
            value = getattr(self.text, name)
            if value is not None:
                out[f'text.{name}'] = value
        return out

    def trainable(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.named_arrays().items() if k not in FROZEN_ARRAYS}

    def set_array(self, name, value):
        side, attr = name.split('.', 1)
        setattr(getattr(self, side), attr, value)

    def copy(self):
        params = EncoderParams(
            video=VideoEncoderParams(**{f.name: getattr(self.video, f.name) for f in fields(VideoEncoderParams)}),
            text=TextEncoderParams(**{f.name: getattr(self.text, f.name) for f in fields(TextEncoderParams)}),
        )
        for name, value in self.named_arrays().items():
            params.set_array(name, value.copy())
        return params

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], max_words: int):
        video = {k.split('.', 1)[1]: v for k, v in arrays.items() if k.startswith('video.')}
        text = {k.split('.', 1)[1]: v for k, v in arrays.items() if k.startswith('text.')}
        return cls(video=VideoEncoderParams(**video), text=TextEncoderParams(max_words=max_words, **text))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class Schedule:
    base_lr: float
    warmup_steps: int
    decay_steps: Tuple[int, int]
    decay_factor: float = 0.1

    def validate(self, total_steps=None):
        first, second = self.decay_steps
        if not (self.warmup_steps < first < second):
            raise ConfigError(
                f"schedule needs warmup_steps < decay_steps[0] < decay_steps[1], "
                f"got {self.warmup_steps}, {self.decay_steps}")
        if total_steps is not None and total_steps > 0 and second > total_steps:
            raise ConfigError(f"decay step {second} beyond total_steps {total_steps}")
        return self


@dataclass
class TrainConfig:
    loss_kind: str = 'mil-nce'
    K: int = 5
    neg_mode: str = 'joint'
    bag_side: str = 'text'
    batch_size: int = 32
    total_steps: int = 2000
    seed: Optional[int] = None
    word_dim: int = 16
    hidden_dim: int = 64
    embed_dim: int = 16
    max_words: int = 16
    base_lr: float = 1e-3
    warmup_steps: int = 100
    decay_steps: Optional[Tuple[int, int]] = None
    decay_factor: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    margin: float = 0.2
    checkpoint_every: int = 0
    log_every: int = 50
    log_wall_time: bool = False

    def resolved_decay_steps(self):
        if self.decay_steps is not None:
            return tuple(int(s) for s in self.decay_steps)
        return (int(0.6 * self.total_steps), int(0.8 * self.total_steps))

    def schedule(self):
        return Schedule(self.base_lr, self.warmup_steps, self.resolved_decay_steps(), self.decay_factor)

    @property
    def uses_attention(self):
        return self.loss_kind == 'attn-nce'

    def validate(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"Unknown loss_kind '{self.loss_kind}', expected one of {', '.join(LOSS_KINDS)}")
        if self.neg_mode not in NEG_MODES:
            raise ConfigError(f"Unknown neg_mode '{self.neg_mode}'")
        if self.bag_side not in BAG_SIDES:
            raise ConfigError(f"Unknown bag_side '{self.bag_side}'")
        if self.loss_kind == 'cat-nce' and self.bag_side != 'text':
            raise ConfigError("cat-nce concatenates narrations and needs bag_side 'text'")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.K < 1 or self.K % 2 == 0:
            raise ConfigError(f"K must be odd and at least 1, got {self.K}")
        if self.max_words < 1:
            raise ConfigError("max_words must be at least 1")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be non-negative")
        if self.total_steps > 0:
            self.schedule().validate(self.total_steps)
        return self

    def check_fits(self, stream_length, train_streams):
        """Bag size and batch size against the corpus this config trains on"""
        if self.K > stream_length:
            raise ConfigError(f"bag size K={self.K} exceeds stream length {stream_length}")
        if self.batch_size > train_streams:
            raise ConfigError(
                f"batch_size {self.batch_size} needs as many training streams, corpus has {train_streams}")
        return self


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            m={k: np.zeros_like(v) for k, v in arrays.items()},
            v={k: np.zeros_like(v) for k, v in arrays.items()},
            t=0, beta1=beta1, beta2=beta2, eps=eps,
        )


@dataclass
class Checkpoint:
    config: dict
    params: EncoderParams
    adam: AdamState
    rng_state: dict
    step: int = 0
    version: int = CHECKPOINT_FORMAT_VERSION


@dataclass
class MetricsRecord:
    step: int
    lr: float
    loss: float
    value: float
    wall_time: Optional[float] = None

    def to_dict(self):
        out = {'step': self.step, 'lr': self.lr, 'loss': self.loss, 'value': self.value}
        if self.wall_time is not None:
            out['wall_time'] = self.wall_time
        return out


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalConfig:
    ks: Tuple[int, ...] = (1, 5, 10)
    pool_streams: int = 10
    probe_features: str = 'trunk'
    probe_l2: float = 1e-4
    probe_tol: float = 1e-6
    probe_max_iter: int = 5000
    probe_lr: float = 0.5
    probe_train_fraction: float = 0.5
    selection_k: int = 5

    def validate(self):
        if not self.ks or any(k < 1 for k in self.ks):
            raise ConfigError("ks must be a non-empty list of positive integers")
        if self.pool_streams < 1:
            raise ConfigError("pool_streams must be at least 1")
        if self.probe_features not in PROBE_FEATURES:
            raise ConfigError(f"Unknown probe_features '{self.probe_features}'")
        if not 0.0 < self.probe_train_fraction < 1.0:
            raise ConfigError("probe_train_fraction must lie strictly between 0 and 1")
        if self.selection_k < 1 or self.selection_k % 2 == 0:
            raise ConfigError(f"selection_k must be odd and at least 1, got {self.selection_k}")
        return self


@dataclass
class RetrievalResult:
    recall_at_k: Dict[int, float]
    median_rank: float
    ranks: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @classmethod
    def undefined(cls, ks):
        """No queries: every metric is NaN"""
        return cls(recall_at_k={int(k): float('nan') for k in ks}, median_rank=float('nan'))

    def to_dict(self):
        out = {f'R@{k}': _json_number(v) for k, v in sorted(self.recall_at_k.items())}
        out['MedR'] = _json_number(self.median_rank)
        return out


@dataclass
class ProbeResult:
    accuracy: float
    per_class: Dict[int, float]
    support: Dict[int, int] = field(default_factory=dict)

    def to_dict(self):
        return {
            'accuracy': self.accuracy,
            'per_class': {str(k): v for k, v in sorted(self.per_class.items())},
        }


@dataclass
class OutputConfig:
    dir: str = 'runs'
    xlsx: bool = False
    pdf: bool = False


@dataclass
class RunConfig:
    preset: str = 'desk'
    seed: int = 0
    gen: GenConfig = field(default_factory=GenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self):
        data = asdict(self)
        data['eval']['ks'] = list(self.eval.ks)
        if self.train.decay_steps is not None:
            data['train']['decay_steps'] = list(self.train.decay_steps)
        return data
