"""
File formats: corpus JSON, checkpoint binary, JSONL metrics
All writes go through a temp file followed by os.replace
"""
import json
import os
import struct
import tempfile
from dataclasses import asdict

import numpy as np

from extensions import logger
from models import AdamState, Checkpoint, Corpus, EncoderParams, GenConfig, Segment, Stream
from utils.constants import CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MAGIC, CORPUS_FORMAT_VERSION
from utils.errors import ArtifactMismatchError, ConfigError

CORPUS_FORMAT = 'milnce-corpus'


def canonical_json(data, indent=None):
    """Deterministic JSON text (sorted keys) for files that must be byte-stable"""
    if indent is None:
        return json.dumps(data, sort_keys=True, separators=(',', ':'))
    return json.dumps(data, sort_keys=True, indent=indent)


def atomic_write_bytes(path, payload: bytes):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix='.tmp-', dir=directory)
    try:
        with os.fdopen(fd, 'wb') as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except Exception:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode('utf-8'))


def write_json(path, data, indent=2):
    atomic_write_text(path, canonical_json(data, indent=indent) + '\n')


def read_json(path):
    try:
        with open(path, 'r', encoding='utf-8') as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Malformed JSON in {path}: {e.msg}", lineno=e.lineno) from e


def append_jsonl(path, record):
    with open(path, 'a', encoding='utf-8') as fh:
        fh.write(canonical_json(record) + '\n')


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------

def corpus_to_dict(corpus: Corpus):
    return {
        'format': CORPUS_FORMAT,
        'version': CORPUS_FORMAT_VERSION,
        'config': asdict(corpus.config),
        'streams': [
            {
                'id': stream.id,
                'segments': [
                    {
                        't': seg.timestamp,
                        'topic': seg.topic_id,
                        'clip': [float(v) for v in seg.clip],
                        'tokens': list(seg.tokens),
                        'aligned_topic': seg.aligned_topic_id,
                        'aligned_index': seg.aligned_index,
                        'irrelevant': seg.is_irrelevant,
                    }
                    for seg in stream.segments
                ],
            }
            for stream in corpus.streams
        ],
    }


def corpus_from_dict(data):
    if not isinstance(data, dict):
        raise ArtifactMismatchError("not a corpus file (expected a JSON object)")
    if data.get('format') != CORPUS_FORMAT:
        raise ArtifactMismatchError(f"not a corpus file (format={data.get('format')!r})")
    if data.get('version') != CORPUS_FORMAT_VERSION:
        raise ArtifactMismatchError(
            f"corpus format version {data.get('version')} != {CORPUS_FORMAT_VERSION}")
    try:
        return _corpus_body(data)
    except (KeyError, TypeError, ValueError) as e:
        raise ArtifactMismatchError(f"corpus file is incomplete or malformed: {e!r}") from e


def _corpus_body(data):
    cfg = GenConfig(**data['config'])
    streams = []
    for raw in data['streams']:
        segments = [
            Segment(
                timestamp=float(s['t']),
                topic_id=int(s['topic']),
                clip=np.asarray(s['clip'], dtype=np.float64),
                tokens=tuple(int(t) for t in s['tokens']),
                aligned_topic_id=int(s['aligned_topic']),
                aligned_index=s['aligned_index'],
                is_irrelevant=bool(s['irrelevant']),
            )
            for s in raw['segments']
        ]
        streams.append(Stream(id=int(raw['id']), segments=segments))
    return Corpus(config=cfg, streams=streams)


def save_corpus(path, corpus: Corpus, config_echo=None):
    data = corpus_to_dict(corpus)
    if config_echo is not None:
        data['run_config'] = config_echo
    atomic_write_text(path, canonical_json(data) + '\n')
    logger.info(f"Corpus written to {path}")


def load_corpus(path) -> Corpus:
    try:
        with open(path, 'r', encoding='utf-8') as fh:
            data = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ArtifactMismatchError(f"{path} is not a corpus file: {e}") from e
    return corpus_from_dict(data)


# ---------------------------------------------------------------------------
# Checkpoint
#
#   magic (8 bytes) | uint32 version | uint32 header length | header JSON
#   uint32 array count
#   per array: uint16 name length | name | uint8 ndim | ndim x uint64 shape |
#              row-major float64 payload
#   All integers and floats little-endian.
# ---------------------------------------------------------------------------

def _pack_array(name, arr):
    encoded = name.encode('utf-8')
    arr = np.ascontiguousarray(arr, dtype='<f8')
    out = [struct.pack('<H', len(encoded)), encoded, struct.pack('<B', arr.ndim)]
    out.extend(struct.pack('<Q', dim) for dim in arr.shape)
    out.append(arr.tobytes(order='C'))
    return b''.join(out)


def checkpoint_to_bytes(ckpt: Checkpoint):
    arrays = dict(ckpt.params.named_arrays())
    for name, value in ckpt.adam.m.items():
        arrays[f'adam.m.{name}'] = value
    for name, value in ckpt.adam.v.items():
        arrays[f'adam.v.{name}'] = value
    header = {
        'config': ckpt.config,
        'step': ckpt.step,
        'adam': {'t': ckpt.adam.t, 'beta1': ckpt.adam.beta1, 'beta2': ckpt.adam.beta2, 'eps': ckpt.adam.eps},
        'rng_state': ckpt.rng_state,
        'max_words': ckpt.params.text.max_words,
        'arrays': list(arrays),
    }
    header_bytes = canonical_json(header).encode('utf-8')
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack('<I', ckpt.version),
        struct.pack('<I', len(header_bytes)),
        header_bytes,
        struct.pack('<I', len(arrays)),
    ]
    parts.extend(_pack_array(name, value) for name, value in arrays.items())
    return b''.join(parts)


def checkpoint_from_bytes(payload: bytes) -> Checkpoint:
    try:
        return _parse_checkpoint(payload)
    except ArtifactMismatchError:
        raise
    except (struct.error, ValueError, KeyError, TypeError) as e:
        raise ArtifactMismatchError(f"unreadable checkpoint: {e}") from e


def _parse_checkpoint(payload: bytes) -> Checkpoint:
    view = memoryview(payload)
    if bytes(view[:8]) != CHECKPOINT_MAGIC:
        raise ArtifactMismatchError("not a checkpoint file (bad magic)")
    version, header_len = struct.unpack_from('<II', view, 8)
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ArtifactMismatchError(
            f"checkpoint format version {version} != {CHECKPOINT_FORMAT_VERSION}")
    pos = 16
    header = json.loads(bytes(view[pos:pos + header_len]).decode('utf-8'))
    pos += header_len
    (count,) = struct.unpack_from('<I', view, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from('<H', view, pos)
        pos += 2
        name = bytes(view[pos:pos + name_len]).decode('utf-8')
        pos += name_len
        (ndim,) = struct.unpack_from('<B', view, pos)
        pos += 1
        shape = struct.unpack_from('<' + 'Q' * ndim, view, pos)
        pos += 8 * ndim
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arrays[name] = np.frombuffer(view, dtype='<f8', count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(payload):
        raise ArtifactMismatchError("checkpoint has trailing or missing bytes")

    params = EncoderParams.from_arrays(
        {k: v for k, v in arrays.items() if not k.startswith('adam.')}, max_words=int(header['max_words']))
    adam_meta = header['adam']
    adam = AdamState(
        m={k[len('adam.m.'):]: v for k, v in arrays.items() if k.startswith('adam.m.')},
        v={k[len('adam.v.'):]: v for k, v in arrays.items() if k.startswith('adam.v.')},
        t=int(adam_meta['t']), beta1=adam_meta['beta1'], beta2=adam_meta['beta2'], eps=adam_meta['eps'],
    )
    return Checkpoint(
        config=header['config'], params=params, adam=adam,
        rng_state=header['rng_state'], step=int(header['step']), version=version,
    )


def save_checkpoint(path, ckpt: Checkpoint):
    atomic_write_bytes(path, checkpoint_to_bytes(ckpt))
    logger.info(f"Checkpoint (step {ckpt.step}) written to {path}")


def load_checkpoint(path) -> Checkpoint:
    with open(path, 'rb') as fh:
        payload = fh.read()
    if len(payload) < 16:
        raise ArtifactMismatchError(f"{path} is too short to be a checkpoint")
    return checkpoint_from_bytes(payload)
