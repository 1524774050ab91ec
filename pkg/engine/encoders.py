"""
Video encoder f and text encoder g, plus the attention heads f_a and g_a

f(x) = W2^T relu(W1^T x + b1) + b2
g(y) = W2^T colmax_w relu(W1^T E[w] + b1) + b2

The attention heads reuse each trunk and swap only the last projection.
The word table E is frozen and never receives a gradient.
"""
import numpy as np

from engine.numkernel import (
    DTYPE, GradPair, as_matrix, matmul, relu, batched_col_max_pool,
)
from models import EncoderParams, VideoEncoderParams, TextEncoderParams
from utils.errors import ShapeError


def glorot_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(DTYPE)


def init_params(clip_dim, vocab_size, word_dim=16, hidden_dim=64, embed_dim=16,
                max_words=16, rng=None, seed=0, attention=False):
    """Seeded initialization: Glorot-uniform weights, zero biases, unit-variance E"""
    if rng is None:
        rng = np.random.default_rng(seed)
    E = rng.standard_normal((vocab_size, word_dim)).astype(DTYPE)
    video = VideoEncoderParams(
        W1=glorot_uniform(rng, clip_dim, hidden_dim),
        b1=np.zeros(hidden_dim, dtype=DTYPE),
        W2=glorot_uniform(rng, hidden_dim, embed_dim),
        b2=np.zeros(embed_dim, dtype=DTYPE),
    )
    text = TextEncoderParams(
        E=E,
        W1=glorot_uniform(rng, word_dim, hidden_dim),
        b1=np.zeros(hidden_dim, dtype=DTYPE),
        W2=glorot_uniform(rng, hidden_dim, embed_dim),
        b2=np.zeros(embed_dim, dtype=DTYPE),
        max_words=max_words,
    )
    if attention:
        video.Wa = glorot_uniform(rng, hidden_dim, embed_dim)
        video.ba = np.zeros(embed_dim, dtype=DTYPE)
        text.Wa = glorot_uniform(rng, hidden_dim, embed_dim)
        text.ba = np.zeros(embed_dim, dtype=DTYPE)
    return EncoderParams(video=video, text=text)


def truncate(tokens, max_words):
    """Keep the first max_words tokens"""
    return tuple(int(t) for t in tokens)[:max_words]


# ---------------------------------------------------------------------------
# Trunks
# ---------------------------------------------------------------------------

def video_trunk(p: VideoEncoderParams, X):
    """relu(X W1 + b1) for a (B, D_in) stack of clip features"""
    X = as_matrix(X)
    if X.shape[1] != p.W1.shape[0]:
        raise ShapeError('embed_video', X.shape, p.W1.shape)
    pre = matmul(X, p.W1)
    act = relu(pre.value + p.b1)

    def grad_fn(dH):
        dA = act.backward(dH)
        dX, dW1 = pre.backward(dA)
        return {'W1': dW1, 'b1': dA.sum(axis=0), 'x': dX}

    return GradPair(act.value, grad_fn)


def _pad_tokens(p: TextEncoderParams, narrations):
    lists = [truncate(tokens, p.max_words) for tokens in narrations]
    if any(len(t) == 0 for t in lists):
        raise ValueError("embed_text: empty narration (filter it or pad with real tokens)")
    vocab = p.E.shape[0]
    for t in lists:
        if min(t) < 0 or max(t) >= vocab:
            raise ValueError(f"embed_text: token id out of range [0, {vocab})")
    width = max(len(t) for t in lists)
    ids = np.zeros((len(lists), width), dtype=np.int64)
    mask = np.zeros((len(lists), width), dtype=bool)
    for n, t in enumerate(lists):
        ids[n, :len(t)] = t
        mask[n, :len(t)] = True
    return ids, mask


def text_trunk(p: TextEncoderParams, narrations):
    """Max-pooled word activations, one row per narration; pads are excluded"""
    if len(narrations) == 0:
        raise ValueError("embed_text: no narrations given")
    ids, mask = _pad_tokens(p, narrations)
    n, width = ids.shape
    words = p.E[ids.reshape(-1)]
    pre = matmul(words, p.W1)
    act = relu(pre.value + p.b1)
    pool = batched_col_max_pool(act.value.reshape(n, width, -1), mask)

    def grad_fn(dP):
        dAct = pool.backward(dP).reshape(n * width, -1)
        dA = act.backward(dAct)
        # the word-table gradient is discarded
        _, dW1 = pre.backward(dA)
        return {'W1': dW1, 'b1': dA.sum(axis=0)}

    return GradPair(pool.value, grad_fn)


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------

def _project(trunk, W, b):
    out = matmul(trunk, W)
    return GradPair(out.value + b, out.grad_fn)


def _encode(p, trunk_pair, prefix, with_attention):
    if with_attention and not p.has_attention:
        raise ValueError(f"{prefix} attention head requested but not initialized")
    H = trunk_pair.value
    main = _project(H, p.W2, p.b2)
    head = _project(H, p.Wa, p.ba) if with_attention else None
    value = (main.value, head.value if head is not None else None)

    def grad_fn(grads):
        dZ, dZa = grads
        dZ = as_matrix(dZ)
        dH, dW2 = main.backward(dZ)
        out = {'W2': dW2, 'b2': dZ.sum(axis=0)}
        if head is not None:
            if dZa is None:
                dZa = np.zeros_like(head.value)
            dZa = as_matrix(dZa)
            dHa, dWa = head.backward(dZa)
            dH = dH + dHa
            out['Wa'] = dWa
            out['ba'] = dZa.sum(axis=0)
        out.update(trunk_pair.backward(dH))
        named = {f'{prefix}.{k}': v for k, v in out.items() if k != 'x'}
        if 'x' in out:
            named['clips'] = out['x']
        return named

    return GradPair(value, grad_fn)


def encode_clips(p: VideoEncoderParams, X, with_attention=False):
    """Embed a (B, D_in) stack; value is (Z, Za) and backward takes (dZ, dZa)"""
    return _encode(p, video_trunk(p, X), 'video', with_attention)


def encode_narrations(p: TextEncoderParams, narrations, with_attention=False):
    """Embed token lists; value is (Z, Za) and backward takes (dZ, dZa)"""
    return _encode(p, text_trunk(p, narrations), 'text', with_attention)


def embed_video(p: VideoEncoderParams, x):
    x = np.asarray(x, dtype=DTYPE).ravel()
    if x.shape[0] != p.W1.shape[0]:
        raise ShapeError('embed_video', x.shape, p.W1.shape)
    return encode_clips(p, x.reshape(1, -1)).value[0][0]


def embed_text(p: TextEncoderParams, tokens):
    return encode_narrations(p, [tokens]).value[0][0]


def embed_attention(p, item, modality=None):
    """Attention-head embedding f_a(x) or g_a(y) sharing the trunk of f or g"""
    if not p.has_attention:
        raise ValueError("attention head absent")
    if isinstance(p, VideoEncoderParams) or modality == 'video':
        x = np.asarray(item, dtype=DTYPE).reshape(1, -1)
        return encode_clips(p, x, with_attention=True).value[1][0]
    return encode_narrations(p, [item], with_attention=True).value[1][0]


def clip_features(params: EncoderParams, X, kind='embedding'):
    """Frozen clip features for probing: f(x) or the trunk activations"""
    if kind == 'trunk':
        return video_trunk(params.video, X).value
    return encode_clips(params.video, X).value[0]
