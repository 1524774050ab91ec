"""
Optimization loop: Adam, linear warmup, two step decays, checkpoints

Randomness: SeedSequence(seed).spawn(2) gives one child for parameter
initialization and one for batch sampling. Only the sampling generator
advances during training, so its bit-generator state is all a checkpoint
needs to resume bit-exactly.
"""
import time
from dataclasses import asdict

import numpy as np

from engine.encoders import init_params
from engine.losses import batch_loss_and_grads
from engine.numkernel import all_finite
from engine.sampling import build_batch, gather_clips, sample_batch
from extensions import logger
from models import AdamState, Checkpoint, Corpus, MetricsRecord, Schedule, TrainConfig
from utils.errors import ArtifactMismatchError, ConfigError, NonFiniteError
from utils.serialization import load_checkpoint, save_checkpoint  # noqa: F401  re-exported


def lr_at(schedule: Schedule, t):
    """base_lr * min(1, t / warmup), times decay_factor per decay step <= t"""
    if t < 0:
        raise ValueError(f"lr_at: step must be non-negative, got {t}")
    ramp = 1.0 if schedule.warmup_steps <= 0 else min(1.0, t / schedule.warmup_steps)
    passed = sum(1 for s in schedule.decay_steps if s <= t)
    return schedule.base_lr * ramp * schedule.decay_factor ** passed


def adam_step(params, grads, state: AdamState, lr):
    """Bias-corrected Adam update

    params and grads are dicts of arrays keyed by parameter name. Returns new
    parameter arrays and a new AdamState; the inputs are left untouched.
    """
    for name, g in grads.items():
        if not all_finite(g):
            raise NonFiniteError(f"non-finite gradient for {name}", step=state.t)
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(new_m, new_v, t, b1, b2, state.eps)


def _seed_of(cfg: TrainConfig):
    return 0 if cfg.seed is None else int(cfg.seed)


def initial_checkpoint(cfg: TrainConfig, corpus: Corpus, config_echo=None) -> Checkpoint:
    """Seeded initialization; train() with total_steps=0 returns exactly this"""
    cfg.validate()
    init_seq, sample_seq = np.random.SeedSequence(_seed_of(cfg)).spawn(2)
    params = init_params(
        clip_dim=corpus.config.clip_dim,
        vocab_size=corpus.config.vocab_size,
        word_dim=cfg.word_dim,
        hidden_dim=cfg.hidden_dim,
        embed_dim=cfg.embed_dim,
        max_words=cfg.max_words,
        rng=np.random.Generator(np.random.PCG64(init_seq)),
        attention=cfg.uses_attention,
    )
    sampler = np.random.Generator(np.random.PCG64(sample_seq))
    adam = AdamState.zeros_like(params.trainable(), cfg.beta1, cfg.beta2, cfg.eps)
    return Checkpoint(
        config=config_echo if config_echo is not None else {'train': _train_echo(cfg)},
        params=params,
        adam=adam,
        rng_state=sampler.bit_generator.state,
        step=0,
    )


def _train_echo(cfg: TrainConfig):
    data = asdict(cfg)
    if cfg.decay_steps is not None:
        data['decay_steps'] = list(cfg.decay_steps)
    return data


def _check_resume(cfg: TrainConfig, ckpt: Checkpoint):
    if ckpt.step > cfg.total_steps:
        raise ArtifactMismatchError(
            f"checkpoint is at step {ckpt.step}, past total_steps {cfg.total_steps}")
    if cfg.uses_attention != ckpt.params.video.has_attention:
        raise ArtifactMismatchError(
            f"checkpoint attention heads do not match loss_kind '{cfg.loss_kind}'")
    if set(ckpt.adam.m) != set(ckpt.params.trainable()):
        raise ArtifactMismatchError("checkpoint optimizer state does not match its parameters")


def train(cfg: TrainConfig, corpus: Corpus, resume: Checkpoint = None, config_echo=None,
          on_record=None, on_checkpoint=None):
    """Run cfg.total_steps steps (or the remainder after resume)

    on_record(MetricsRecord) is called every log_every steps and on the last
    step; on_checkpoint(Checkpoint) every checkpoint_every steps. Returns the
    final checkpoint and the list of emitted records.
    """
    cfg.validate()
    train_streams = corpus.train_streams()
    if train_streams:
        cfg.check_fits(min(len(s) for s in train_streams), len(train_streams))
    elif cfg.total_steps > 0:
        raise ConfigError("corpus has no training streams")
    if resume is None:
        ckpt = initial_checkpoint(cfg, corpus, config_echo)
    else:
        _check_resume(cfg, resume)
        ckpt = resume
        if config_echo is not None:
            ckpt.config = config_echo
        logger.info(f"Resuming from step {ckpt.step}")

    params = ckpt.params.copy()
    weights = params.trainable()
    adam = ckpt.adam
    sampler = np.random.Generator(np.random.PCG64())
    sampler.bit_generator.state = ckpt.rng_state

    schedule = cfg.schedule()
    records = []
    started = time.perf_counter()
    last = cfg.total_steps - 1

    for step in range(ckpt.step, cfg.total_steps):
        anchors = sample_batch(train_streams, cfg.batch_size, sampler)
        plan = build_batch(corpus, anchors, cfg.K, cfg.neg_mode, cfg.bag_side, cfg.loss_kind, cfg.max_words)
        clips = gather_clips(corpus, plan.clip_keys)
        batch, grads = batch_loss_and_grads(params, plan, clips, cfg.loss_kind, cfg.margin)
        if not np.isfinite(batch.loss):
            raise NonFiniteError(f"non-finite loss {batch.loss}", step=step)

        bad = [name for name, g in grads.items() if not all_finite(g)]
        if bad:
            raise NonFiniteError(f"non-finite gradient for {', '.join(bad)}", step=step)
        lr = lr_at(schedule, step + 1)
        weights, adam = adam_step(weights, grads, adam, lr)
        for name, value in weights.items():
            params.set_array(name, value)

        if (cfg.log_every > 0 and step % cfg.log_every == 0) or step == last:
            wall = time.perf_counter() - started if cfg.log_wall_time else None
            record = MetricsRecord(step=step, lr=lr, loss=batch.loss, value=batch.value, wall_time=wall)
            records.append(record)
            logger.info(f"step {step} lr {lr:.3e} loss {batch.loss:.5f}")
            if on_record is not None:
                on_record(record)

        if cfg.checkpoint_every > 0 and (step + 1) % cfg.checkpoint_every == 0 and step != last:
            if on_checkpoint is not None:
                on_checkpoint(Checkpoint(
                    config=ckpt.config, params=params.copy(), adam=adam,
                    rng_state=sampler.bit_generator.state, step=step + 1,
                ))

    final = Checkpoint(
        config=ckpt.config, params=params, adam=adam,
        rng_state=sampler.bit_generator.state, step=max(ckpt.step, cfg.total_steps),
    )
    return final, records
