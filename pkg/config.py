"""
Run configuration presets and the strict JSON run-config loader
"""
import json
from dataclasses import fields

from models import EvalConfig, GenConfig, OutputConfig, RunConfig, TrainConfig
from utils.errors import ConfigError


class Config:
    # Desk-scale defaults; every field of every section has a value here or in models
    GEN = {}
    TRAIN = {}
    EVAL = {}
    OUTPUT = {}


class FullScaleConfig(Config):
    # Encoder shapes of the large model; clips stand in for 1024-d pooled video features
    GEN = {
        'clip_dim': 1024,
    }
    TRAIN = {
        'word_dim': 300,
        'hidden_dim': 2048,
        'embed_dim': 512,
        'batch_size': 128,
        'warmup_steps': 5000,
        'total_steps': 50000,
    }


PRESETS = {
    'desk': Config,
    'full': FullScaleConfig,
}

SECTIONS = {
    'gen': GenConfig,
    'train': TrainConfig,
    'eval': EvalConfig,
    'output': OutputConfig,
}
TOP_LEVEL_KEYS = ('preset', 'seed', *SECTIONS)


def _is_int(value):
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value):
    return _is_int(value) or isinstance(value, float)


def _is_int_list(value):
    return isinstance(value, (list, tuple)) and all(_is_int(v) for v in value)


# Optional fields have no default to infer a type from
OPTIONAL_FIELD_CHECKS = {
    'seed': (_is_int, 'an integer'),
    'decay_steps': (_is_int_list, 'a list of integers'),
}


def _expected_type(default):
    if isinstance(default, bool):
        return lambda v: isinstance(v, bool), 'true or false'
    if isinstance(default, int):
        return _is_int, 'an integer'
    if isinstance(default, float):
        return _is_number, 'a number'
    if isinstance(default, str):
        return lambda v: isinstance(v, str), 'a string'
    if isinstance(default, tuple):
        return _is_int_list, 'a list of integers'
    return None


def _check_types(name, cls, values):
    defaults = cls()
    for key, value in values.items():
        if value is None and key in OPTIONAL_FIELD_CHECKS:
            continue
        check = OPTIONAL_FIELD_CHECKS.get(key) or _expected_type(getattr(defaults, key))
        if check is not None and not check[0](value):
            raise ConfigError(f"'{name}.{key}' must be {check[1]}, got {value!r}")


def _section(name, cls, preset_values, overrides):
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(overrides) - allowed)
    if unknown:
        raise ConfigError(f"Unknown key(s) in '{name}': {', '.join(unknown)}")
    values = {**preset_values, **overrides}
    _check_types(name, cls, values)
    if name == 'eval' and 'ks' in values:
        values['ks'] = tuple(values['ks'])
    if name == 'train' and values.get('decay_steps') is not None:
        steps = values['decay_steps']
        if len(steps) != 2:
            raise ConfigError("decay_steps must list exactly two step indices")
        values['decay_steps'] = tuple(steps)
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"Invalid '{name}' section: {e}") from e


def build_run_config(data=None, seed=None) -> RunConfig:
    """RunConfig from a parsed JSON document; seed overrides the top-level seed

    Section seeds (gen.seed, train.seed) default to the top-level seed.
    """
    data = dict(data or {})
    unknown = sorted(set(data) - set(TOP_LEVEL_KEYS))
    if unknown:
        raise ConfigError(f"Unknown top-level key(s): {', '.join(unknown)}")
    preset_name = data.get('preset', 'desk')
    preset = PRESETS.get(preset_name) if isinstance(preset_name, str) else None
    if preset is None:
        raise ConfigError(f"Unknown preset '{preset_name}', expected one of {', '.join(PRESETS)}")
    for name in SECTIONS:
        if not isinstance(data.get(name, {}), dict):
            raise ConfigError(f"Section '{name}' must be a JSON object")

    top_seed = seed if seed is not None else data.get('seed', 0)
    if not _is_int(top_seed):
        raise ConfigError(f"'seed' must be an integer, got {top_seed!r}")
    gen_values = dict(data.get('gen', {}))
    train_values = dict(data.get('train', {}))
    if seed is not None or 'seed' not in gen_values:
        gen_values['seed'] = top_seed
    if seed is not None or train_values.get('seed') is None:
        train_values['seed'] = top_seed

    run = RunConfig(
        preset=preset_name,
        seed=top_seed,
        gen=_section('gen', GenConfig, preset.GEN, gen_values),
        train=_section('train', TrainConfig, preset.TRAIN, train_values),
        eval=_section('eval', EvalConfig, preset.EVAL, data.get('eval', {})),
        output=_section('output', OutputConfig, preset.OUTPUT, data.get('output', {})),
    )
    run.gen.validate()
    run.train.validate()
    run.eval.validate()
    run.train.check_fits(run.gen.segments_per_stream, run.gen.num_streams - run.gen.num_held_out())
    return run


def load_run_config(path=None, seed=None) -> RunConfig:
    """Parse one strict JSON run config; no path means all defaults"""
    if path is None:
        return build_run_config({}, seed)
    try:
        with open(path, 'r', encoding='utf-8') as fh:
            data = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Malformed JSON in {path}: {e.msg}", lineno=e.lineno) from e
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: run config must be a JSON object")
    return build_run_config(data, seed)
