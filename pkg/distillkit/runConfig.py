"""
Run configuration: the merged view of every module config.

Values come from the dataclass defaults, then an optional JSON file, then command-line overrides.
JSON sections: features, vad, augment, student, train, contrastive, aam, synth; plus top-level
seed, workers and out_dir. A single seed feeds the student initialization, the training streams and
the synthetic generator.
"""
import json
import os
from dataclasses import dataclass, field, fields, replace

from distillkit.augmentModule import AugmentConfig
from distillkit.featuresModule import FbankConfig, FeaturePipelineConfig, VadConfig
from distillkit.lossesModule import AamConfig, ContrastiveConfig
from distillkit.studentNet import StudentConfig, student_preset
from distillkit.synthModule import SynthSpec
from distillkit.trainerModule import TrainConfig
from utils.exceptions import ConfigError
from utils.logger_config import logger

DEFAULT_RUN_VARIABLES = './configFiles/default_run.json'
SECTIONS = ('features', 'vad', 'augment', 'student', 'train', 'contrastive', 'aam', 'synth')
TOP_LEVEL_KEYS = ('seed', 'workers', 'out_dir')


def load_run_variables(path=None):
    """
    Load run variables from a JSON file.

    Args:
        path (str, optional): explicit config file. Without it the default file is tried and a
            missing or malformed default yields {}.

    Returns:
        dict: the raw variables.

    Raises:
        ConfigError: if an explicitly given file is missing or not valid JSON.
    """
    explicit = path is not None
    path = path if explicit else DEFAULT_RUN_VARIABLES
    try:
        with open(path, 'r', encoding='utf-8') as f:
            variables = json.load(f)
    except (FileNotFoundError, json.JSONDecodeError) as e:
        if explicit:
            raise ConfigError(f"Cannot load config file {path}: {e}")
        return {}
    if not isinstance(variables, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    logger.debug(f"Loaded run variables from {path}")
    return variables


@dataclass(frozen=True)
class RunConfig:
    features: FeaturePipelineConfig = field(default_factory=FeaturePipelineConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    seed: int = 0
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    out_dir: str = "out"

    @property
    def augment(self):
        return self.train.augment


def _field_names(cls):
    return [f.name for f in fields(cls)]


def _build(cls, name, values, base=None):
    """
    Instantiates a config dataclass from a dict, rejecting unknown keys.
    """
    if not isinstance(values, dict):
        raise ConfigError(f"Section '{name}' must be a JSON object")
    known = _field_names(cls)
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"Unknown key(s) {unknown} in section '{name}'; expected some of {known}")
    try:
        return replace(base, **values) if base is not None else cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid value in section '{name}': {e}")


def _merge(variables, overrides):
    merged = {key: dict(variables.get(key) or {}) for key in SECTIONS}
    for key in TOP_LEVEL_KEYS:
        if key in variables:
            merged[key] = variables[key]
    for key, value in (overrides or {}).items():
        if key in SECTIONS:
            merged[key].update({k: v for k, v in value.items() if v is not None})
        elif value is not None:
            merged[key] = value
    unknown = sorted(set(variables) - set(SECTIONS) - set(TOP_LEVEL_KEYS))
    if unknown:
        raise ConfigError(f"Unknown config section(s) {unknown}; expected {list(SECTIONS) + list(TOP_LEVEL_KEYS)}")
    return merged


def build_run_config(variables=None, overrides=None) -> RunConfig:
    """
    Validates and merges raw variables with command-line overrides.

    Args:
        variables (dict): output of load_run_variables.
        overrides (dict): section -> {key: value} plus top-level keys; None values are ignored.

    Returns:
        RunConfig: the validated configuration.

    Raises:
        ConfigError: with the offending section and key.
    """
    merged = _merge(variables or {}, overrides)
    try:
        seed = int(merged.get('seed', 0))
        workers = int(merged.get('workers', os.cpu_count() or 1))
    except (TypeError, ValueError):
        raise ConfigError(f"seed and workers must be integers, got seed={merged.get('seed')!r}, "
                          f"workers={merged.get('workers')!r}") from None
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")

    feature_values = merged['features']
    fbank_keys = set(_field_names(FbankConfig))
    fbank = _build(FbankConfig, 'features', {k: v for k, v in feature_values.items() if k in fbank_keys})
    vad = _build(VadConfig, 'vad', merged['vad'])
    pipeline_values = {k: v for k, v in feature_values.items() if k not in fbank_keys}
    features = _build(FeaturePipelineConfig, 'features', {**pipeline_values, 'fbank': fbank, 'vad': vad})

    student_values = dict(merged['student'])
    preset = student_values.pop('preset', 'tdnn-small')
    if 'conv_layers' in student_values:
        student_values['conv_layers'] = tuple(tuple(layer) for layer in student_values['conv_layers'])
    student = _build(StudentConfig, 'student', {**student_values, 'seed': seed}, base=student_preset(preset))

    train_values = {**merged['train'], 'seed': seed, 'workers': workers,
                    'augment': _build(AugmentConfig, 'augment', merged['augment']),
                    'contrastive': _build(ContrastiveConfig, 'contrastive', merged['contrastive']),
                    'aam': _build(AamConfig, 'aam', merged['aam'])}
    train = _build(TrainConfig, 'train', train_values)
    synth = _build(SynthSpec, 'synth', {**merged['synth'], 'seed': seed})

    return RunConfig(features=features, student=student, train=train, synth=synth, seed=seed, workers=workers,
                     out_dir=str(merged.get('out_dir', 'out')))
