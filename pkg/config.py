"""
Experiment Configuration
JSON key-tree configuration with built-in presets, defaults materialized into
every provenance record, and environment overrides.
"""

import copy
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Union

from augmentation import NOISE_LEVELS
from data_factory import OOD_LEVELS, SPLITS, DatasetPlan, parse_plan
from errors import ConfigError
from fno import CHANNEL_NAMES, FnoConfig
from losses import LossConfig
from pde_systems import SystemTag
from spectral_grid import GridSpec
from training import MODEL_VARIANTS, TrainConfig

DEFAULTS: dict = {
    'seed': None,
    'grid': {'nx': 32, 'ny': 32},
    'plans': {
        'pretrain_sizes': {'train': 576, 'val': 72, 'test': 72},
        'downstream_sizes': {'train': 256, 'val': 64, 'test': 128},
        'sparsity': [0.2, 0.8],
        'darcy_dt': 0.01,
    },
    'model': {
        'width': 16,
        'modes': 8,
        'n_blocks': 4,
        'activation': 'gelu',
        'pointwise': True,
        'dtype': 'float32',
    },
    'training': {
        'epochs': 100,
        'batch_size': 32,
        'lr_max': 1e-3,
        'lr_min': 1e-6,
        'alpha': 0.5,
    },
    'sweep': {
        'models': ['scratch', 'data', 'physics', 'hybrid'],
        'tasks': ['poisson', 'advection-diffusion', 'helmholtz'],
        'ood': list(OOD_LEVELS),
        'n_shot': [8, 16, 32, 64, 128],
        'sigma': [0.0],
    },
    'output_dir': None,
}

PRESETS: Dict[str, dict] = {
    'desk': {'seed': 0},
    'noise': {
        'seed': 0,
        'sweep': {'ood': ['id'], 'n_shot': [32], 'sigma': list(NOISE_LEVELS)},
    },
    'unseen': {
        'seed': 0,
        'sweep': {
            'tasks': ['reaction-diffusion', 'reaction-advection-diffusion', 'darcy'],
            'ood': ['id'],
        },
    },
    'zero-shot': {
        'seed': 0,
        'sweep': {'models': ['data', 'physics', 'hybrid'], 'n_shot': [0]},
    },
}


def _merge(base: dict, override: dict, path: str = '') -> dict:
    """Deep-merge override into a copy of base; unknown keys are rejected."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown configuration key '{where}'")
        if isinstance(base[key], dict) and base[key] and isinstance(value, dict):
            merged[key] = _merge(base[key], value, where)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def thread_count() -> int:
    """Worker width for sweeps and dataset generation from PDEWB_THREADS."""
    raw = os.environ.get('PDEWB_THREADS', '1')
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"PDEWB_THREADS must be an integer, got '{raw}'")
    return max(1, threads)


def default_output_dir() -> str:
    return os.environ.get('PDEWB_OUTPUT_DIR', './runs')


@dataclass
class ExperimentConfig:
    """A fully materialized configuration document."""

    document: dict

    def __post_init__(self):
        self.validate()

    def validate(self):
        doc = self.document
        if doc.get('seed') is None:
            raise ConfigError("configuration needs a 'seed'")
        if not isinstance(doc['seed'], int) or doc['seed'] < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {doc['seed']!r}")
        GridSpec.from_dict(doc['grid'])
        self.fno_config()
        self.train_config()
        for kind in ('pretrain_sizes', 'downstream_sizes'):
            sizes = doc['plans'][kind]
            if set(sizes) != set(SPLITS) or any(int(v) < 1 for v in sizes.values()):
                raise ConfigError(f"plans.{kind} needs positive train, val and test sizes")
        sweep = doc['sweep']
        for model in sweep['models']:
            if model not in MODEL_VARIANTS:
                raise ConfigError(f"unknown model variant '{model}'")
        for task in sweep['tasks']:
            SystemTag.parse(task)
        for ood in sweep['ood']:
            if ood not in OOD_LEVELS:
                raise ConfigError(f"unknown OOD level '{ood}'")
        if any(int(n) < 0 for n in sweep['n_shot']):
            raise ConfigError("n_shot entries must be non-negative")
        if any(float(s) < 0 for s in sweep['sigma']):
            raise ConfigError("sigma entries must be non-negative")

    @property
    def seed(self) -> int:
        return self.document['seed']

    @property
    def grid(self) -> GridSpec:
        return GridSpec.from_dict(self.document['grid'])

    @property
    def output_dir(self) -> Path:
        return Path(self.document['output_dir'] or default_output_dir())

    @property
    def sweep(self) -> dict:
        return self.document['sweep']

    def fno_config(self, in_channels: int = len(CHANNEL_NAMES)) -> FnoConfig:
        return FnoConfig(grid=self.grid, in_channels=in_channels, **self.document['model'])

    def train_config(self, mode: str = 'data', seed: Optional[int] = None) -> TrainConfig:
        training = dict(self.document['training'])
        alpha = training.pop('alpha')
        return TrainConfig(
            seed=self.seed if seed is None else seed,
            loss=LossConfig(mode=mode, alpha=alpha),
            **training,
        )

    def plan(self, name: str, seed: Optional[int] = None, workers: int = 1) -> DatasetPlan:
        plans = self.document['plans']
        kind = 'downstream_sizes' if name.lower().startswith('downstream') else 'pretrain_sizes'
        return parse_plan(
            name,
            self.grid,
            {k: int(v) for k, v in plans[kind].items()},
            self.seed if seed is None else seed,
            sparsity=tuple(plans['sparsity']),
            darcy_dt=float(plans['darcy_dt']),
            workers=workers,
        )

    def to_json(self) -> str:
        return json.dumps(self.document, indent=2, sort_keys=True)


def load_config(
    source: Optional[Union[str, Path]] = None,
    overrides: Optional[dict] = None,
) -> ExperimentConfig:
    """
    Build a configuration from a preset name or a JSON file, then apply overrides.

    Args:
        source: Preset name, path to a JSON document, or None for the desk preset
        overrides: Key tree merged last (e.g. a command-line seed)

    Raises:
        ConfigError: Unknown preset or key, unreadable file, missing seed
    """
    if source is None:
        document = PRESETS['desk']
    elif str(source) in PRESETS:
        document = PRESETS[str(source)]
    else:
        try:
            with open(source, 'r') as f:
                document = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read configuration {source}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"configuration {source} is not valid JSON: {e}") from e
        if not isinstance(document, dict):
            raise ConfigError("configuration must be a JSON object")

    merged = _merge(DEFAULTS, document)
    if overrides:
        merged = _merge(merged, overrides)
    if merged['output_dir'] is None:
        merged['output_dir'] = default_output_dir()
    return ExperimentConfig(merged)


def sweep_size(config: ExperimentConfig) -> int:
    sweep = config.sweep
    return len(sweep['models']) * len(sweep['tasks']) * len(sweep['ood']) * len(sweep['n_shot']) * len(sweep['sigma'])


def task_list(config: ExperimentConfig) -> List[SystemTag]:
    return [SystemTag.parse(t) for t in config.sweep['tasks']]
