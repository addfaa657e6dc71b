"""
Layered configuration: dataclass defaults, YAML file, environment, CLI overrides.
"""

import os
import math
import yaml
import logging
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Dict, List, Optional
from dotenv import load_dotenv

from .schemas import (
    LOSS_NAMES, DatasetConfig, ModelConfig, ViewConfig, TrainConfig, LoggingConfig, SweepConfig
)

logger = logging.getLogger(__name__)

PROJECT_ROOT = Path(__file__).parent.parent.parent
DEFAULT_CONFIG_PATH = PROJECT_ROOT / "config" / "settings.yaml"

SECTIONS = {
    'dataset': DatasetConfig,
    'model': ModelConfig,
    'views': ViewConfig,
    'training': TrainConfig,
    'logging': LoggingConfig,
    'sweep': SweepConfig,
}


class ConfigurationError(Exception):
    """Configuration-related errors"""

    def __init__(self, message: str, keys: Optional[List[str]] = None):
        super().__init__(message)
        self.keys = keys or []


def _coerce(value: Any, default: Any, key: str) -> Any:
    """Coerce a parsed value to the type of the field default"""
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                return value.lower() in ('true', '1', 'yes', 'on', 'enabled')
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"expected an integer, got {value}")
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            if isinstance(value, str):
                separator = '+' if '+' in value else ','
                value = [item.strip() for item in value.split(separator) if item.strip()]
            if not isinstance(value, (list, tuple)):
                value = [value]
            if default and isinstance(default[0], (int, float)) and not isinstance(default[0], bool):
                return [type(default[0])(item) for item in value]
            return list(value)
        if isinstance(default, str):
            return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"Invalid value for {key}: {value!r} ({e})", keys=[key])
    return value


class Config:
    """Resolved configuration for one run"""

    def __init__(self, path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None,
                 use_env: bool = True):
        self.path = Path(path) if path else None
        self.dataset = DatasetConfig()
        self.model = ModelConfig()
        self.views = ViewConfig()
        self.training = TrainConfig()
        self.logging = LoggingConfig()
        self.sweep = SweepConfig()

        if use_env:
            self._load_env_file()

        if self.path is not None:
            self._apply_mapping(self._load_yaml(self.path))

        if use_env:
            self._apply_env_overrides()

        for key, value in (overrides or {}).items():
            self.set_value(key, value)

        logger.debug(f"Configuration loaded from {self.path or 'defaults'}")

    def _load_env_file(self):
        """Load .env from the project root if present"""
        env_file = PROJECT_ROOT / ".env"
        if env_file.exists():
            load_dotenv(env_file)
            logger.debug(f"Loaded environment file: {env_file}")

    def _load_yaml(self, path: Path) -> Dict[str, Any]:
        """Load YAML configuration file"""
        try:
            with open(path, 'r', encoding='utf-8') as file:
                content = yaml.safe_load(file)
                if content is None:
                    return {}
                if not isinstance(content, dict):
                    raise ConfigurationError(f"Top level of {path} must be a mapping")
                return content
        except FileNotFoundError:
            raise ConfigurationError(f"Configuration file not found: {path}")
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Invalid YAML in {path}: {e}")

    def _apply_mapping(self, mapping: Dict[str, Any]):
        for section_name, values in mapping.items():
            if section_name not in SECTIONS:
                raise ConfigurationError(f"Unknown configuration section: {section_name}",
                                         keys=[section_name])
            if not isinstance(values, dict):
                raise ConfigurationError(f"Section {section_name} must be a mapping",
                                         keys=[section_name])
            for key, value in values.items():
                self.set_value(f"{section_name}.{key}", value)

    def _apply_env_overrides(self):
        """Environment variables take precedence over the file"""
        env_map = {
            'SPI_LOG_LEVEL': 'logging.level',
            'SPI_LOG_FILE': 'logging.file',
            'SPI_LOG_STRUCTURED': 'logging.structured',
            'SPI_SEED': 'training.seed',
        }
        for env_var, key in env_map.items():
            value = os.getenv(env_var)
            if value is not None:
                self.set_value(key, value)

    def set_value(self, key: str, value: Any):
        """Set `section.field` (a bare field name is looked up in every section)"""
        section_name, _, field_name = key.rpartition('.')
        if not section_name:
            section_name = self._find_section(field_name)

        section = getattr(self, section_name, None) if section_name in SECTIONS else None
        if section is None:
            raise ConfigurationError(f"Unknown configuration section: {section_name}", keys=[key])

        defaults = {f.name: getattr(section, f.name) for f in fields(section)}
        if field_name not in defaults:
            raise ConfigurationError(f"Unknown configuration key: {key}", keys=[key])

        if isinstance(value, str) and not isinstance(defaults[field_name], (str, list)):
            value = yaml.safe_load(value)
        setattr(section, field_name, _coerce(value, defaults[field_name], key))

    def _find_section(self, field_name: str) -> str:
        matches = [name for name, cls in SECTIONS.items()
                   if field_name in {f.name for f in fields(cls)}]
        if len(matches) != 1:
            raise ConfigurationError(f"Unknown or ambiguous configuration key: {field_name}",
                                     keys=[field_name])
        return matches[0]

    def validate(self):
        """Validate configuration and raise errors if invalid"""
        errors = []
        keys = []

        def check(condition: bool, key: str, message: str):
            if not condition:
                errors.append(f"{key} {message}")
                keys.append(key)

        ds = self.dataset
        check(ds.kind in ('gaussian', 'moons'), 'dataset.kind', "must be 'gaussian' or 'moons'")
        check(ds.n_classes >= 2, 'dataset.n_classes', "must be >= 2")
        check(ds.kind != 'moons' or ds.n_classes == 2, 'dataset.n_classes', "must be 2 for moons")
        check(ds.d_in >= 2, 'dataset.d_in', "must be >= 2")
        check(ds.shots >= 1, 'dataset.shots', "must be >= 1")
        for name in ('n_source', 'n_target_unlabeled', 'n_target_test'):
            check(getattr(ds, name) >= ds.n_classes, f'dataset.{name}', "must be >= n_classes")
        check(ds.noise_sigma >= 0, 'dataset.noise_sigma', "must be >= 0")
        check(ds.scale > 0, 'dataset.scale', "must be > 0")
        check(len(ds.translation) <= ds.d_in, 'dataset.translation', "must have at most d_in entries")

        check(self.model.embedding_dim >= 1, 'model.embedding_dim', "must be >= 1")
        check(all(h >= 1 for h in self.model.hidden), 'model.hidden', "entries must be >= 1")

        v = self.views
        check(v.n_global == 2, 'views.n_global', "must be 2")
        check(v.n_local >= 0, 'views.n_local', "must be >= 0")
        check(0.0 <= v.local_mask_fraction < 1.0, 'views.local_mask_fraction', "must be in [0, 1)")
        check(v.global_noise_sigma >= 0 and v.local_noise_sigma >= 0, 'views.global_noise_sigma',
              "noise sigmas must be >= 0")

        t = self.training
        check(t.epochs >= 0, 'training.epochs', "must be >= 0")
        check(t.iters_per_epoch >= 0, 'training.iters_per_epoch', "must be >= 0")
        for name in ('tau_con', 'tau_sharp', 'tau_pl_start', 'tau_pl_floor'):
            check(getattr(t, name) > 0, f'training.{name}', "must be > 0")
        check(t.tau_pl_floor <= t.tau_pl_start, 'training.tau_pl_floor', "must be <= tau_pl_start")
        for name in ('lambda_con', 'lambda_ils', 'lambda_ida', 'lambda_cls'):
            value = getattr(t, name)
            check(math.isfinite(value) and value >= 0, f'training.{name}', "must be finite and >= 0")
        check(0.0 < t.rho <= 1.0, 'training.rho', "must be in (0, 1]")
        check(0.0 < t.gamma <= 1.0, 'training.gamma', "must be in (0, 1]")
        check(t.warmup_epochs >= 0, 'training.warmup_epochs', "must be >= 0")
        check(t.eta_sup >= 1, 'training.eta_sup', "must be >= 1")
        check(t.batch_unlabeled >= 1, 'training.batch_unlabeled', "must be >= 1")
        check(1 <= t.top_k <= self.model.embedding_dim, 'training.top_k', "must be in [1, embedding_dim]")
        check(0.0 <= t.label_smoothing < 1.0, 'training.label_smoothing', "must be in [0, 1)")
        check(t.lr_floor <= t.lr_peak, 'training.lr_floor', "must be <= lr_peak")
        check(t.momentum >= 0 and t.weight_decay >= 0, 'training.momentum', "momentum and weight_decay must be >= 0")
        check(t.injection_interval in ('epoch', 'iteration'), 'training.injection_interval',
              "must be 'epoch' or 'iteration'")
        check(t.anchor_mode in ('as_written', 'standard'), 'training.anchor_mode',
              "must be 'as_written' or 'standard'")
        check(set(t.loss_mask) <= set(LOSS_NAMES), 'training.loss_mask',
              f"entries must be among {', '.join(LOSS_NAMES)}")
        check('cls' in t.loss_mask, 'training.loss_mask', "must include cls")

        check(self.logging.level.upper() in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'),
              'logging.level', f"is invalid: {self.logging.level}")
        check(self.sweep.workers >= 1, 'sweep.workers', "must be >= 1")

        if errors:
            raise ConfigurationError(f"Configuration validation failed: {'; '.join(errors)}", keys=keys)

        logger.debug("Configuration validation passed")

    def resolved(self) -> Dict[str, Any]:
        """Fully explicit nested dict of every section"""
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def copy(self) -> 'Config':
        clone = Config(use_env=False)
        clone.path = self.path
        for name, values in self.resolved().items():
            for key, value in values.items():
                clone.set_value(f"{name}.{key}", value)
        return clone

    def get_summary(self) -> Dict[str, Any]:
        """Short summary for logging"""
        t = self.training
        return {
            'dataset': f"{self.dataset.kind} C={self.dataset.n_classes} shots={self.dataset.shots}",
            'epochs': t.epochs,
            'loss_mask': list(t.loss_mask),
            'gamma': t.gamma,
            'rho': t.rho,
            'warmup_epochs': t.warmup_epochs,
            'seed': t.seed,
        }


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> Config:
    """Load from `path`, falling back to config/settings.yaml when it exists"""
    if path is None and DEFAULT_CONFIG_PATH.exists():
        path = str(DEFAULT_CONFIG_PATH)
    return Config(path, overrides)
