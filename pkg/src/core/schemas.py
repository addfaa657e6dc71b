"""
Dataclasses for the SPI configuration.
"""

import math
from dataclasses import dataclass, field
from typing import List

LOSS_NAMES = ('con', 'ils', 'ida', 'cls')


@dataclass
class DatasetConfig:
    """Synthetic domain-shift dataset parameters"""
    kind: str = "gaussian"  # gaussian | moons
    n_classes: int = 5
    d_in: int = 2
    n_source: int = 500
    n_target_unlabeled: int = 500
    n_target_test: int = 500
    shots: int = 3
    rotation: float = math.radians(50.0)
    translation: List[float] = field(default_factory=lambda: [0.0, 0.0])
    scale: float = 1.0
    noise_sigma: float = 0.5
    cluster_radius: float = 3.0
    seed: int = 0
    split_seed: int = -1  # -1 reuses `seed` for the labeled target split


@dataclass
class ModelConfig:
    """Feature extractor and classifier shape"""
    hidden: List[int] = field(default_factory=lambda: [64, 64])
    embedding_dim: int = 32


@dataclass
class ViewConfig:
    """Multi-view generator for unlabeled samples"""
    n_global: int = 2
    n_local: int = 4
    global_noise_sigma: float = 0.05
    local_mask_fraction: float = 0.5
    local_noise_sigma: float = 0.05


@dataclass
class TrainConfig:
    """Every SPI hyperparameter plus the ablation toggles"""
    epochs: int = 30
    iters_per_epoch: int = 0  # 0 means ceil(|T| / B_u)
    seed: int = 0

    tau_con: float = 0.1
    tau_sharp: float = 0.3
    tau_pl_start: float = 0.7
    tau_pl_floor: float = 0.25

    lambda_con: float = 4.0
    lambda_ils: float = 1.0
    lambda_ida: float = 1.0
    lambda_cls: float = 1.0

    rho: float = 0.7
    gamma: float = 0.8
    warmup_epochs: int = 5
    eta_sup: int = 4
    batch_unlabeled: int = 32
    top_k: int = 5
    label_smoothing: float = 0.1

    lr_start: float = 1e-6
    lr_peak: float = 2e-4
    lr_floor: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 5e-4

    removal_enabled: bool = True
    injection_enabled: bool = True
    injection_interval: str = "epoch"  # epoch | iteration
    loss_mask: List[str] = field(default_factory=lambda: list(LOSS_NAMES))
    use_ema: bool = True
    anchor_mode: str = "as_written"  # as_written | standard
    normalize_contrastive: bool = True

    @property
    def baseline_mode(self) -> bool:
        """Classifier-only training on labeled samples (S+T)"""
        return set(self.loss_mask) == {'cls'}

    @property
    def injects(self) -> bool:
        return self.injection_enabled and not self.baseline_mode


@dataclass
class LoggingConfig:
    """Logging configuration"""
    level: str = "INFO"
    format: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    file: str = "logs/spi.log"
    structured: bool = True
    max_file_size_mb: int = 10
    backup_count: int = 5


@dataclass
class SweepConfig:
    """Parallel sweep execution"""
    workers: int = 1
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    database: str = "sweep.db"
