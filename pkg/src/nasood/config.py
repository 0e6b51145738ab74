"""Configuration dataclasses for search, retraining, and classifier pretraining.

This module deliberately imports nothing else from the package so every other
module can depend on it without cycles.
"""

import dataclasses
import math
from dataclasses import dataclass, field

from .errors import ConfigurationError

SEARCH_MODES = ("nasood", "nasood_no_cycle", "darts_baseline", "random_sample")

NORM_KINDS = ("instance", "batch")


def _check_positive_int(name, value):
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")


def _check_nonneg_float(name, value):
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise ConfigurationError(f"{name} must be a number, got {value!r}")
    if not math.isfinite(value) or value < 0:
        raise ConfigurationError(f"{name} must be finite and >= 0, got {value!r}")


def _check_fraction(name, value):
    _check_nonneg_float(name, value)
    if value >= 1:
        raise ConfigurationError(f"{name} must lie in [0, 1), got {value!r}")


@dataclass
class AuxLossWeights:
    """Weights for the generator's auxiliary objective.

    lambda_cycle scales the reconstruction (cycle-consistency) term and
    lambda_ce scales the semantic cross-entropy term.  Setting a weight to 0
    removes that term's gradient contribution exactly.
    """

    lambda_cycle: float = 1.0
    lambda_ce: float = 1.0

    def validate(self):
        _check_nonneg_float("lambda_cycle", self.lambda_cycle)
        _check_nonneg_float("lambda_ce", self.lambda_ce)


@dataclass
class SearchConfig:
    """Settings for one architecture search run.

    Defaults are the desk-scale preset (8 cells, 16 initial channels); the
    published full-scale setting is available through full_scale_config().
    """

    mode: str = "nasood"
    layers: int = 8
    init_channels: int = 16
    num_classes: int = 4
    epochs: int = 50
    batch_size: int = 64
    lr_omega: float = 0.025
    momentum: float = 0.9
    weight_decay_omega: float = 3e-4
    lr_alpha: float = 3e-4
    weight_decay_alpha: float = 1e-3
    # The generator stays deliberately small and slow: its weights never feel
    # pressure from the supernet side (omega trains on real data only), so a
    # wide or fast G drifts off the image manifold within a few epochs and
    # the architecture gradient degrades into an adversarial-noise signal.
    lr_generator: float = 5e-6
    gen_channels: int = 4
    gen_norm: str = "instance"
    aux_weights: AuxLossWeights = field(default_factory=AuxLossWeights)
    pretrain_epochs: int = 10
    pretrain_lr: float = 1e-3
    seed: int = 0
    deterministic: bool = False

    def validate(self):
        if self.mode not in SEARCH_MODES:
            raise ConfigurationError(
                f"mode must be one of {SEARCH_MODES}, got {self.mode!r}")
        for name in ("layers", "init_channels", "num_classes", "epochs",
                     "batch_size", "gen_channels", "pretrain_epochs"):
            _check_positive_int(name, getattr(self, name))
        for name in ("lr_omega", "momentum", "weight_decay_omega", "lr_alpha",
                     "weight_decay_alpha", "lr_generator", "pretrain_lr"):
            _check_nonneg_float(name, getattr(self, name))
        if self.gen_norm not in NORM_KINDS:
            raise ConfigurationError(
                f"gen_norm must be one of {NORM_KINDS}, got {self.gen_norm!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigurationError(f"seed must be a non-negative integer, got {self.seed!r}")
        if not isinstance(self.aux_weights, AuxLossWeights):
            raise ConfigurationError("aux_weights must be an AuxLossWeights instance")
        self.aux_weights.validate()


def full_scale_config(**overrides) -> SearchConfig:
    """Published full-scale search preset: 20 cells, 36 initial channels."""
    base = dict(layers=20, init_channels=36)
    base.update(overrides)
    return SearchConfig(**base)


@dataclass
class RetrainConfig:
    """Settings for retraining a derived (discrete) network from scratch."""

    target_domain: str = ""
    layers: int = 8
    init_channels: int = 16
    num_classes: int = 4
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 3e-4
    cosine: bool = True
    augment: bool = False
    val_fraction: float = 0.1
    seed: int = 0
    deterministic: bool = False

    def validate(self):
        for name in ("layers", "init_channels", "num_classes", "epochs", "batch_size"):
            _check_positive_int(name, getattr(self, name))
        for name in ("lr", "momentum", "weight_decay"):
            _check_nonneg_float(name, getattr(self, name))
        _check_fraction("val_fraction", self.val_fraction)
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigurationError(f"seed must be a non-negative integer, got {self.seed!r}")


@dataclass
class PretrainConfig:
    """Settings for pretraining the frozen semantic classifier."""

    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    width: int = 16
    seed: int = 0

    def validate(self):
        for name in ("epochs", "batch_size", "width"):
            _check_positive_int(name, getattr(self, name))
        _check_nonneg_float("lr", self.lr)


def replace(cfg, **changes):
    """dataclasses.replace re-exported for callers tweaking a config."""
    return dataclasses.replace(cfg, **changes)
