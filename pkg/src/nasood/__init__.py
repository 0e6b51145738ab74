"""Differentiable architecture search trained against an adversarial data
generator, so the discovered cells hold up on unseen domains.

A weight-sharing supernet and a conditional image generator play a minimax
game: the generator learns to synthesize hard novel-domain examples (kept
honest by cycle-consistency and a frozen semantic classifier) while the
architecture scores descend on the resulting validation loss.  The package
also ships a plain bilevel baseline, random-genotype sampling, a procedural
multi-domain benchmark, retraining/evaluation under a leave-one-domain-out
protocol, and analysis tooling for the discovered architectures.
"""

__version__ = "0.1.0"

from .config import (
    AuxLossWeights,
    PretrainConfig,
    RetrainConfig,
    SearchConfig,
    full_scale_config,
)
from .datasets import (
    MultiDomainDataset,
    Sample,
    SplitSpec,
    SynthSpec,
    batch_iterator,
    generate_synth_dataset,
    load_dataset,
    load_folder_dataset,
    make_splits,
    save_dataset,
)
from .errors import (
    ConfigurationError,
    DatasetError,
    InternalError,
    InvalidParameterError,
    NasOodError,
    NonFiniteLossError,
    ProtocolViolationError,
    ValidationError,
)
from .generator import (
    ConditionalGenerator,
    SemanticClassifier,
    auxiliary_loss,
    condition_input,
    cycle_loss,
    parameter_checksum,
    pretrain_classifier,
    semantic_ce_loss,
)
from .genotype import Genotype, GenotypeMeta, load_genotype, save_genotype, validate_genotype
from .operations import PRIMITIVES
from .search_space import (
    ArchitectureParameters,
    DerivedNetwork,
    Supernet,
    build_supernet,
    count_parameters,
    derive_genotype,
    flatten_alpha,
    instantiate_derived_network,
    params_millions,
    softmax_relaxation,
)
from .trainer import (
    LossRecord,
    SearchResult,
    SearchState,
    darts_baseline_search,
    evaluate,
    init_search_state,
    random_genotype,
    retrain_derived,
    search,
    search_step,
)

__all__ = [name for name in dir() if not name.startswith("_")]
