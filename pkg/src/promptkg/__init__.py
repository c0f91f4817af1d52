"""Knowledge graph completion with disentangled structure prompts fed to a frozen encoder."""

from .config import RunConfig, load_config, parse_config
from .data import KnowledgeGraph, add_inverse_triples, build_neighbor_index, load_augmented, load_dataset_dir
from .errors import (CheckpointError, ConfigError, ContractError, DataError, DimensionError, NumericAbort,
                     ParseError, PromptKGError, QueryIndexError, ReferentialIntegrityError)
from .model import PromptKGModel

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "load_config", "parse_config",
    "KnowledgeGraph", "add_inverse_triples", "build_neighbor_index", "load_augmented", "load_dataset_dir",
    "PromptKGModel",
    "PromptKGError", "ConfigError", "DimensionError", "ContractError", "CheckpointError", "DataError",
    "ParseError", "ReferentialIntegrityError", "QueryIndexError", "NumericAbort",
]
