"""Second-order token interaction explanations (BiLRP and Hessian x Product)
for dot-product sentence similarity models built on a numpy transformer encoder."""

from .config import ModelConfig, load_config, save_config
from .encoder import Model, TokenSequence, Vocab, embed, forward, load_model, save_model, similarity_score
from .errors import BilrpError, ValidationError
from .interactions import (
    FactorCache,
    InteractionMatrix,
    bilrp_explain,
    embedding_baseline,
    explain_pair,
    hxp_explain,
)
from .pairs import AnnotatedPair, parse_pairs_file, write_pairs_file
from .relevance import RuleConfig, explain_dimension, explain_dimensions

__version__ = "0.1.0"

__all__ = [
    "AnnotatedPair",
    "BilrpError",
    "FactorCache",
    "InteractionMatrix",
    "Model",
    "ModelConfig",
    "RuleConfig",
    "TokenSequence",
    "ValidationError",
    "Vocab",
    "bilrp_explain",
    "embed",
    "embedding_baseline",
    "explain_dimension",
    "explain_dimensions",
    "explain_pair",
    "forward",
    "hxp_explain",
    "load_config",
    "load_model",
    "parse_pairs_file",
    "save_config",
    "save_model",
    "similarity_score",
    "write_pairs_file",
]
