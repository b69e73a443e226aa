"""ViT inference and token-contribution explanation engine."""

from .container import load_bundle, read_container, save_bundle, write_container
from .errors import InputError, ModelError, NumericError, ShapeError, VitexplainError
from .evaluate import (
    EvalRecord,
    EvalReport,
    PerturbSpec,
    aopc,
    auc_accuracy,
    lodds,
    perturb_image,
    segmentation_scores,
    upsample,
)
from .explain import (
    ContributionMap,
    ExplainerConfig,
    TransformWeights,
    aggregate,
    explain,
    extract_heatmap,
    necc,
    token_length,
    transformation_weights,
    update_map_ffn,
    update_map_mhsa,
)
from .grads import AttnGradSet, attention_gradients
from .model import (
    ForwardResult,
    LayerTrace,
    ModelBundle,
    ModelConfig,
    forward,
    normalize_image,
    residual_error,
    tokenize,
)

__version__ = "0.1.0"

__all__ = [
    "AttnGradSet",
    "ContributionMap",
    "EvalRecord",
    "EvalReport",
    "ExplainerConfig",
    "ForwardResult",
    "InputError",
    "LayerTrace",
    "ModelBundle",
    "ModelConfig",
    "ModelError",
    "NumericError",
    "PerturbSpec",
    "ShapeError",
    "TransformWeights",
    "VitexplainError",
    "aggregate",
    "aopc",
    "attention_gradients",
    "auc_accuracy",
    "explain",
    "extract_heatmap",
    "forward",
    "load_bundle",
    "lodds",
    "necc",
    "normalize_image",
    "perturb_image",
    "read_container",
    "residual_error",
    "save_bundle",
    "segmentation_scores",
    "token_length",
    "tokenize",
    "transformation_weights",
    "update_map_ffn",
    "update_map_mhsa",
    "upsample",
    "write_container",
]
