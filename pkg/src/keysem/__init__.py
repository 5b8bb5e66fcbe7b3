"""Key-semantic sparse attention for windowed image transformers, in numpy."""
from .attention import (ProjectionParams, dense_attention, linear_proj, semanir_att,
                        semanir_att_gather, semanir_att_mask)
from .cost_model import CostInputs, cost_report, peak_elements, stage_comparison
from .dictionary import KeySemanticDictionary, build_dictionary, count_constructions
from .patching import FeatureMap, TokenSet, WindowSet, conv3x3, window_merge, window_partition
from .pnm import read_pnm, write_pnm
from .stage import (Fixed, LayerParams, ModelParams, RandomFrom, StageConfig, init_model,
                    load_checkpoint, model_forward, parallel_windows, save_checkpoint,
                    train_step, transformer_layer, transformer_stage)
from .tensor_core import AllocMeter, FlopCounter, Matrix, RngStream, matmul, row_softmax

__all__ = [
    "AllocMeter", "CostInputs", "FeatureMap", "Fixed", "FlopCounter", "KeySemanticDictionary",
    "LayerParams", "Matrix", "ModelParams", "ProjectionParams", "RandomFrom", "RngStream",
    "StageConfig", "TokenSet", "WindowSet", "build_dictionary", "conv3x3", "cost_report",
    "count_constructions", "dense_attention", "init_model", "linear_proj", "load_checkpoint",
    "matmul", "model_forward", "parallel_windows", "peak_elements", "read_pnm", "row_softmax",
    "save_checkpoint", "semanir_att", "semanir_att_gather", "semanir_att_mask",
    "stage_comparison", "train_step", "transformer_layer", "transformer_stage",
    "window_merge", "window_partition", "write_pnm",
]
