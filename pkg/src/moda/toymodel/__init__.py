from .config import AttentionKind, BlockConfig, Combine, ModelConfig
from .data import SyntheticTask, gen_ids, gen_synthetic_dataset, stack
from .model import (ModelState, backward, backward_batch, block_forward, cross_entropy,
                    forward, forward_batch, init_model, make_trace)
from .train import (ALIGNER_GRID, FUSION_GRID, MASK_GRID, MDM_DAA_GRID, PRESET_GRIDS,
                    TrainConfig, ablate, apply_overrides, evaluate, train)

__all__ = [
    "AttentionKind", "BlockConfig", "Combine", "ModelConfig", "SyntheticTask", "gen_ids",
    "gen_synthetic_dataset", "stack", "ModelState", "backward", "backward_batch",
    "block_forward", "cross_entropy", "forward", "forward_batch", "init_model", "make_trace",
    "ALIGNER_GRID", "FUSION_GRID", "MASK_GRID", "MDM_DAA_GRID", "PRESET_GRIDS", "TrainConfig", "ablate",
    "apply_overrides", "evaluate", "train",
]
