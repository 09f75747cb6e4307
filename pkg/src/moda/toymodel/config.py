from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from ..aligner import AlignerVariant, FuserMode
from ..modality import make_segmentation
from ..modmask import MaskSpec


class AttentionKind(str, Enum):
    BASELINE_JOINT = "BASELINE_JOINT"
    MODA = "MODA"


class Combine(str, Enum):
    CONCAT = "concat"
    SUM = "sum"


@dataclass(frozen=True)
class BlockConfig:
    """Settings shared by every block of a toy model.

    ``BASELINE_JOINT`` is ordinary causal attention with one softmax over the
    whole sequence. ``MODA`` splits each modality's queries into separate
    self- and cross-modal softmaxes; ``use_mdm`` switches the split masks from
    causal -inf to ``mask_spec``; ``use_daa`` aligns the other modalities'
    keys through the focus modality's normalized Gram before attending.
    """
    d: int = 32
    attention_kind: AttentionKind = AttentionKind.MODA
    mask_spec: MaskSpec = field(default_factory=MaskSpec)
    aligner_variant: AlignerVariant = AlignerVariant.COV
    fuser_mode: FuserMode = FuserMode.CONCAT
    use_mdm: bool = True
    use_daa: bool = True
    combine: Combine = Combine.CONCAT
    align_values: bool = False
    adapter_rank: Optional[int] = None
    ffn_mult: int = 2
    temperature: Optional[float] = None

    def __post_init__(self):
        for name, typ in (("attention_kind", AttentionKind), ("aligner_variant", AlignerVariant),
                          ("fuser_mode", FuserMode), ("combine", Combine)):
            object.__setattr__(self, name, typ(getattr(self, name)))
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.attention_kind is AttentionKind.MODA and not (self.use_mdm or self.use_daa):
            raise ValueError("a MODA block needs use_mdm or use_daa")

    @property
    def rank(self):
        return max(1, self.d // 4) if self.adapter_rank is None else self.adapter_rank

    @property
    def tau(self):
        return self.d ** 0.5 if self.temperature is None else self.temperature


@dataclass(frozen=True)
class ModelConfig:
    block: BlockConfig = field(default_factory=BlockConfig)
    n_blocks: int = 2
    layout: tuple = (("V", 8), ("T", 4))
    n_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "layout", tuple((m, int(n)) for m, n in self.layout))
        if self.n_blocks < 0 or self.n_classes < 2:
            raise ValueError("need n_blocks >= 0 and n_classes >= 2")

    @property
    def d(self):
        return self.block.d

    @property
    def segmentation(self):
        return make_segmentation(self.layout)

    @property
    def n_tokens(self):
        return sum(n for _, n in self.layout)
