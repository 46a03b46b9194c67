from rlqfs.model.config import ModelConfig
from rlqfs.model.transformer import (
    METER,
    PassageEncoder,
    ScoreMeter,
    Seq2SeqModel,
    extend_positional,
)

__all__ = [
    "ModelConfig",
    "Seq2SeqModel",
    "PassageEncoder",
    "extend_positional",
    "ScoreMeter",
    "METER",
]
