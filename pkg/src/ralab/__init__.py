"""ralab: a desk-scale laboratory for long-sequence encoders.

Four attention mechanisms behind one [batch, time, dim] contract
(full-context MHA, limited-context attention with global tokens,
RWKV-style time mixing, Mamba-2-style state space), bidirectional
combination with Direction Dropout, a Conformer/CTC encoder, a synthetic
retrieval task, chunked long-form decoding, and a wall-clock throughput
harness reporting minutes of audio processed per second.
"""

from . import (attention_mha, attention_recurrent, bench, checkpoint, cli,
               direction, encoder, evaluation, numcore, synthdata, training)
from .numcore import Node, Tensor

__all__ = [
    "Node", "Tensor", "attention_mha", "attention_recurrent", "bench",
    "checkpoint", "cli", "direction", "encoder", "evaluation", "numcore",
    "synthdata", "training",
]

__version__ = "0.1.0"
