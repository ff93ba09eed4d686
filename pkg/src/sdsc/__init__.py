"""Self-compressing networks with a preservation-set safety guard.

Weights are fake-quantized with learnable per-group bit depths that a size
penalty pushes down. Groups that reach all zeros are pruned, and a small
preservation set vetoes compression steps that damage behaviour.
"""

from .compressor import CompressionConfig, Trainer, run_experiment, train_compress
from .models import CnnSpec, DecoderSpec, build_cnn, build_decoder
from .quant import quantize, quantize_array
from .tensor import Rng, Tape, Tensor, grad

__all__ = [
    "CnnSpec", "CompressionConfig", "DecoderSpec", "Rng", "Tape", "Tensor", "Trainer",
    "build_cnn", "build_decoder", "grad", "quantize", "quantize_array", "run_experiment", "train_compress",
]
