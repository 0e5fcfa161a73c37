"""Cross-modal water-quality monitoring toolkit.

Couples a microscopic-image detection branch with a physicochemical
sensor-stream branch through gated cross-attention, and ships the full
desk-scale loop around that model: synthetic data generation, training,
structured pruning, INT8 quantization, metric evaluation, and streaming
alert replay.
"""

__version__ = "0.1.0"

CHECKPOINT_VERSION = 1
QUANTIZED_CHECKPOINT_VERSION = 2
