"""End-to-end convolutional saliency regression: layers, training, accounting and metrics."""

from .errors import (ConfigError, DataError, DivergenceError, FormatError, SalnetError,
                     ShapeError)
from .layers import LayerCache, LayerParams, LayerSpec
from .models import (GaussianInit, HeInit, MemoryEstimate, NetSpec, Network, blob_table,
                     count_parameters, deep_spec, estimate_memory, init_weights, shallow_spec)

__version__ = "0.1.0"
