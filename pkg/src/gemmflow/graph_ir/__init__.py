"""CNN graph representation, model file format and graph transforms."""
from .core import (ACTIVATIONS, NMS, OPS, Add, BoxDecode, Concat, Conv2D, Dequantize, DType, Graph,
                   MaxPool2D, Node, QuantParams, Quantize, RequantSpec, ResizeNearest, Sigmoid,
                   TensorSpec, conv_out_dim, f16_round, graphs_equal, infer_shape, propagate_shapes,
                   same_pad)
from .modelfile import deserialize, load_model, save_model, serialize
from .transforms import (OpCount, count_gop, downsample_factor, node_ops, param_count,
                         replace_activations, rescale_input)
