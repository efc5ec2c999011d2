""" 64-bit tensors with reverse differentiation, optimizer and checkpoints. """

from .tensor import Tensor, DimensionError, no_grad, concat, stack, maximum, minimum
from .ops import ParameterError, linear, softmax, layer_norm, dropout, bilinear_sample, grid_sample, conv2d
from .rng import RngStream
from .params import Parameter, ParamStore, init_linear, init_layer_norm, dense, perturb
from .optim import AdamState, MissingGradError, adam_step, scheduled_lr
from .gradcheck import NonFiniteError, grad_check
from .checkpoint import CheckpointError, save_checkpoint, load_checkpoint, restore
