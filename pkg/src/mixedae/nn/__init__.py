from . import autodiff, functional
from .autodiff import Parameter, Tensor
from .layers import BatchNorm, Dense, batchnorm_forward, dense_forward, lecun_normal
from .optim import Adam
from .training import EarlyStopping, frozen, minibatch_slices

__all__ = [
    "Adam",
    "BatchNorm",
    "Dense",
    "EarlyStopping",
    "Parameter",
    "Tensor",
    "autodiff",
    "batchnorm_forward",
    "dense_forward",
    "frozen",
    "functional",
    "lecun_normal",
    "minibatch_slices",
]
