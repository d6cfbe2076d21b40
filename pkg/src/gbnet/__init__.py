"""Point-cloud classification with geometric descriptors, back-projected
edge features and channel-affinity attention, on a small numpy autodiff
core."""

from .geometry import PointCloud, descriptor_array, knn_search
from .model import GbnetModel, ModelConfig, TrainConfig, evaluate, gbnet_forward, train_epoch
from .tensor import Parameter, Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "GbnetModel",
    "ModelConfig",
    "Parameter",
    "PointCloud",
    "Tape",
    "Tensor",
    "TrainConfig",
    "backward",
    "descriptor_array",
    "evaluate",
    "gbnet_forward",
    "knn_search",
    "train_epoch",
]
