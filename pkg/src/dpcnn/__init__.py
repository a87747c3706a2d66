"""Deep pulse-coupled neural networks: neuron dynamics, normalization,
from-scratch reverse-time training, and experiment tooling."""

from .data import AugmentPolicy, Dataset, load_cifar10, load_dataset, load_idx, make_batches
from .network import (
    EpisodeTape,
    LayerSpec,
    Network,
    NetworkSpec,
    build_network,
    forward_episode,
    parse_architecture,
    predict,
)
from .neuron import (
    LifParams,
    NeuronParams,
    PcnnLayerState,
    init_state,
    lif_step,
    nonlinking_step,
    pcnn_step,
    surrogate_grad,
)
from .normalization import BnBank, BnParams, bn_apply, bn_backward
from .trainer import (
    AdamState,
    TrainConfig,
    adam_step,
    backward_episode,
    cosine_lr,
    evaluate,
    grad_check,
    grad_check_matrix,
    tet_loss,
    train,
)

__version__ = "0.1.0"
