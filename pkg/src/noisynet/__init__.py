"""noisynet: feed-forward networks with trainable per-neuron Gaussian noise.

The noise level of every neuron is optimized jointly with the synaptic
weights; its gradient is a byproduct of the same backward pass.  The
package also ships the robustness-evaluation toolkit used to study the
effect: FGSM/PGD/L-BFGS attacks, natural corruption benchmarks, and
smoothed saliency maps.
"""

from .attacks import AttackConfig, fgsm, lbfgs_attack, pgd, run_attack, \
    transfer_attack
from .corruptions import CorruptionSpec, corrupt, corruption_accuracy
from .data import Dataset, load_dataset, load_idx, load_mnist, render_digits, \
    save_dataset, save_idx, split, synthetic_blobs
from .estimator import NoisyNetClassifier
from .harness import MetricsReport, RunConfig, evaluate, gradcheck, \
    preset_specs, train
from .network import ForwardTrace, GradientBundle, LayerSpec, NetworkState, \
    backward, build_network, cross_entropy_loss, forward, input_gradient, \
    load_checkpoint, predict, save_checkpoint
from .optim import Adam, AdamState, adam_step, sgd_step, step_decay
from .saliency import SaliencyConfig, saliency_map, write_pgm
from .tensor import DimensionError, RngStream, conv2d, matmul, \
    sample_standard_normal

__version__ = "0.1.0"

__all__ = [
    "Adam", "AdamState", "AttackConfig", "CorruptionSpec", "Dataset",
    "DimensionError", "ForwardTrace", "GradientBundle", "LayerSpec",
    "MetricsReport", "NetworkState", "NoisyNetClassifier", "RngStream",
    "RunConfig", "SaliencyConfig", "adam_step", "backward", "build_network",
    "conv2d", "corrupt", "corruption_accuracy", "cross_entropy_loss",
    "evaluate", "fgsm", "forward", "gradcheck", "input_gradient",
    "lbfgs_attack", "load_checkpoint", "load_dataset", "load_idx",
    "load_mnist", "matmul", "pgd", "predict", "preset_specs",
    "render_digits", "run_attack", "saliency_map", "sample_standard_normal",
    "save_checkpoint", "save_dataset", "save_idx", "sgd_step", "split",
    "step_decay", "synthetic_blobs", "train", "transfer_attack", "write_pgm",
]
