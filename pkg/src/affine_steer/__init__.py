"""Learn sparse coordinate-wise affine interventions on a frozen network's activations.

All interventions are trained jointly against a sum of per-layer sliced 1-D
Wasserstein costs with proximal SGD and a sparse group lasso penalty.
"""

from .baselines import evaluate, fit_mean_shift, fit_sequential_affine
from .loss import LossBreakdown, global_cost, regularizer_values, sliced_w2
from .model import ActivationTrace, FrozenModel, LayerBlock, forward_with_hooks, generate_synthetic, load_model, precompute_targets, save_model
from .prox import group_prox, soft_threshold, sparse_group_prox
from .tasks import PlantSpec, TaskSpec, gen_task, load_task
from .train import RunMetrics, TrainConfig, train, train_step
from .transport import AffineMap, TransportStack, apply, apply_with_strength, compose, identity_stack, load_stack, save_stack, support

__version__ = "0.1.0"
