"""marginforge: large-margin training for dense ReLU classifiers.

Enforces a dual-norm, linearized distance-to-boundary margin at any chosen
set of layers (input, hidden, output), alongside cross-entropy and hinge
baselines, gradient-sign adversarial attacks, and a config-driven experiment
harness for noisy-label, limited-data and robustness studies.
"""

from .autodiff import Graph, GraphError, ShapeMismatchError, backward
from .net import (Dense, ForwardTrace, LayerSpec, Model, ModelError, Relu,
                  class_layer_grads, forward, init_model, load_model,
                  logit_grad_wrt_layer, model_from_dims, predict, save_model)
from .margin import (InfeasibleError, MarginConfig, MarginError,
                     NoBoundaryInWindow, PairDistance, PairDistanceTable,
                     aggregate, approx_distance, cross_entropy_loss,
                     dual_exponent, exact_distance_oracle_2d, hinge_loss,
                     hyperplane_distance, lp_norm, margin_loss_batch,
                     margin_pair_penalty, mean_layer_distances,
                     svm_margin_check)
from .optim import (DivergenceError, OptimizerConfig, OptimizerError,
                    OptimizerState, step)
from .attack import (AttackConfig, AttackError, AttackResult, evaluate_attack,
                     fgsm, gaussian_perturb, ifgsm)
from .data import (DataError, Dataset, IdxFormatError, flip_labels, load_idx,
                   split, subsample, synthetic_digit_dataset, toy_two_class,
                   write_idx)
from .harness import (ConfigError, DataBundle, ExperimentConfig, RunReport,
                      TrainingDiverged, build_datasets, config_from_dict,
                      config_to_dict, sweep_adversarial, sweep_generalization,
                      sweep_noise, train)

__version__ = "0.1.0"
