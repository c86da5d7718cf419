"""gradshield: input-gradient regularization, attacks, and certification
for desk-scale classifiers.

The package trains small feed-forward models with a squared-norm input
gradient penalty computed by finite differences (two forward passes
instead of double backpropagation), attacks them with gradient-based and
gradient-free methods, and certifies per-image robustness with
Lipschitz- and modulus-of-continuity-based lower bounds estimated via
extreme value theory.
"""

__version__ = "0.1.0"

from . import autodiff, models, gradreg, attacks, certify, data
from .autodiff import (Expr, Tensor, forward, forward_many, gradient,
                       numerical_gradient_check, leaf, const, detach)
from .models import (ModelSpec, Parameters, ModelGraph, CompiledModel,
                     QueryCounter, mlp, small_cnn, init_params, model_apply,
                     cross_entropy, cw_margin, predict)
from .gradreg import (RegConfig, TrainReport, input_gradient, reg_direction,
                      fd_penalty, db_penalty, train_step, train,
                      bench_regularizers)
from .attacks import (AttackResult, AttackConfig, project, fgsm, pgd,
                      grad_free_attack, min_adv_distance)
from .certify import (GevParams, CertificateRecord, NormPair, SamplerConfig,
                      dual_norm_kind, sample_modulus, sample_grad_norm_maxima,
                      gev_fit_mle, gev_upper_quantile, estimate_lipschitz,
                      estimate_omega, l_bound, omega_bound_certified,
                      quadratic_lambda, brute_force_min_distance,
                      certified_error_table)
from .data import (Dataset, gen_two_moons, gen_blob_images, parse_idx,
                   save_checkpoint, load_checkpoint)
from .rng import substream
