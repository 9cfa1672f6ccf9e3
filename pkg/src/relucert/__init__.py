"""Certified l-inf robustness for ReLU networks via dual bounds on the
convex outer adversarial polytope."""

from .attacks import AttackResult, fgsm, pgd
from .bounds import (BoundPropState, PreActBounds, compute_bounds,
                     index_set_stats, naive_layerwise_bounds)
from .certify import (CertificateReport, certify_label, detect,
                      max_certified_eps, robust_error)
from .data import Dataset, gen_2d, load_idx
from .dual import (L2, LINF, DualNorm, DualVars, IndexPartition,
                   dual_backward, dual_bound, dual_objective)
from .linops import (Conv2dLayer, DenseLayer, Network, Tensor, adjoint_apply,
                     adjoint_on_basis, forward, load_model, save_model)
from .models import build_mlp, build_mnist_conv
from .oracle import (LpProblem, build_lp, sample_polytope, solve_lp,
                     tightness_report)
from .training import (RobustLossReport, TrainConfig, TrainResult,
                       robust_grad, robust_logits, robust_loss, train)

__version__ = "0.1.0"
