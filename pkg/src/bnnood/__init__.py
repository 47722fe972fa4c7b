"""OOD-aware likelihoods and approximate Bayesian inference for small MLP classifiers."""

import os

# BNNOOD_THREADS caps BLAS/OpenMP worker threads; it must be applied before
# numpy is first imported to take effect
if os.environ.get("BNNOOD_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["BNNOOD_THREADS"])

from .data import LabeledSet
from .errors import (BnnoodError, ConfigurationError, DomainError, FormatError,
                     TrainingAbort, UsageError)
from .inference import LaplaceConfig, TrainConfig, VbConfig, fit_laplace, fit_vb, train_map
from .likelihoods import LikelihoodSpec
from .models import Mlp, Posterior, expand_none_class, init_mlp, predict

__version__ = "0.1.0"
