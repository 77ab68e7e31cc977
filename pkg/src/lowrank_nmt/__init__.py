"""Low-rank factorized sequence-to-sequence translation models."""

from .autodiff import Tensor, backward, finite_difference_check
from .linalg import SingularSpectrum, SvdResult, relevant_rank, svd, truncate_to_rank
from .models import FactorizationScheme, ModelConfig, build_model, param_count, preset, size_reduction

__version__ = "0.1.0"
