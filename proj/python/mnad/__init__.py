"""Memory-guided normality scoring primitives.

The heavy lifting (training, evaluation, the CLI) lives in the C++ tool; this
package exposes the scoring and memory-bank operations for analysis work.
"""

from ._core import (
    __version__,
    abnormality_score,
    assign,
    cosine_lr,
    distance_score,
    min_pairwise_distance,
    minmax_normalize,
    psnr,
    read,
    regular_score,
    roc_auc,
    update,
)

__all__ = [
    "__version__",
    "abnormality_score",
    "assign",
    "cosine_lr",
    "distance_score",
    "min_pairwise_distance",
    "minmax_normalize",
    "psnr",
    "read",
    "regular_score",
    "roc_auc",
    "update",
]
