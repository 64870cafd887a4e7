"""viewmi: contrastive view analysis toolkit.

Exact and InfoNCE mutual-information estimation, controllable view
constructors (patches, colorspace and frequency splits, augmentations),
invertible pixel-wise flow generators with adversarial view learning, a
synthetic moving-digit benchmark with factor control, contrastive
pretraining with linear probes, and a sweep harness that classifies
MI-vs-transfer curves.
"""

__version__ = "0.1.0"

from .mi_core import (
    CriticConfig,
    JointTable,
    MIEstimate,
    exact_conditional_mi,
    exact_mi,
    i_nce_estimate,
    info_nce_loss,
    verify_mi_identities,
    verify_optimal_views,
)

__all__ = [
    "__version__",
    "CriticConfig",
    "JointTable",
    "MIEstimate",
    "exact_conditional_mi",
    "exact_mi",
    "i_nce_estimate",
    "info_nce_loss",
    "verify_mi_identities",
    "verify_optimal_views",
]
