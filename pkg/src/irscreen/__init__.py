"""Insulin-resistance screening from wearable, demographic and blood-panel data.

HOMA-IR is regressed from aggregated wearable windows and static features,
either directly with a gradient-boosted booster or through a (masked)
autoencoder representation, and classified with fixed thresholds.
"""

__version__ = "0.1.0"

from .domain import IrClass, IrThresholds, classify_ir, compute_homa_ir  # noqa: E402,F401

__all__ = ["IrClass", "IrThresholds", "classify_ir", "compute_homa_ir", "__version__"]
