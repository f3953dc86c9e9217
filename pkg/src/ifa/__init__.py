"""Integrated feature analysis toolkit.

Operates on serialized per-sample feature archives: dataset-level
distribution analysis for a common CAM intensity scale, feature
decomposition via importance matrices, evaluation metrics, rendering,
and a self-contained reference network for end-to-end verification.
"""

__version__ = "0.1.0"
