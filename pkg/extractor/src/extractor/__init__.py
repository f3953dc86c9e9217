"""Torch hook adapter for the ifa toolkit.

Dumps feature archives (features, per-class gradients, logits, inputs,
replayable head weights) from a live torch model and executes masked-input
jobs, talking to the analysis side exclusively through its file formats.
"""

__version__ = "0.1.0"
