"""Quantization laboratory for small LSTM text classifiers.

Trains discriminative and generative LSTM classifiers from scratch,
applies post-training quantization with activation calibration and greedy
path-following refinement, and provides the statistical analyses (KS,
KDE) used to study quantization behavior.
"""

__version__ = "0.1.0"
