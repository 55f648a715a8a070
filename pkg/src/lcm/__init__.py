"""Locally constrained compact point-cloud model.

Masked point modeling on a small numpy autodiff core: a local-aggregation
encoder, a selective-SSM decoder with locally constrained feedforward
layers, a Transformer baseline, and analytic cost counters.
"""

__version__ = "0.1.0"
