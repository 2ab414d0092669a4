"""Relation extraction with jointly trained text and KB-embedding sides.

A BiLSTM sentence encoder with word and sentence attention reads bags of
entity-pair mentions; a complex-valued bilinear KB embedding scores the
pair against every relation. The two sides are trained jointly (optionally
tied by a dissimilarity term) and combined at inference by a weighted
average of their relation distributions.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, HrereError, NumericError

__all__ = ["ConfigError", "DataError", "HrereError", "NumericError", "__version__"]
