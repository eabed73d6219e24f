"""
Data Weighter - learned per-instance weights and pruning for pre-training data.
"""

__version__ = "0.1.0"
