"""Contrastive-loss based fault-injection detection and recovery testbed."""

try:
    from ._cfdr import *  # noqa: F401,F403  (installed package layout)
except ImportError:
    from _cfdr import *  # noqa: F401,F403  (build-tree layout)

__version__ = "0.1.0"
