"""Atrous neighbor-limited CRF refinement for point cloud classification."""

__version__ = "0.1.0"
