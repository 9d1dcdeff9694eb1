"""Continuous Wasserstein-2 barycenters from pairs of input-convex potentials."""

__version__ = "0.1.0"

__all__ = ["autodiff", "cli", "distributions", "groundtruth", "icnn", "metrics", "optim", "solver"]
