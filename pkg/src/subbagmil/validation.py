"""Input validation for bag collections (lists of ``N_i x d`` arrays)."""

import numpy as np

from .bagstore import FeatureBag


def check_bag(x, dim=None, name="bag"):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be a 2-D (n_instances, n_features) array, got shape {a.shape}")
    if a.shape[0] < 1:
        raise ValueError(f"{name} has no instances")
    if dim is not None and a.shape[1] != dim:
        raise ValueError(f"{name} has {a.shape[1]} features, expected {dim}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains NaN or infinity")
    return a


def check_bags(X, dim=None):
    """Validate a bag collection and return ``(list of float64 arrays, dim)``.

    ``X`` may be a list of 2-D arrays, a list of :class:`FeatureBag` or a 3-D
    array of equally sized bags.
    """
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = list(X)
    if isinstance(X, np.ndarray) or not hasattr(X, "__len__"):
        raise ValueError("X must be a sequence of (n_instances, n_features) arrays")
    if len(X) == 0:
        raise ValueError("X contains no bags")
    out = []
    for i, x in enumerate(X):
        if isinstance(x, FeatureBag):
            x = x.features
        a = check_bag(x, dim, name=f"bag {i}")
        dim = a.shape[1] if dim is None else dim
        out.append(a)
    return out, dim


def check_bag_labels(X, y):
    bags, dim = check_bags(X)
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != len(bags):
        raise ValueError(f"y must be 1-D with one label per bag ({len(bags)}), got shape {y.shape}")
    return bags, dim, y
