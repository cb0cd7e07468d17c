"""Input checks shared by the estimator and the command line."""

import numpy as np

from ..exceptions import InputError


def check_images(X, *, name="X", multiple=1, dtype=np.float32):
    """Validate an ``N x 3 x H x W`` image stack (a single ``3 x H x W`` is promoted).

    Parameters
    ----------
    X : array_like
        Images with values in ``[0, 1]``.
    multiple : int
        ``H`` and ``W`` must be divisible by this (the encoder stride).

    Returns
    -------
    ndarray of ``dtype``, shape (N, 3, H, W)
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != 3:
        raise InputError(f"{name}: expected N x 3 x H x W images, got shape {X.shape}")
    if X.shape[0] == 0:
        raise InputError(f"{name}: no images")
    if X.shape[2] % multiple or X.shape[3] % multiple:
        raise InputError(f"{name}: spatial size {X.shape[2:]} not divisible by {multiple}")
    X = X.astype(dtype, copy=False)
    if not np.all(np.isfinite(X)):
        raise InputError(f"{name}: contains NaN or infinity")
    return X


def check_pair(X, y, **kwargs):
    """Validate blurred/sharp stacks of identical shape."""
    X = check_images(X, name="X", **kwargs)
    y = check_images(y, name="y", **kwargs)
    if X.shape != y.shape:
        raise InputError(f"X {X.shape} and y {y.shape} differ in shape")
    return X, y


def to_channel_first(X):
    """``N x 3 x H x W`` -> the internal ``3 x N x H x W`` layout."""
    return np.ascontiguousarray(X.transpose(1, 0, 2, 3))


def to_sample_first(X):
    return np.ascontiguousarray(X.transpose(1, 0, 2, 3))
