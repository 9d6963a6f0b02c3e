"""Input checks for image batches handed to the estimator API."""
import numpy as np

from .exceptions import InputError, ShapeError
from .train import normalize


def check_images(X, input_size=None):
    """Return ``X`` as a float32 NHWC batch in [0, 1].

    uint8 input is normalized; float input must already lie in [0, 1].
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ShapeError(f"expected an (n, H, W, 3) image batch, got shape {X.shape}")
    if len(X) == 0:
        raise InputError("empty image batch")
    if input_size is not None and X.shape[1:3] != (input_size, input_size):
        raise ShapeError(f"images are {X.shape[1]}x{X.shape[2]}, model expects "
                         f"{input_size}x{input_size}")
    if X.dtype == np.uint8 or np.issubdtype(X.dtype, np.integer):
        return normalize(X)
    X = X.astype(np.float32, copy=False)
    if not np.all(np.isfinite(X)) or X.min() < 0 or X.max() > 1:
        raise InputError("float images must be finite and normalized to [0, 1]")
    return X


def check_uint8_images(X):
    """Return ``X`` as uint8 pixels (floats in [0, 1] are rescaled)."""
    X = np.asarray(X)
    if X.dtype == np.uint8:
        return X
    return np.clip(np.rint(check_images(X) * 255.0), 0, 255).astype(np.uint8)


def check_X_y(X, y):
    X = np.asarray(X)
    y = np.asarray(y)
    if y.ndim != 1:
        raise ShapeError(f"y must be 1-d, got shape {y.shape}")
    if len(X) != len(y):
        raise InputError(f"X has {len(X)} samples but y has {len(y)}")
    return X, y
