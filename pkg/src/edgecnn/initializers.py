import numpy as np


def he_init(shape, fan_in, rng, dtype=np.float32):
    """Draw weights from N(0, sqrt(2 / fan_in))."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def zeros_bias(n, dtype=np.float32):
    return np.zeros(n, dtype=dtype)
