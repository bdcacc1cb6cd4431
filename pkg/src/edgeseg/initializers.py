import numpy as np


def fans(shape: tuple[int, ...]) -> tuple[int, int]:
    """Fan-in/fan-out for dense ``(out, in)`` or conv ``(out, in, kh, kw)`` shapes."""
    if len(shape) < 2:
        raise ValueError(f"xavier init needs rank >= 2, got shape {shape}")
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


def xavier_init(shape: tuple[int, ...], rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Glorot-uniform weights on +-sqrt(6 / (fan_in + fan_out))."""
    fan_in, fan_out = fans(shape)
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
