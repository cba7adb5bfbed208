"""Input validation helpers shared by the estimator, the model and the CLI."""

import numpy as np
import torch


class ConfigError(ValueError):
    """Invalid model or run configuration."""


def check_images(X, *, name="X", multiple_of=1):
    """Validate a batch of RGB images and return it as ``float32 (N, H, W, 3)``.

    A single ``(H, W, 3)`` image is promoted to a batch of one.
    """
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"{name} must have shape (N, H, W, 3), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    h, w = arr.shape[1:3]
    if h % multiple_of or w % multiple_of:
        raise ConfigError(f"{name} spatial size {h}x{w} must be divisible by {multiple_of}")
    return arr


def check_pair(X, y):
    X = check_images(X)
    y = check_images(y, name="y")
    if X.shape != y.shape:
        raise ValueError(f"X and y shapes differ: {X.shape} vs {y.shape}")
    return X, y


def to_tensor(images, dtype=torch.float32):
    """``(N, H, W, 3)`` array -> ``(N, 3, H, W)`` tensor."""
    return torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).to(dtype)


def to_numpy(tensor):
    """``(N, 3, H, W)`` tensor -> ``(N, H, W, 3)`` float32 array."""
    return tensor.detach().permute(0, 2, 3, 1).to(torch.float32).cpu().numpy()
