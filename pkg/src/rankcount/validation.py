"""Input validation helpers shared by the estimators and the functional API."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .synth import RenderedImage


def as_image_array(image) -> np.ndarray:
    """A single image as an HxWx3 float32 array in [0, 1]."""
    px = image.pixels if isinstance(image, RenderedImage) else np.asarray(image)
    if px.ndim != 3 or px.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {px.shape}")
    return np.asarray(px, dtype=np.float32)


def check_images(X, input_size: Optional[Sequence[int]] = None, resize: bool = False) -> torch.Tensor:
    """Stack images into an NCHW float32 tensor.

    ``X`` may be a sequence of images or an (N, H, W, 3) array. When
    ``input_size`` is given, the spatial shape must match exactly unless
    ``resize`` is set, in which case images are resized bilinearly.
    """
    if isinstance(X, torch.Tensor):
        x = X.float()
    else:
        if isinstance(X, np.ndarray) and X.ndim == 4:
            arr = np.asarray(X, dtype=np.float32)
        else:
            items = [as_image_array(im) for im in X]
            if not items:
                raise ValueError("no images given")
            shapes = {im.shape for im in items}
            if len(shapes) > 1 and not resize:
                raise ValueError(f"images have mixed shapes {sorted(shapes)}")
            if len(shapes) > 1:
                return torch.cat([check_images([im], input_size, resize) for im in items])
            arr = np.stack(items)
        if arr.shape[-1] != 3:
            raise ValueError(f"expected (N, H, W, 3) images, got shape {arr.shape}")
        x = torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2)
    if not torch.isfinite(x).all():
        raise ValueError("images contain non-finite values")
    if input_size is not None and tuple(x.shape[-2:]) != tuple(input_size):
        if not resize:
            raise ValueError(
                f"image shape {tuple(x.shape[-2:])} does not match model input {tuple(input_size)}"
            )
        x = resize_tensor(x, input_size)
    return x


def resize_tensor(x: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
    """Bilinear resize of an NCHW batch; values stay in [0, 1]."""
    size = tuple(int(v) for v in size)
    if tuple(x.shape[-2:]) == size:
        return x
    antialias = x.shape[-2] > size[0] or x.shape[-1] > size[1]
    out = F.interpolate(x, size=size, mode="bilinear", align_corners=False, antialias=antialias)
    return out.clamp_(0.0, 1.0)


def check_pairs(X):
    """Split ranking pairs into (real, synthetic) image collections.

    Accepts a sequence of ``RankingPair`` or an (N, 2, H, W, 3) array.
    """
    if isinstance(X, np.ndarray):
        if X.ndim != 5 or X.shape[1] != 2:
            raise ValueError(f"expected (N, 2, H, W, 3) pairs, got shape {X.shape}")
        return X[:, 0], X[:, 1]
    pairs = list(X)
    return [p.real for p in pairs], [p.synthetic for p in pairs]


def check_finite(value, name="value") -> float:
    v = float(value)
    if not np.isfinite(v):
        raise ValueError(f"{name} must be finite, got {v}")
    return v
