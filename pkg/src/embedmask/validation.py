"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

import numpy as np

from .datamodel import DatasetSplit, Image, Sample


def check_samples(X, *, allow_empty=False, require_masks=False):
    """Return ``X`` as a list of Samples.

    Accepts a DatasetSplit or any iterable of Samples.
    """
    if isinstance(X, DatasetSplit):
        samples = list(X.samples)
    elif isinstance(X, Sample):
        raise TypeError("expected a collection of Samples, got a single Sample")
    else:
        try:
            samples = list(X)
        except TypeError:
            raise TypeError(f"expected an iterable of Samples, got {type(X).__name__}") from None
    bad = [type(s).__name__ for s in samples if not isinstance(s, Sample)]
    if bad:
        raise TypeError(f"expected Samples, got {bad[0]}")
    if not samples and not allow_empty:
        raise ValueError("no samples given")
    if require_masks and not any(s.target_masks for s in samples):
        raise ValueError("no sample carries a target mask")
    return samples


def check_image(image, expected_shape=None):
    """Coerce an Image or an HxWx3 array in [0, 1] to an Image and check its size."""
    if not isinstance(image, Image):
        arr = np.asarray(image, dtype=np.float64)
        image = Image(arr)
    if expected_shape is not None and (image.height, image.width) != tuple(expected_shape):
        raise ValueError(f"image is {image.height}x{image.width}, model expects {expected_shape[0]}x{expected_shape[1]}")
    return image


def check_queries(X, expected_shape=None):
    """Normalize prediction inputs to a list of (Image, instruction) pairs.

    Accepts Samples, (image, instruction) pairs, or a mix.
    """
    if isinstance(X, DatasetSplit):
        X = X.samples
    out = []
    for item in X:
        if isinstance(item, Sample):
            image, instruction = item.image, item.instruction
        else:
            try:
                image, instruction = item
            except (TypeError, ValueError):
                raise TypeError("each query must be a Sample or an (image, instruction) pair") from None
        if not isinstance(instruction, str) or not instruction.strip():
            raise ValueError("instruction must be a non-empty string")
        out.append((check_image(image, expected_shape), instruction))
    return out

