"""Input validation helpers shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np

from .errors import StructuralError
from .pipeline import Sample


def check_sample_sequence(X, image_size: int | None = None) -> list:
    """Validate a training/prediction input as a non-empty Sample sequence.

    All samples must share one template topology; with image_size given,
    every image stack must match that resolution.
    """
    if isinstance(X, Sample):
        X = [X]
    try:
        samples = list(X)
    except TypeError:
        raise StructuralError("X must be a Sample or a sequence of Samples")
    if not samples:
        raise StructuralError("X must contain at least one sample")
    for i, s in enumerate(samples):
        if not isinstance(s, Sample):
            raise StructuralError(f"X[{i}] is {type(s).__name__}, expected Sample")
    first = samples[0]
    for i, s in enumerate(samples[1:], start=1):
        if not np.array_equal(s.body.faces, first.body.faces):
            raise StructuralError(f"X[{i}] does not share the template topology of X[0]")
        if s.stack.values.shape != first.stack.values.shape:
            raise StructuralError(f"X[{i}] image stack shape differs from X[0]")
        if s.stack.plan != first.stack.plan:
            raise StructuralError(f"X[{i}] channel plan differs from X[0]")
    if image_size is not None:
        got = first.stack.values.shape[:2]
        if got != (image_size, image_size):
            raise StructuralError(
                f"image stacks are {got[0]}x{got[1]}, estimator expects {image_size}x{image_size}"
            )
    return samples


def check_positive(name: str, value, minimum=0) -> None:
    if value is None or not np.isfinite(value) or value <= minimum:
        raise StructuralError(f"{name} must be a finite number > {minimum}")
