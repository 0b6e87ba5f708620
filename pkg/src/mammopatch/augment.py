"""Label-preserving image augmentation: horizontal flip, shift, rotation.

Three operators plus a seeded random policy composing them in the fixed order
flip -> shift -> rotate. Every draw is a pure function of (policy.seed,
draw_index), so augmentation never breaks training reproducibility and a
given sample's augmented form can be replayed in isolation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .engine import kernels
from .errors import ConfigError, InputError


@dataclass(frozen=True)
class AugmentPolicy:
    """Ranges for the three operators plus the seed of the draw stream.

    ``shift_fraction_max`` is a fraction of the image dimension, applied
    independently per axis; ``rotate_degrees_max`` bounds the rotation angle
    symmetrically. Zero ranges with flipping disabled make the policy the
    identity.
    """

    hflip_enabled: bool = True
    shift_fraction_max: float = 0.2
    rotate_degrees_max: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.shift_fraction_max <= 1.0:
            raise ConfigError(
                f"shift_fraction_max must be in [0, 1], got {self.shift_fraction_max}"
            )
        if not 0.0 <= self.rotate_degrees_max <= 180.0:
            raise ConfigError(
                f"rotate_degrees_max must be in [0, 180], got {self.rotate_degrees_max}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "AugmentPolicy":
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown augment policy field(s): {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class AugmentDraw:
    """The sampled parameters of one augmentation application."""

    flip: bool
    dx_fraction: float
    dy_fraction: float
    degrees: float


def _check_2d(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 2:
        raise InputError(f"expected a 2-D image, got shape {image.shape}")
    return image


def hflip(image: np.ndarray) -> np.ndarray:
    """Mirror along the vertical axis: column j maps to column width-1-j."""
    image = _check_2d(image)
    return image[:, ::-1].copy()


def shift(
    image: np.ndarray,
    dx_fraction: float,
    dy_fraction: float,
    max_fraction: float = 1.0,
) -> np.ndarray:
    """Translate by round(fraction * dimension) pixels, zero-filling vacated pixels.

    Positive dx moves content toward larger column indices (right), positive
    dy toward larger row indices (down). Fractions beyond ``max_fraction`` in
    magnitude are rejected.
    """
    image = _check_2d(image)
    if abs(dx_fraction) > max_fraction or abs(dy_fraction) > max_fraction:
        raise InputError(
            f"shift fractions ({dx_fraction}, {dy_fraction}) exceed bound {max_fraction}"
        )
    h, w = image.shape
    px = int(np.rint(dx_fraction * w))
    py = int(np.rint(dy_fraction * h))
    out = np.zeros_like(image)
    if abs(px) < w and abs(py) < h:
        out[max(py, 0):h + min(py, 0), max(px, 0):w + min(px, 0)] = image[
            max(-py, 0):h - max(py, 0), max(-px, 0):w - max(px, 0)
        ]
    return out


def rotate(image: np.ndarray, degrees: float, max_degrees: float = 180.0) -> np.ndarray:
    """Rotate about the image center with bilinear interpolation.

    Output has the same shape; source pixels falling outside the image read as
    zero, and the result is clipped to [0, 1] to absorb interpolation rounding.
    """
    image = _check_2d(image)
    if abs(degrees) > max_degrees:
        raise InputError(f"rotation angle {degrees} exceeds bound {max_degrees}")
    if degrees == 0.0:
        return image.copy()
    out = kernels.rotate_bilinear(image, float(degrees))
    return np.clip(out, 0.0, 1.0, out=out)


def draw_params(policy: AugmentPolicy, draw_index: int) -> AugmentDraw:
    """Sample one (flip, dx, dy, angle) tuple, deterministic per (seed, draw_index).

    All four values are always drawn in a fixed layout, so disabling one
    operator never changes what the others receive.
    """
    rng = np.random.default_rng([policy.seed, int(draw_index)])
    flip_u = rng.random()
    dx = rng.uniform(-policy.shift_fraction_max, policy.shift_fraction_max)
    dy = rng.uniform(-policy.shift_fraction_max, policy.shift_fraction_max)
    degrees = rng.uniform(-policy.rotate_degrees_max, policy.rotate_degrees_max)
    return AugmentDraw(
        flip=bool(policy.hflip_enabled and flip_u < 0.5),
        dx_fraction=float(dx),
        dy_fraction=float(dy),
        degrees=float(degrees),
    )


def random_augment(image: np.ndarray, policy: AugmentPolicy, draw_index: int) -> np.ndarray:
    """Apply a drawn flip (p = 0.5), shift, and rotation, in that order.

    Pure in (image, policy, draw_index); the label of the underlying record is
    untouched by construction since only pixel geometry changes.
    """
    image = _check_2d(image)
    draw = draw_params(policy, draw_index)
    out = hflip(image) if draw.flip else image
    out = shift(out, draw.dx_fraction, draw.dy_fraction, policy.shift_fraction_max)
    out = rotate(out, draw.degrees, policy.rotate_degrees_max)
    return out
