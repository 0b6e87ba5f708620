"""Procedural generator of labeled patches so the pipeline runs without licensed data.

Patches are low-frequency value-noise backgrounds with isotropic Gaussian bumps:
masses are a few large bumps, calcifications many small bright speckles, normals
background only. Default recipes keep the classes separable by mean intensity so
a desk-scale training run can actually learn.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .patchset import PATCH_SIZE, Label, LesionType, PathologyTag, PatchRecord, binarize_label

# Table-1-like class mix used when no counts are given.
DEFAULT_COUNTS = {
    LesionType.MASS: 2354,
    LesionType.CALCIFICATION: 2152,
    LesionType.NORMAL: 6207,
}


@dataclass(frozen=True)
class ClassRecipe:
    """Procedural recipe for one lesion type."""

    lesion_type: LesionType
    blob_count: tuple[int, int] = (0, 0)
    blob_radius: tuple[float, float] = (1.0, 1.0)
    blob_intensity: tuple[float, float] = (0.0, 0.0)
    background_noise_scale: float = 0.25

    def __post_init__(self):
        if self.blob_radius[0] <= 0 or self.blob_radius[1] < self.blob_radius[0]:
            raise ConfigError(f"blob_radius range must be positive and ordered: {self.blob_radius}")
        if self.blob_count[0] < 0 or self.blob_count[1] < self.blob_count[0]:
            raise ConfigError(f"blob_count range must be non-negative and ordered: {self.blob_count}")
        if not 0.0 <= self.background_noise_scale <= 1.0:
            raise ConfigError("background_noise_scale must be in [0, 1]")


DEFAULT_RECIPES = {
    LesionType.MASS: ClassRecipe(
        lesion_type=LesionType.MASS,
        blob_count=(1, 3),
        blob_radius=(18.0, 34.0),
        blob_intensity=(0.35, 0.6),
        background_noise_scale=0.25,
    ),
    LesionType.CALCIFICATION: ClassRecipe(
        lesion_type=LesionType.CALCIFICATION,
        blob_count=(10, 24),
        blob_radius=(1.2, 3.0),
        blob_intensity=(0.5, 0.9),
        background_noise_scale=0.25,
    ),
    LesionType.NORMAL: ClassRecipe(
        lesion_type=LesionType.NORMAL,
        blob_count=(0, 0),
        background_noise_scale=0.25,
    ),
}

_GRID = 9  # coarse value-noise lattice; bilinear upsampled to patch size


def _background(rng: np.random.Generator, scale: float) -> np.ndarray:
    coarse = rng.random((_GRID, _GRID))
    # bilinear upsample of the coarse lattice onto the pixel grid
    t = np.linspace(0.0, _GRID - 1.0, PATCH_SIZE)
    i0 = np.minimum(t.astype(np.int64), _GRID - 2)
    f = t - i0
    rows = coarse[i0, :] * (1.0 - f)[:, None] + coarse[i0 + 1, :] * f[:, None]
    img = rows[:, i0] * (1.0 - f)[None, :] + rows[:, i0 + 1] * f[None, :]
    return 0.15 + scale * img


def _add_blob(img: np.ndarray, cy: float, cx: float, radius: float, amp: float) -> None:
    yy = np.arange(PATCH_SIZE, dtype=np.float64)[:, None] - cy
    xx = np.arange(PATCH_SIZE, dtype=np.float64)[None, :] - cx
    img += amp * np.exp(-(yy * yy + xx * xx) / (2.0 * radius * radius))


def generate_patch(recipe: ClassRecipe, rng_seed: int | tuple) -> PatchRecord:
    """One deterministic patch; same (recipe, seed) always yields the same pixels."""
    rng = np.random.default_rng(rng_seed)
    img = _background(rng, recipe.background_noise_scale)
    n_blobs = int(rng.integers(recipe.blob_count[0], recipe.blob_count[1] + 1))
    margin = recipe.blob_radius[1]
    for _ in range(n_blobs):
        cy = rng.uniform(margin, PATCH_SIZE - margin)
        cx = rng.uniform(margin, PATCH_SIZE - margin)
        radius = rng.uniform(*recipe.blob_radius)
        amp = rng.uniform(*recipe.blob_intensity)
        _add_blob(img, cy, cx, radius, amp)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    label = binarize_label(recipe.lesion_type)
    if label is Label.PATHOLOGICAL:
        tag = PathologyTag(
            rng.choice(
                [
                    PathologyTag.MALIGNANT.value,
                    PathologyTag.BENIGN.value,
                    PathologyTag.BENIGN_WITHOUT_CALLBACK.value,
                    PathologyTag.UNPROVEN.value,
                ]
            )
        )
        birads = int(rng.integers(1, 6))
    else:
        tag = PathologyTag.NONE
        birads = None

    seed_tag = rng_seed if isinstance(rng_seed, int) else "-".join(str(s) for s in rng_seed)
    return PatchRecord(
        id=f"synth-{recipe.lesion_type.value}-{seed_tag}",
        image=img,
        lesion_type=recipe.lesion_type,
        pathology_tag=tag,
        birads=birads,
    )


def generate_dataset(
    counts: dict[LesionType, int] | None = None,
    seed: int = 0,
    recipes: dict[LesionType, ClassRecipe] | None = None,
) -> list[PatchRecord]:
    """Deterministic list of patches with exactly the requested per-class counts."""
    counts = dict(DEFAULT_COUNTS if counts is None else counts)
    recipes = recipes or DEFAULT_RECIPES
    if any(c < 0 for c in counts.values()):
        raise ConfigError(f"negative class count in {counts}")
    records: list[PatchRecord] = []
    index = 0
    for lesion in (LesionType.MASS, LesionType.CALCIFICATION, LesionType.NORMAL):
        for _ in range(counts.get(lesion, 0)):
            rec = generate_patch(recipes[lesion], (seed, index))
            rec.id = f"synth-{index:06d}-{lesion.value}"
            records.append(rec)
            index += 1
    return records
