"""Deterministic synthetic registration pairs with a known ground-truth field.

Each pair starts from a clean scene (smooth random background, several
spheres and one box, each shape with its own label and intensity). The scene
is the moving image; the fixed image is the scene warped by a smooth random
displacement field, so that field is exactly the transform registering the
moving image onto the fixed one.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from tokenreg.volume import (
    DisplacementField,
    LabelVolume,
    ScalarVolume,
    VolumeGeometry,
    read_volume,
    write_volume,
)
from tokenreg.warp import apply_field, jacobian_det, warp_labels

MANIFEST = "manifest.txt"
ROLES = ("fixed", "moving", "fixedseg", "movingseg", "gtfield")
MAX_RETRIES = 30
BACKGROUND_SIGMA = 4.0
EDGE_SIGMA = 1.0  # soft shape borders; labels stay hard


class RetryExhaustedError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    size: tuple[int, int, int] = (32, 32, 32)
    count: int = 20
    seed: int = 7
    max_disp: float = 4.0
    smooth_sigma: float = 4.0
    n_shapes: int = 4

    def __post_init__(self):
        object.__setattr__(self, "size", tuple(int(s) for s in self.size))
        try:
            VolumeGeometry(self.size).check_divisible(8)
        except ValueError as exc:
            raise ValueError(f"size {self.size}: {exc}") from None
        if self.count < 1:
            raise ValueError("count must be at least 1")
        if self.n_shapes < 1:
            raise ValueError("n_shapes must be at least 1")
        if self.max_disp < 0 or self.max_disp >= min(self.size) / 4:
            raise ValueError(f"max_disp must lie in [0, {min(self.size) / 4}), got {self.max_disp}")
        if self.smooth_sigma <= 0:
            raise ValueError("smooth_sigma must be positive")

    @property
    def geometry(self) -> VolumeGeometry:
        return VolumeGeometry(self.size)


@dataclass
class SynthPair:
    fixed: ScalarVolume
    fixed_seg: LabelVolume
    moving: ScalarVolume
    moving_seg: LabelVolume
    gt_field: DisplacementField


def _scene(cfg: SynthConfig, rng: np.random.Generator):
    shape = cfg.geometry.shape
    background = gaussian_filter(rng.standard_normal(shape), BACKGROUND_SIGMA, mode="wrap", truncate=3.0)
    span = np.ptp(background) or 1.0
    image = 0.05 + 0.25 * (background - background.min()) / span
    labels = np.zeros(shape, np.uint32)

    zz, yy, xx = np.meshgrid(*(np.arange(n) for n in shape), indexing="ij")
    extent = min(cfg.size)
    intensities = np.linspace(0.5, 1.0, cfg.n_shapes)
    for k in range(cfg.n_shapes):
        label = k + 1
        radius = rng.uniform(0.14, 0.22) * extent
        centre = [rng.uniform(m, n - 1 - m) for n in shape for m in [min(radius + 2, (n - 1) / 2)]]
        if k == cfg.n_shapes - 1:
            half = radius * rng.uniform(0.8, 1.0, size=3)
            mask = (
                (np.abs(zz - centre[0]) <= half[0])
                & (np.abs(yy - centre[1]) <= half[1])
                & (np.abs(xx - centre[2]) <= half[2])
            )
        else:
            mask = (zz - centre[0]) ** 2 + (yy - centre[1]) ** 2 + (xx - centre[2]) ** 2 <= radius**2
        image[mask] = intensities[k]
        labels[mask] = label
    if EDGE_SIGMA > 0:
        image = gaussian_filter(image, EDGE_SIGMA, mode="nearest", truncate=3.0)
    return image.astype(np.float32), labels


def smooth_random_field(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Gaussian-filtered white noise per channel, scaled to a max magnitude of ``max_disp``."""
    shape = cfg.geometry.shape
    noise = rng.standard_normal((3,) + shape)
    if cfg.max_disp == 0:
        return np.zeros(shape + (3,), np.float32)
    comps = [gaussian_filter(noise[c], cfg.smooth_sigma, mode="wrap", truncate=3.0) for c in range(3)]
    u = np.stack(comps, axis=-1)
    u *= cfg.max_disp / np.sqrt((u**2).sum(-1)).max()
    return u


def gen_pair(cfg: SynthConfig, index: int) -> SynthPair:
    rng = np.random.default_rng([cfg.seed, index])
    image, labels = _scene(cfg, rng)
    u = smooth_random_field(cfg, rng)
    geometry = cfg.geometry
    for _ in range(MAX_RETRIES):
        field = DisplacementField(u.astype(np.float32), geometry)
        if np.all(jacobian_det(field).data > 0):
            break
        u = u * 0.8
    else:
        raise RetryExhaustedError(f"could not draw a fold-free field for pair {index}")

    moving = ScalarVolume(image, geometry)
    moving_seg = LabelVolume(labels, geometry)
    return SynthPair(
        fixed=apply_field(moving, field),
        fixed_seg=warp_labels(moving_seg, field),
        moving=moving,
        moving_seg=moving_seg,
        gt_field=field,
    )


def pair_filenames(index: int) -> dict[str, str]:
    return {role: f"pair{index}_{role}.vol" for role in ROLES}


def gen_dataset(cfg: SynthConfig, directory) -> list[dict[str, str]]:
    """Write ``cfg.count`` pairs plus ``manifest.txt`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = []
    for index in range(cfg.count):
        pair = gen_pair(cfg, index)
        names = pair_filenames(index)
        write_volume(pair.fixed, directory / names["fixed"])
        write_volume(pair.moving, directory / names["moving"])
        write_volume(pair.fixed_seg, directory / names["fixedseg"])
        write_volume(pair.moving_seg, directory / names["movingseg"])
        write_volume(pair.gt_field, directory / names["gtfield"])
        manifest.append(names)
    with open(directory / MANIFEST, "w") as fh:
        for names in manifest:
            fh.write("\t".join(names[role] for role in ROLES) + "\n")
    return manifest


def read_manifest(directory) -> list[dict[str, str]]:
    path = Path(directory) / MANIFEST
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != len(ROLES):
                raise ValueError(f"{path}:{lineno}: expected {len(ROLES)} names, got {len(parts)}")
            entries.append(dict(zip(ROLES, parts)))
    return entries


def load_dataset(directory) -> list[SynthPair]:
    directory = Path(directory)
    pairs = []
    for names in read_manifest(directory):
        pairs.append(
            SynthPair(
                fixed=read_volume(directory / names["fixed"], ScalarVolume),
                fixed_seg=read_volume(directory / names["fixedseg"], LabelVolume),
                moving=read_volume(directory / names["moving"], ScalarVolume),
                moving_seg=read_volume(directory / names["movingseg"], LabelVolume),
                gt_field=read_volume(directory / names["gtfield"], DisplacementField),
            )
        )
    return pairs


def generate_pairs(cfg: SynthConfig, indices=None) -> list[SynthPair]:
    return [gen_pair(cfg, i) for i in (range(cfg.count) if indices is None else indices)]


__all__ = [
    "MANIFEST",
    "SynthConfig",
    "SynthPair",
    "gen_dataset",
    "gen_pair",
    "generate_pairs",
    "load_dataset",
]
