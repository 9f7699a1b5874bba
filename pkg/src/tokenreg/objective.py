"""Unsupervised registration loss: intensity MSE plus diffusion smoothness."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch

from tokenreg import diffops
from tokenreg.warp import warp_tensor

KNEE_LAMBDA = 0.04
BRAIN_LAMBDA = 0.02


@dataclass(frozen=True)
class LossConfig:
    lam: float = KNEE_LAMBDA
    similarity: str = "mse"
    regularizer: str = "diffusion"

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lam must be non-negative, got {self.lam}")
        if self.similarity != "mse":
            raise ValueError(f"unsupported similarity {self.similarity!r}")
        if self.regularizer != "diffusion":
            raise ValueError(f"unsupported regularizer {self.regularizer!r}")


class LossTerms(NamedTuple):
    total: torch.Tensor
    sim: torch.Tensor
    reg: torch.Tensor


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise diffops.ShapeError(f"mse: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return diffops.mean(diffops.square(a - b))


def diffusion_regularizer(disp: torch.Tensor) -> torch.Tensor:
    """Mean squared forward difference of a ``(N, 3, nz, ny, nx)`` field.

    Each axis contributes the mean over channels and difference positions;
    the three axis means are averaged.
    """
    if disp.dim() != 5 or min(disp.shape[2:]) < 2:
        raise diffops.ShapeError(f"diffusion_regularizer needs >= 2 voxels per axis, got {tuple(disp.shape)}")
    dz = disp[:, :, 1:] - disp[:, :, :-1]
    dy = disp[:, :, :, 1:] - disp[:, :, :, :-1]
    dx = disp[..., 1:] - disp[..., :-1]
    return (diffops.mean(diffops.square(dx)) + diffops.mean(diffops.square(dy)) + diffops.mean(diffops.square(dz))) / 3.0


def loss_terms(moving: torch.Tensor, fixed: torch.Tensor, disp: torch.Tensor, lam: float) -> LossTerms:
    sim = mse(warp_tensor(moving, disp), fixed)
    reg = diffusion_regularizer(disp)
    return LossTerms(sim + lam * reg, sim, reg)


def total_loss(moving: torch.Tensor, fixed: torch.Tensor, disp: torch.Tensor, cfg: LossConfig | float) -> torch.Tensor:
    lam = cfg.lam if isinstance(cfg, LossConfig) else float(cfg)
    return loss_terms(moving, fixed, disp, lam).total
