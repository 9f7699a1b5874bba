"""Spatial transformer warping, field composition, rescaling and Jacobians.

A displacement field ``u`` maps voxel ``x`` to ``x + u(x)``; warping an
image ``I`` by ``u`` yields ``(I o u)(x) = I(x + u(x))``. Out-of-grid sample
points are clamped to the edge.

The ``*_tensor`` functions work on torch tensors shaped ``(N, C, nz, ny, nx)``
(fields: ``C = 3`` in ``(ux, uy, uz)`` order) and are differentiable. The
plain functions wrap them for :mod:`tokenreg.volume` types.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from tokenreg.diffops import gather_trilinear
from tokenreg.volume import (
    DisplacementField,
    GeometryMismatchError,
    LabelVolume,
    ScalarVolume,
    VolumeError,
)


def identity_grid(shape, dtype=torch.float32) -> torch.Tensor:
    """Voxel coordinates ``(1, 3, nz, ny, nx)`` in ``(x, y, z)`` channel order."""
    nz, ny, nx = shape
    z, y, x = torch.meshgrid(
        torch.arange(nz, dtype=dtype),
        torch.arange(ny, dtype=dtype),
        torch.arange(nx, dtype=dtype),
        indexing="ij",
    )
    return torch.stack((x, y, z))[None]


def warp_tensor(vol: torch.Tensor, disp: torch.Tensor) -> torch.Tensor:
    if vol.shape[2:] != disp.shape[2:] or disp.shape[1] != 3:
        raise GeometryMismatchError(
            f"cannot warp volume {tuple(vol.shape)} with field {tuple(disp.shape)}"
        )
    grid = identity_grid(vol.shape[2:], dtype=disp.dtype)
    return gather_trilinear(vol, grid + disp)


def compose_tensor(first: torch.Tensor, second: torch.Tensor) -> torch.Tensor:
    """Field ``w`` with ``I o w == (I o first) o second``."""
    return second + warp_tensor(first, second)


def upscale_tensor(disp: torch.Tensor) -> torch.Tensor:
    """Double the grid (trilinear, voxel-centre aligned) and the displacement values."""
    return 2.0 * F.interpolate(disp, scale_factor=2, mode="trilinear", align_corners=False)


def downscale_tensor(vol: torch.Tensor) -> torch.Tensor:
    """Halve the grid; for a factor of two, centre-aligned trilinear is a 2x2x2 mean."""
    return F.avg_pool3d(vol, 2)


def field_to_tensor(phi: DisplacementField) -> torch.Tensor:
    return torch.from_numpy(np.array(phi.data)).permute(3, 0, 1, 2)[None].contiguous()


def tensor_to_field(t: torch.Tensor) -> DisplacementField:
    return DisplacementField(t.detach()[0].permute(1, 2, 3, 0).cpu().numpy())


def volume_to_tensor(v: ScalarVolume) -> torch.Tensor:
    return torch.from_numpy(np.array(v.data, dtype=np.float32))[None, None]


def _check_geometry(a, b) -> None:
    if a.geometry != b.geometry:
        raise GeometryMismatchError(f"geometry mismatch: {a.geometry.dims} vs {b.geometry.dims}")


def apply_field(v, phi):
    """Warp ``v`` by ``phi`` with clamped trilinear interpolation.

    Accepts volume objects or tensors; tensors stay on the tape so the result
    is differentiable in both the intensities and the field.
    """
    if isinstance(v, torch.Tensor):
        disp = phi if isinstance(phi, torch.Tensor) else field_to_tensor(phi)
        return warp_tensor(v, disp)
    _check_geometry(v, phi)
    with torch.no_grad():
        out = warp_tensor(volume_to_tensor(v), field_to_tensor(phi))
    return ScalarVolume(out[0, 0].numpy(), v.geometry)


def warp_labels(labels: LabelVolume, phi: DisplacementField) -> LabelVolume:
    """Nearest-neighbour label lookup at ``x + u(x)``, clamped to the grid."""
    _check_geometry(labels, phi)
    nz, ny, nx = labels.geometry.shape
    z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    u = phi.data.astype(np.float64)
    xi = np.clip(np.floor(x + u[..., 0] + 0.5), 0, nx - 1).astype(np.intp)
    yi = np.clip(np.floor(y + u[..., 1] + 0.5), 0, ny - 1).astype(np.intp)
    zi = np.clip(np.floor(z + u[..., 2] + 0.5), 0, nz - 1).astype(np.intp)
    return LabelVolume(labels.data[zi, yi, xi], labels.geometry)


def compose(phi_first: DisplacementField, phi_second: DisplacementField) -> DisplacementField:
    """``u_out(x) = u_second(x) + u_first(x + u_second(x))``.

    Warping by the result equals warping by ``phi_first`` and then by
    ``phi_second``.
    """
    _check_geometry(phi_first, phi_second)
    with torch.no_grad():
        out = compose_tensor(field_to_tensor(phi_first), field_to_tensor(phi_second))
    return tensor_to_field(out)


def upscale_field(phi: DisplacementField, factor: int = 2) -> DisplacementField:
    if factor != 2:
        raise ValueError("only factor 2 is supported")
    with torch.no_grad():
        return tensor_to_field(upscale_tensor(field_to_tensor(phi)))


def downscale_field(phi: DisplacementField) -> DisplacementField:
    """Inverse companion of :func:`upscale_field`: 2x2x2 mean, values halved."""
    if any(d % 2 for d in phi.geometry.dims):
        raise VolumeError(f"dims {phi.geometry.dims} are not even")
    with torch.no_grad():
        return tensor_to_field(0.5 * downscale_tensor(field_to_tensor(phi)))


def jacobian_det(phi: DisplacementField) -> ScalarVolume:
    """Per-voxel ``det(I + grad u)``.

    Central differences in the interior, one-sided differences on the faces.
    """
    if min(phi.geometry.dims) < 3:
        raise VolumeError(f"jacobian_det needs at least 3 voxels per axis, got {phi.geometry.dims}")
    u = phi.data.astype(np.float64)
    # array axes are (z, y, x); reverse so column j holds d/dx_j for x, y, z
    jac = np.empty(phi.geometry.shape + (3, 3))
    for i in range(3):
        dz, dy, dx = np.gradient(u[..., i], edge_order=1)
        jac[..., i, 0] = dx
        jac[..., i, 1] = dy
        jac[..., i, 2] = dz
    jac += np.eye(3)
    return ScalarVolume(np.linalg.det(jac).astype(np.float32), phi.geometry)

