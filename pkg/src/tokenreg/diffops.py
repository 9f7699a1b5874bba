"""Differentiable primitives used by the registration network.

Values are ``torch.Tensor`` objects; torch's tape records the graph and runs
the reverse pass. Every primitive here is the exact set the model is built
from, and each one is checked against central finite differences by
:func:`gradcheck` (64-bit, independent of the tape).

Volume tensors use the layout ``(batch, channels, nz, ny, nx)``. Point
coordinates for :func:`gather_trilinear` carry channel order ``(x, y, z)``.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

DiffValue = torch.Tensor


class ShapeError(ValueError):
    pass


class BackwardError(RuntimeError):
    pass


def _check_same_shape(a: DiffValue, b: DiffValue, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _check_axis(x: DiffValue, axis: int, op: str) -> int:
    if not -x.dim() <= axis < x.dim():
        raise ShapeError(f"{op}: invalid axis {axis} for rank {x.dim()}")
    return axis % x.dim()


def add(a: DiffValue, b: DiffValue) -> DiffValue:
    _check_same_shape(a, b, "add")
    return a + b


def mul(a: DiffValue, b: DiffValue) -> DiffValue:
    _check_same_shape(a, b, "mul")
    return a * b


def matmul(a: DiffValue, b: DiffValue) -> DiffValue:
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def linear(x: DiffValue, weight: DiffValue, bias: DiffValue | None = None) -> DiffValue:
    """``x @ weight.T + bias`` with ``weight`` shaped ``(out, in)``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    return F.linear(x, weight, bias)


def conv3d(x: DiffValue, weight: DiffValue, bias: DiffValue | None = None, stride: int = 1) -> DiffValue:
    """Kernel-3, padding-1 convolution with stride 1 or 2."""
    if stride not in (1, 2):
        raise ShapeError(f"conv3d: stride must be 1 or 2, got {stride}")
    if weight.dim() != 5 or tuple(weight.shape[2:]) != (3, 3, 3):
        raise ShapeError(f"conv3d: kernel must be 3x3x3, got {tuple(weight.shape)}")
    if x.dim() != 5 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv3d: input {tuple(x.shape)} incompatible with weight {tuple(weight.shape)}")
    return F.conv3d(x, weight, bias, stride=stride, padding=1)


def transposed_conv3d(x: DiffValue, weight: DiffValue, bias: DiffValue | None = None) -> DiffValue:
    """Kernel-2, stride-2 transposed convolution; ``weight`` is ``(in, out, 2, 2, 2)``."""
    if weight.dim() != 5 or tuple(weight.shape[2:]) != (2, 2, 2):
        raise ShapeError(f"transposed_conv3d: kernel must be 2x2x2, got {tuple(weight.shape)}")
    if x.dim() != 5 or x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"transposed_conv3d: input {tuple(x.shape)} incompatible with weight {tuple(weight.shape)}"
        )
    return F.conv_transpose3d(x, weight, bias, stride=2)


def leaky_relu(x: DiffValue, slope: float = 0.2) -> DiffValue:
    return F.leaky_relu(x, slope)


def silu(x: DiffValue) -> DiffValue:
    return F.silu(x)


def gelu(x: DiffValue) -> DiffValue:
    return F.gelu(x)


def softmax(x: DiffValue, axis: int = -1) -> DiffValue:
    return torch.softmax(x, dim=_check_axis(x, axis, "softmax"))


def rms_norm(x: DiffValue, weight: DiffValue | None = None, eps: float = 1e-5) -> DiffValue:
    """Scale the last axis to unit root-mean-square, then by ``weight``."""
    out = x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps)
    if weight is not None:
        if weight.shape[-1] != x.shape[-1]:
            raise ShapeError(f"rms_norm: weight width {weight.shape[-1]} != {x.shape[-1]}")
        out = out * weight
    return out


def rotary_tables(positions: torch.Tensor, head_dim: int, base: float = 10000.0, dtype=torch.float32):
    if head_dim % 2:
        raise ShapeError(f"rotary_embed: head_dim must be even, got {head_dim}")
    inv_freq = 1.0 / base ** (torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    angles = positions.to(torch.float64)[:, None] * inv_freq[None, :]
    return torch.cos(angles).to(dtype), torch.sin(angles).to(dtype)


def rotary_embed(x: DiffValue, positions: torch.Tensor, base: float = 10000.0) -> DiffValue:
    """Rotate consecutive feature pairs of ``x[..., T, head_dim]`` by position-dependent angles."""
    head_dim = x.shape[-1]
    if positions.shape[0] != x.shape[-2]:
        raise ShapeError(f"rotary_embed: {positions.shape[0]} positions for {x.shape[-2]} tokens")
    cos, sin = rotary_tables(positions, head_dim, base, x.dtype)
    pairs = x.reshape(*x.shape[:-1], head_dim // 2, 2)
    even, odd = pairs[..., 0], pairs[..., 1]
    rotated = torch.stack((even * cos - odd * sin, even * sin + odd * cos), dim=-1)
    return rotated.reshape(x.shape)


def concat(values: list[DiffValue], axis: int) -> DiffValue:
    if not values:
        raise ShapeError("concat: nothing to concatenate")
    axis = _check_axis(values[0], axis, "concat")
    ref = values[0].shape
    for v in values[1:]:
        if v.dim() != len(ref) or any(v.shape[d] != ref[d] for d in range(len(ref)) if d != axis):
            raise ShapeError(f"concat: {tuple(v.shape)} incompatible with {tuple(ref)} on axis {axis}")
    return torch.cat(values, dim=axis)


def reshape(x: DiffValue, shape) -> DiffValue:
    shape = tuple(shape)
    try:
        return x.reshape(shape)
    except RuntimeError as exc:
        raise ShapeError(f"reshape: cannot view {tuple(x.shape)} as {shape}") from exc


def mean(x: DiffValue) -> DiffValue:
    return x.mean()


def sum(x: DiffValue) -> DiffValue:  # noqa: A001 - mirrors the primitive name
    return x.sum()


def square(x: DiffValue) -> DiffValue:
    return x * x


def gather_trilinear(vol: DiffValue, coords: DiffValue) -> DiffValue:
    """Sample ``vol`` at voxel coordinates with clamp-to-edge trilinear weights.

    ``vol`` is ``(N, C, D, H, W)``; ``coords`` is ``(N, 3, ...)`` with channel
    order ``(x, y, z)`` in voxel units. Returns ``(N, C, ...)``. Coordinates
    are clipped into ``[0, n - 1]`` per axis before interpolation.
    """
    if vol.dim() != 5 or coords.dim() < 3 or coords.shape[1] != 3 or coords.shape[0] != vol.shape[0]:
        raise ShapeError(f"gather_trilinear: bad shapes {tuple(vol.shape)}, {tuple(coords.shape)}")
    n, c, d, h, w = vol.shape
    out_shape = coords.shape[2:]
    pts = coords.reshape(n, 3, -1)

    def split(axis_coord, size):
        t = axis_coord.clamp(0, size - 1)
        lo = t.detach().floor().clamp(max=max(size - 2, 0))
        frac = t - lo
        # non-finite coordinates index voxel 0 but keep a NaN weight, so NaN propagates
        lo = torch.nan_to_num(lo, nan=0.0).long()
        hi = (lo + 1).clamp(max=size - 1)
        return lo, hi, frac

    x0, x1, fx = split(pts[:, 0], w)
    y0, y1, fy = split(pts[:, 1], h)
    z0, z1, fz = split(pts[:, 2], d)
    flat = vol.reshape(n, c, d * h * w)

    def corner(zi, yi, xi):
        idx = (zi * h + yi) * w + xi
        return torch.gather(flat, 2, idx[:, None, :].expand(n, c, idx.shape[-1]))

    gx, gy, gz = 1 - fx, 1 - fy, 1 - fz
    fx, fy, fz, gx, gy, gz = (t[:, None, :] for t in (fx, fy, fz, gx, gy, gz))
    out = (
        corner(z0, y0, x0) * (gz * gy * gx)
        + corner(z0, y0, x1) * (gz * gy * fx)
        + corner(z0, y1, x0) * (gz * fy * gx)
        + corner(z0, y1, x1) * (gz * fy * fx)
        + corner(z1, y0, x0) * (fz * gy * gx)
        + corner(z1, y0, x1) * (fz * gy * fx)
        + corner(z1, y1, x0) * (fz * fy * gx)
        + corner(z1, y1, x1) * (fz * fy * fx)
    )
    return out.reshape(n, c, *out_shape)


def backward(loss: DiffValue) -> None:
    """Run the reverse pass from a scalar ``loss``.

    Leaves with ``requires_grad`` receive ``d loss / d leaf`` in ``.grad``;
    frozen leaves keep ``.grad is None``. A loss can be back-propagated once.
    """
    if loss.numel() != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if getattr(loss, "_backward_done", False):
        raise BackwardError("backward already called on this loss; rebuild the graph first")
    loss.backward()
    loss._backward_done = True


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def numeric_gradient(fn: Callable[..., DiffValue], inputs: list[torch.Tensor], cotangent, eps: float):
    """Central differences of ``sum(fn(*inputs) * cotangent)`` for each input element."""
    grads = []
    with torch.no_grad():
        for x in inputs:
            g = torch.zeros_like(x)
            flat, gflat = x.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                plus = (fn(*inputs) * cotangent).sum().item()
                flat[i] = orig - eps
                minus = (fn(*inputs) * cotangent).sum().item()
                flat[i] = orig
                gflat[i] = (plus - minus) / (2 * eps)
            grads.append(g)
    return grads


def analytic_gradient(fn: Callable[..., DiffValue], inputs: list[torch.Tensor], cotangent):
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*leaves)
    return list(torch.autograd.grad((out * cotangent).sum(), leaves))


def relative_error(analytic: list[torch.Tensor], numeric: list[torch.Tensor]) -> float:
    """Max-norm relative error, pooled over all inputs."""
    diff = max(float((a - n).abs().max()) for a, n in zip(analytic, numeric))
    scale = max(float(n.abs().max()) for n in numeric)
    return diff / max(scale, 1e-12)


def check_gradients(fn, inputs, eps: float = 1e-5, seed: int = 0) -> float:
    """Relative error between tape gradients and central differences, in float64."""
    inputs = [x.detach().to(torch.float64).clone() for x in inputs]
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        probe = fn(*inputs)
    cotangent = torch.randn(probe.shape, generator=gen, dtype=torch.float64)
    return relative_error(
        analytic_gradient(fn, inputs, cotangent), numeric_gradient(fn, inputs, cotangent, eps)
    )


def _rand(rng: np.random.Generator, *shape, low=-1.0, high=1.0) -> torch.Tensor:
    return torch.from_numpy(rng.uniform(low, high, size=shape))


def _away_from_zero(rng, *shape, gap=0.05):
    v = rng.uniform(gap, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return torch.from_numpy(v)


def _spatial(rng, lo=2, hi=6):
    return tuple(int(s) for s in rng.integers(lo, hi + 1, size=3))


def _case_conv(rng, stride):
    cin, cout = (int(v) for v in rng.integers(1, 3, size=2))
    d, h, w = _spatial(rng)
    return (
        lambda x, k, b: conv3d(x, k, b, stride=stride),
        [_rand(rng, 1, cin, d, h, w), _rand(rng, cout, cin, 3, 3, 3), _rand(rng, cout)],
    )


def _case_tconv(rng):
    cin, cout = (int(v) for v in rng.integers(1, 3, size=2))
    d, h, w = _spatial(rng, 1, 3)
    return transposed_conv3d, [_rand(rng, 1, cin, d, h, w), _rand(rng, cin, cout, 2, 2, 2), _rand(rng, cout)]


def _case_gather(rng):
    d, h, w = _spatial(rng)
    c = int(rng.integers(1, 3))
    m = int(rng.integers(3, 9))
    # integer part plus a fraction kept clear of lattice kinks
    pts = []
    for size in (w, h, d):
        base = rng.integers(0, max(size - 1, 1), size=m)
        frac = rng.uniform(0.1, 0.9, size=m) if size > 1 else np.zeros(m)
        pts.append(base + frac)
    coords = torch.from_numpy(np.stack(pts)[None])
    vol = _rand(rng, 1, c, d, h, w)
    if min(d, h, w) == 1:
        # singleton axes sit on the clamp boundary; only check the volume input there
        return (lambda v: gather_trilinear(v, coords)), [vol]
    return gather_trilinear, [vol, coords]


def _case_rotary(rng):
    t = int(rng.integers(2, 7))
    hd = 2 * int(rng.integers(1, 4))
    pos = torch.arange(t)
    return (lambda x: rotary_embed(x, pos)), [_rand(rng, 2, t, hd)]


def _case_matmul(rng):
    n, k, m = (int(v) for v in rng.integers(1, 6, size=3))
    return matmul, [_rand(rng, n, k), _rand(rng, k, m)]


def _case_linear(rng):
    n, i, o = (int(v) for v in rng.integers(1, 6, size=3))
    return linear, [_rand(rng, n, i), _rand(rng, o, i), _rand(rng, o)]


def _vec_shape(rng):
    return tuple(int(v) for v in rng.integers(1, 6, size=int(rng.integers(1, 4))))


def _case_binary(op):
    def build(rng):
        shape = _vec_shape(rng)
        return op, [_rand(rng, *shape), _rand(rng, *shape)]

    return build


def _case_unary(op, positive_gap=False):
    def build(rng):
        shape = _vec_shape(rng)
        x = _away_from_zero(rng, *shape) if positive_gap else _rand(rng, *shape)
        return op, [x]

    return build


def _case_softmax(rng):
    shape = _vec_shape(rng)
    axis = int(rng.integers(0, len(shape)))
    return (lambda x: softmax(x, axis)), [_rand(rng, *shape, low=-2, high=2)]


def _case_rms(rng):
    n, d = (int(v) for v in rng.integers(2, 7, size=2))
    return (lambda x, g: rms_norm(x, g, eps=1e-5)), [_rand(rng, n, d), _rand(rng, d)]


def _case_concat(rng):
    a, b, rest = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    return (lambda x, y: concat([x, y], axis=1)), [_rand(rng, rest, a), _rand(rng, rest, b)]


def _case_reshape(rng):
    a, b = (int(v) for v in rng.integers(1, 5, size=2))
    return (lambda x: reshape(x, (b, a))), [_rand(rng, a, b)]


GRADCHECK_CASES: dict[str, Callable] = {
    "add": _case_binary(add),
    "mul": _case_binary(mul),
    "matmul": _case_matmul,
    "linear": _case_linear,
    "conv3d_s1": lambda rng: _case_conv(rng, 1),
    "conv3d_s2": lambda rng: _case_conv(rng, 2),
    "transposed_conv3d": _case_tconv,
    "leaky_relu": _case_unary(leaky_relu, positive_gap=True),
    "silu": _case_unary(silu),
    "gelu": _case_unary(gelu),
    "softmax": _case_softmax,
    "rms_norm": _case_rms,
    "rotary_embed": _case_rotary,
    "concat": _case_concat,
    "reshape": _case_reshape,
    "mean": _case_unary(mean),
    "sum": _case_unary(sum),
    "square": _case_unary(square),
    "gather_trilinear": _case_gather,
}


@dataclass
class GradcheckReport:
    eps: float
    tol: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def failing(self) -> list[str]:
        return [name for name, err in self.errors.items() if not err < self.tol]

    @property
    def passed(self) -> bool:
        return not self.failing

    def format(self) -> str:
        lines = [f"gradcheck eps={self.eps:g} tol={self.tol:g}"]
        for name, err in self.errors.items():
            status = "ok" if err < self.tol else "FAIL"
            lines.append(f"{name:<20s} max_rel_err={err:.3e} {status}")
        return "\n".join(lines)


def gradcheck(
    ops: list[str] | None = None,
    seed: int = 0,
    eps: float = 1e-5,
    tol: float = 1e-4,
    trials: int = 20,
    extra: dict[str, Callable] | None = None,
) -> GradcheckReport:
    """Compare tape gradients with central differences for each primitive.

    Each op is exercised on ``trials`` randomized shapes derived from
    ``seed``. Failures are reported, never raised.
    """
    if eps <= 0 or tol <= 0:
        raise ValueError("eps and tol must be positive")
    cases = dict(GRADCHECK_CASES)
    cases.update(extra or {})
    report = GradcheckReport(eps=eps, tol=tol)
    for name in ops or list(cases):
        worst = 0.0
        for trial in range(trials):
            rng = np.random.default_rng([seed, trial, zlib.crc32(name.encode())])
            fn, inputs = cases[name](rng)
            worst = max(worst, check_gradients(fn, inputs, eps=eps, seed=seed * 1000 + trial))
        report.errors[name] = worst
    return report
