"""Training loop, cascade schedules and CKPT1 checkpoints.

Checkpoint layout::

    b"CKPT1" | u64 little-endian manifest length | UTF-8 JSON manifest | blobs

The manifest lists every tensor as ``{name, shape, dtype, offset, nbytes}``
(offsets relative to the first blob byte), the full model config, the
trained cascade steps and, when present, the optimizer state needed to
resume a run. Blobs are raw little-endian f32.
"""

from __future__ import annotations

import contextlib
import json
import logging
import math
import re
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from tokenreg.model import ModelConfig, RegModel, apply_phase, image_pyramid, parameter_groups, phase_step
from tokenreg.objective import loss_terms
from tokenreg.warp import volume_to_tensor

log = logging.getLogger(__name__)

MAGIC = b"CKPT1"
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
_PHASE = re.compile(r"single|joint|cascade_step_[1-9][0-9]*")


class TrainingError(RuntimeError):
    pass


class NonFiniteLossError(TrainingError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


class PhaseOrderError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    steps: int = 500
    seed: int = 0
    phase: str = "single"
    lam: float = 0.04
    log_every: int = 50
    deterministic: bool = False
    augment: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.lam < 0:
            raise ValueError(f"lam must be non-negative, got {self.lam}")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if not _PHASE.fullmatch(self.phase):
            raise ValueError(f"phase must be single, joint or cascade_step_<k>, got {self.phase!r}")


@dataclass(frozen=True)
class TraceRow:
    step: int
    loss: float
    sim: float
    reg: float

    def format(self) -> str:
        return f"{self.step}\t{self.loss!r}\t{self.sim!r}\t{self.reg!r}"


@dataclass
class TrainState:
    """Where a run stopped: global step count, phase and optimizer moments."""

    step: int = 0
    phase: str = "single"
    optimizer: dict | None = None


@dataclass
class TrainResult:
    model: RegModel
    trace: list[TraceRow]
    state: TrainState
    checkpoint: Path | None = None

    @property
    def losses(self) -> list[float]:
        return [row.loss for row in self.trace]


# ---------------------------------------------------------------------------
# helpers


@contextlib.contextmanager
def deterministic_mode(enabled: bool = True):
    """Single-threaded, deterministic kernels for the duration of the block."""
    if not enabled:
        yield
        return
    threads = torch.get_num_threads()
    previous = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous)
        torch.set_num_threads(threads)


def check_phase(model: RegModel, phase: str) -> None:
    parameter_groups(model, phase)  # rejects unknown phases
    k = phase_step(phase, model.cfg.cascade_steps)
    if k is not None and k > 1:
        missing = [j for j in range(1, k) if j not in model.trained_steps]
        if missing:
            raise PhaseOrderError(f"phase {phase} needs trained cascade steps {missing} first")


def pair_order(seed: int, n: int, step: int) -> int:
    """Dataset index visited at global ``step``: a fresh seeded permutation per epoch."""
    epoch, pos = divmod(step, n)
    return int(np.random.default_rng([seed, epoch]).permutation(n)[pos])


def augment_pair(moving: torch.Tensor, fixed: torch.Tensor, seed: int, step: int):
    """Seeded flips, axis permutation (cubic volumes only) and moving/fixed swap, shared by both images."""
    rng = np.random.default_rng([seed, step, 1])
    flips = [axis for axis in (2, 3, 4) if rng.random() < 0.5]
    perm = rng.permutation(3)
    swap = rng.random() < 0.5
    if flips:
        moving, fixed = moving.flip(flips), fixed.flip(flips)
    if len(set(moving.shape[2:])) == 1:
        order = [0, 1] + [2 + int(a) for a in perm]
        moving, fixed = moving.permute(order).contiguous(), fixed.permute(order).contiguous()
    return (fixed, moving) if swap else (moving, fixed)


def _as_tensors(pair) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(pair, tuple):
        moving, fixed = pair
    else:
        moving, fixed = pair.moving, pair.fixed
    to_t = lambda v: v if isinstance(v, torch.Tensor) else volume_to_tensor(v)  # noqa: E731
    return to_t(moving), to_t(fixed)


def step_loss(model: RegModel, moving, fixed, phase: str, lam: float):
    """Loss terms for one pair under ``phase``; the final field carries the loss."""
    n = model.cfg.cascade_steps
    k = phase_step(phase, n)
    if k is None:
        result = model.forward_cascaded(moving, fixed, steps=n)
    else:
        result = model.forward_cascaded(moving, fixed, steps=k, grad_from_step=k)
    terms = loss_terms(moving, fixed, result.field, lam)
    if model.cfg.deep_supervision:
        mv, fx = image_pyramid(moving), image_pyramid(fixed)
        coarse = result.steps[-1].stage_totals[:-1]  # S_2, S_3
        extra = [loss_terms(mv[3 - j], fx[3 - j], t, lam).total for j, t in enumerate(coarse, 1)]
        terms = terms._replace(total=terms.total + sum(extra) / len(extra))
    return terms, result


def _optimizer(params, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def _mark_trained(model: RegModel, phase: str) -> None:
    k = phase_step(phase, model.cfg.cascade_steps)
    new = range(1, model.cfg.cascade_steps + 1) if k is None else [k]
    model.trained_steps = sorted(set(model.trained_steps) | set(new))


# ---------------------------------------------------------------------------
# training


def train(
    model: RegModel,
    dataset,
    cfg: TrainConfig,
    *,
    trace_path=None,
    checkpoint_path=None,
    resume: TrainState | None = None,
) -> TrainResult:
    """Run ``cfg.steps`` Adam steps (batch size 1) on the phase's trainable set.

    With ``cfg.augment`` each pair is randomly flipped, axis-permuted and
    role-swapped (seeded by step); the unsupervised loss holds for any such pair.

    ``dataset`` is a sequence of pairs, each either an object with
    ``moving``/``fixed`` volumes or a ``(moving, fixed)`` tuple. With
    ``resume`` the pair order, step numbering and Adam moments continue
    where the saved run stopped.
    """
    pairs = [_as_tensors(p) for p in dataset]
    if not pairs:
        raise TrainingError("empty dataset")
    check_phase(model, cfg.phase)
    start = 0
    if resume is not None:
        if resume.phase != cfg.phase:
            raise PhaseOrderError(f"cannot resume a {resume.phase} run as {cfg.phase}")
        start = resume.step

    with deterministic_mode(cfg.deterministic):
        params = apply_phase(model, cfg.phase)
        opt = _optimizer(params, cfg.lr)
        if resume is not None and resume.optimizer is not None:
            opt.load_state_dict(resume.optimizer)
            for group in opt.param_groups:
                group["lr"] = cfg.lr
        model.train()
        trace: list[TraceRow] = []
        for step in range(start, start + cfg.steps):
            moving, fixed = pairs[pair_order(cfg.seed, len(pairs), step)]
            if cfg.augment:
                moving, fixed = augment_pair(moving, fixed, cfg.seed, step)
            terms, _ = step_loss(model, moving, fixed, cfg.phase, cfg.lam)
            value = terms.total.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(step, value)
            opt.zero_grad(set_to_none=True)
            terms.total.backward()
            opt.step()
            trace.append(TraceRow(step, value, terms.sim.item(), terms.reg.item()))
            if step % cfg.log_every == 0:
                log.info("step %d loss %.6g sim %.6g reg %.6g", step, value, trace[-1].sim, trace[-1].reg)
        model.eval()

    _mark_trained(model, cfg.phase)
    state = TrainState(step=start + cfg.steps, phase=cfg.phase, optimizer=opt.state_dict())
    if trace_path is not None:
        write_trace(trace, trace_path, append=resume is not None)
    saved = None
    if checkpoint_path is not None:
        saved = save_checkpoint(model, checkpoint_path, state)
    return TrainResult(model, trace, state, saved)


def train_cascade(model: RegModel, dataset, cfgs, mode: str = "step_by_step", checkpoint_dir=None):
    """Train cascade decoders either one step at a time or jointly.

    ``step_by_step`` needs one config per cascade step and runs
    ``cascade_step_k`` for k = 1..n; ``joint`` takes a single config and
    trains every decoder (plus the bridge) at once with the encoder frozen.
    Returns the list of :class:`TrainResult`.
    """
    cfgs = [cfgs] if isinstance(cfgs, TrainConfig) else list(cfgs)
    n = model.cfg.cascade_steps
    if mode == "step_by_step":
        if len(cfgs) != n:
            raise ValueError(f"step_by_step needs {n} configs, got {len(cfgs)}")
        phases = [f"cascade_step_{k}" for k in range(1, n + 1)]
    elif mode == "joint":
        if len(cfgs) != 1:
            raise ValueError(f"joint mode takes one config, got {len(cfgs)}")
        phases = ["joint"]
    else:
        raise ValueError(f"unknown cascade mode {mode!r}")
    results = []
    for cfg, phase in zip(cfgs, phases):
        cfg = TrainConfig(**{**asdict(cfg), "phase": phase})
        ckpt = None if checkpoint_dir is None else Path(checkpoint_dir) / f"{phase}.ckpt"
        results.append(train(model, dataset, cfg, checkpoint_path=ckpt))
    return results


def write_trace(trace: list[TraceRow], path, append: bool = False) -> None:
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for row in trace:
            fh.write(row.format() + "\n")


def read_trace(path) -> list[TraceRow]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            step, loss, sim, reg = line.split("\t")
            rows.append(TraceRow(int(step), float(loss), float(sim), float(reg)))
    return rows


# ---------------------------------------------------------------------------
# checkpoints


def _optimizer_tensors(model: RegModel, state: TrainState | None):
    """Flatten Adam moments into named tensors keyed by parameter name."""
    if state is None or state.optimizer is None:
        return [], None
    names = [n for n, _ in parameter_groups(model, state.phase)["trainable"]]
    opt_state = state.optimizer["state"]
    tensors, steps = [], {}
    for idx, name in enumerate(names):
        entry = opt_state.get(idx)
        if entry is None:
            continue
        steps[name] = float(entry["step"])
        tensors.append((f"adam.exp_avg.{name}", entry["exp_avg"]))
        tensors.append((f"adam.exp_avg_sq.{name}", entry["exp_avg_sq"]))
    meta = {"step": state.step, "phase": state.phase, "param_steps": steps,
            "param_groups": state.optimizer["param_groups"]}
    return tensors, meta


def save_checkpoint(model: RegModel, path, state: TrainState | None = None) -> Path:
    path = Path(path)
    tensors = [(n, p.detach()) for n, p in model.named_parameters()]
    opt_tensors, train_meta = _optimizer_tensors(model, state)
    entries, blobs, offset = [], [], 0
    for name, t in tensors + opt_tensors:
        raw = t.detach().cpu().contiguous().numpy().astype("<f4", copy=False).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": "f32", "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "config": model.cfg.to_dict(),
        "trained_steps": list(model.trained_steps),
        "tensors": entries,
        "train_state": train_meta,
    }
    text = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(text)))
        fh.write(text)
        for raw in blobs:
            fh.write(raw)
    return path


def _config_diff(saved: ModelConfig, expected: ModelConfig) -> list[str]:
    a, b = saved.to_dict(), expected.to_dict()
    return [f"{k}: checkpoint {a[k]!r} vs requested {b[k]!r}" for k in a if a[k] != b[k]]


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[RegModel, TrainState | None]:
    """Rebuild the model (and resumable train state) stored at ``path``."""
    raw = Path(path).read_bytes()
    head = len(MAGIC) + 8
    if len(raw) < head or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointCorruptError("checkpoint corrupt: bad magic or header")
    (mlen,) = struct.unpack_from("<Q", raw, len(MAGIC))
    try:
        manifest = json.loads(raw[head : head + mlen].decode("utf-8"))
        cfg_dict = dict(manifest["config"])
        cfg_dict["dims"] = tuple(cfg_dict["dims"])
        cfg = ModelConfig(**cfg_dict)
        entries = manifest["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointCorruptError(f"checkpoint corrupt: unreadable manifest ({exc})") from None
    if expected is not None:
        diff = _config_diff(cfg, expected)
        if diff:
            raise ConfigMismatchError("config mismatch: " + "; ".join(diff))

    blob = memoryview(raw)[head + mlen :]
    expected_size = sum(e["nbytes"] for e in entries)
    if len(blob) != expected_size:
        raise CheckpointCorruptError(f"checkpoint corrupt: {len(blob)} blob bytes, manifest lists {expected_size}")
    arrays = {}
    for e in entries:
        count = math.prod(e["shape"])
        if e["dtype"] != "f32" or e["nbytes"] != 4 * count or e["offset"] + e["nbytes"] > len(blob):
            raise CheckpointCorruptError(f"checkpoint corrupt: bad entry for {e['name']}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=e["offset"]).reshape(e["shape"])
        arrays[e["name"]] = torch.from_numpy(arr.astype(np.float32))

    model = RegModel(cfg)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in arrays or tuple(arrays[name].shape) != tuple(p.shape):
                raise CheckpointCorruptError(f"checkpoint corrupt: missing or misshapen {name}")
            p.copy_(arrays[name])
    model.trained_steps = list(manifest.get("trained_steps", []))
    model.eval()
    return model, _restore_state(model, manifest.get("train_state"), arrays)


def _restore_state(model: RegModel, meta, arrays) -> TrainState | None:
    if meta is None:
        return None
    names = [n for n, _ in parameter_groups(model, meta["phase"])["trainable"]]
    state = {}
    for idx, name in enumerate(names):
        if name in meta["param_steps"]:
            state[idx] = {
                "step": torch.tensor(meta["param_steps"][name]),
                "exp_avg": arrays[f"adam.exp_avg.{name}"].clone(),
                "exp_avg_sq": arrays[f"adam.exp_avg_sq.{name}"].clone(),
            }
    return TrainState(step=meta["step"], phase=meta["phase"],
                      optimizer={"state": state, "param_groups": meta["param_groups"]})


__all__ = [
    "CheckpointCorruptError",
    "CheckpointError",
    "ConfigMismatchError",
    "NonFiniteLossError",
    "PhaseOrderError",
    "TraceRow",
    "TrainConfig",
    "TrainResult",
    "TrainState",
    "TrainingError",
    "augment_pair",
    "deterministic_mode",
    "load_checkpoint",
    "pair_order",
    "read_trace",
    "save_checkpoint",
    "step_loss",
    "train",
    "train_cascade",
    "write_trace",
]
