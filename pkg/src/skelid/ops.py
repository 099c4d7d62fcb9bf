"""Numeric primitives: tensors, hand-written gradients, SGD, checkpoints.

Everything runs on float64 numpy arrays.  There is no autodiff tape; each op
exposes a forward function and a matching ``*_backward`` that consumes the
upstream gradient plus whatever the forward needed, and the encoder chains
them in fixed order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

Tensor = np.ndarray

# contraction-path search only pays off once operands stop being tiny
_EINSUM_OPT_THRESHOLD = 4096


def contract(spec: str, *operands: Tensor) -> Tensor:
    big = any(op.size > _EINSUM_OPT_THRESHOLD for op in operands)
    return np.einsum(spec, *operands, optimize=big)


def as_tensor(x) -> Tensor:
    a = np.asarray(x, dtype=np.float64)
    if not np.isfinite(a).all():
        raise ValueError("tensor entries must be finite")
    return a


@dataclass
class ParamTensor:
    """A learnable tensor with its gradient and momentum buffer."""

    name: str
    value: Tensor
    grad: Tensor = field(default=None)  # type: ignore[assignment]
    velocity: Tensor = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.value = as_tensor(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.velocity is None:
            self.velocity = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape or self.velocity.shape != self.value.shape:
            raise ValueError("value, grad and velocity shapes must match")

    def zero_grad(self):
        self.grad.fill(0.0)


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 1e-2
    momentum: float = 0.9
    decay_factor: float = 0.1
    decay_every: int = 10
    nesterov: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must be in (0, 1]")
        if self.decay_every < 1:
            raise ValueError("decay_every must be at least 1")


def schedule_lr(cfg: OptimConfig, epoch: int) -> float:
    """Stepwise decay: base rate times decay_factor every decay_every epochs."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.learning_rate * cfg.decay_factor ** (epoch // cfg.decay_every)


def sgd_nesterov_step(params: Sequence[ParamTensor], cfg: OptimConfig, lr: float | None = None):
    """v <- mu*v - lr*g; theta <- theta + mu*v - lr*g (plain: theta <- theta + v)."""
    if lr is None:
        lr = cfg.learning_rate
    mu = cfg.momentum
    for p in params:
        p.velocity *= mu
        p.velocity -= lr * p.grad
        if cfg.nesterov:
            p.value += mu * p.velocity - lr * p.grad
        else:
            p.value += p.velocity


# ---------------------------------------------------------------------------
# matmul

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def matmul_backward(dout: Tensor, a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    return dout @ b.T, a.T @ dout


# ---------------------------------------------------------------------------
# temporal convolution

CONV_WIDTH = 9
CONV_PAD = (3, 4)


def conv_out_len(t: int, stride: int = 2) -> int:
    if t < 1:
        raise ValueError("temporal length must be at least 1")
    return (t + sum(CONV_PAD) - CONV_WIDTH) // stride + 1


def _conv_windows(x: Tensor, stride: int) -> Tensor:
    """Strided (N, C, T', J, 9) view of the padded input."""
    n, c, t, j = x.shape
    t_out = conv_out_len(t, stride)
    xp = np.zeros((n, c, t + sum(CONV_PAD), j))
    xp[:, :, CONV_PAD[0] : CONV_PAD[0] + t] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, CONV_WIDTH, axis=2)
    return xp, win[:, :, 0 : stride * t_out : stride]


def conv_temporal(x: Tensor, kernel: Tensor, stride: int = 2) -> Tensor:
    """Width-9 stride-2 convolution along T, per node, mixing channels.

    x is (C, T, J) or batched (N, C, T, J); kernel is (C_out, C_in, 9).
    Output length is floor(T/2) with the (3, 4) padding; T=1 yields an
    empty time axis, T=0 is an error.
    """
    single = x.ndim == 3
    xb = x[None] if single else x
    if xb.ndim != 4:
        raise ValueError("input must be (C, T, J) or (N, C, T, J)")
    if kernel.ndim != 3 or kernel.shape[2] != CONV_WIDTH:
        raise ValueError("kernel must be (C_out, C_in, 9)")
    n, c, t, j = xb.shape
    if kernel.shape[1] != c:
        raise ValueError(f"kernel expects {kernel.shape[1]} channels, input has {c}")
    t_out = conv_out_len(t, stride)
    if t_out == 0:
        out = np.zeros((n, kernel.shape[0], 0, j))
    else:
        _, xs = _conv_windows(xb, stride)
        out = contract("nctjw,ocw->notj", xs, kernel)
    return out[0] if single else out


def conv_temporal_backward(
    dout: Tensor, x: Tensor, kernel: Tensor, stride: int = 2
) -> tuple[Tensor, Tensor]:
    """Gradients of conv_temporal w.r.t. the input and the kernel."""
    single = x.ndim == 3
    xb = x[None] if single else x
    db = dout[None] if single else dout
    n, c, t, j = xb.shape
    t_out = conv_out_len(t, stride)
    dk = np.zeros_like(kernel)
    dx = np.zeros_like(xb)
    if t_out > 0:
        _, xs = _conv_windows(xb, stride)
        dk = contract("notj,nctjw->ocw", db, xs)
        dxp = np.zeros((n, c, t + sum(CONV_PAD), j))
        taps = np.arange(t_out) * stride
        for u in range(CONV_WIDTH):
            dxp[:, :, taps + u] += contract("notj,oc->nctj", db, kernel[:, :, u])
        dx = dxp[:, :, CONV_PAD[0] : CONV_PAD[0] + t]
    return (dx[0], dk) if single else (dx, dk)


# ---------------------------------------------------------------------------
# activations and pooling

def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def relu_backward(dout: Tensor, x: Tensor) -> Tensor:
    return dout * (x > 0)


def l3_pool(x: Tensor) -> Tensor:
    """Cube-root of the summed cubed magnitudes over the last axis."""
    return np.cbrt(np.sum(np.abs(x) ** 3, axis=-1))


def l3_pool_backward(dout: Tensor, x: Tensor) -> Tensor:
    """d/dx = sign(x) * x^2 * (sum |x|^3)^(-2/3); zero on an all-zero slice."""
    cubes = np.sum(np.abs(x) ** 3, axis=-1, keepdims=True)
    scale = np.zeros_like(cubes)
    np.divide(1.0, cubes ** (2.0 / 3.0), out=scale, where=cubes > 0)
    return dout[..., None] * np.sign(x) * x**2 * scale


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(
    loss_and_grad: Callable[[], float],
    params: Sequence[ParamTensor],
    eps: float = 1e-5,
    forward: Callable[[], float] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grad`` computes the loss and fills each param's grad;
    ``forward`` (defaults to the same callable) only needs the loss value.
    Error per coordinate is |a - n| / max(1e-12, |a| + |n|).
    """
    fwd = forward if forward is not None else loss_and_grad
    for p in params:
        p.zero_grad()
    loss_and_grad()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.value.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = fwd()
            flat[i] = keep - eps
            lo = fwd()
            flat[i] = keep
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(gflat[i] - numeric) / max(1e-12, abs(gflat[i]) + abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoint files

_CKPT_MAGIC = b"SKIDCKPT"
_CKPT_VERSION = 1


def save_tensors(path: str | Path, tensors: dict[str, Tensor], meta: dict | None = None):
    """Write named float64 tensors plus a JSON metadata block.

    The layout is fixed (magic, version, header length, header JSON, raw
    little-endian values in header order) so identical inputs produce
    byte-identical files.
    """
    entries = []
    blobs = []
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps(
        {"meta": meta or {}, "tensors": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_tensors(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = fh.read(8 * count)
            if len(data) != 8 * count:
                raise ValueError(f"{path}: truncated tensor {entry['name']!r}")
            tensors[entry["name"]] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
        return tensors, header["meta"]
