"""Sequential networks for the workers and the compression function.

Layers and their kernels come from torch; everything around them (layer specs,
shape inference, the Adam/AdamW update, Polyak averaging, checkpoints) lives
here. Callers exchange numpy arrays with a ``Network``: ``forward`` returns the
output activations, ``backward`` takes dLoss/dOutput and fills parameter
gradients. Image batches are (N, C, H, W).
"""
from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

torch.set_num_threads(1)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


# --------------------------------------------------------------------------- layers


class SameConv2d(nn.Module):
    """Convolution with 'same' padding: output spatial size is ceil(H / stride)."""

    def __init__(self, in_ch: int, out_ch: int, kernel: tuple[int, int], stride: tuple[int, int],
                 in_hw: tuple[int, int]):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel, stride)
        (h, w), (kh, kw), (sh, sw) = in_hw, kernel, stride
        self.out_hw = (-(-h // sh), -(-w // sw))
        ph = max((self.out_hw[0] - 1) * sh + kh - h, 0)
        pw = max((self.out_hw[1] - 1) * sw + kw - w, 0)
        self.pad = (pw // 2, pw - pw // 2, ph // 2, ph - ph // 2)

    def forward(self, x):
        if any(self.pad):
            x = F.pad(x, self.pad)
        return self.conv(x)


@dataclass(frozen=True)
class LayerSpec:
    kind: str                     # conv | fc | bn | relu | selu
    units: int = 0
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)

    @classmethod
    def parse(cls, text: str) -> "LayerSpec":
        """``conv:32:7:1``, ``fc:64``, ``bn``, ``relu``, ``selu``."""
        parts = text.strip().lower().split(":")
        kind = parts[0]
        if kind == "conv":
            k = int(parts[2])
            s = int(parts[3]) if len(parts) > 3 else 1
            return cls("conv", int(parts[1]), (k, k), (s, s))
        if kind == "fc":
            return cls("fc", int(parts[1]))
        if kind in ("bn", "relu", "selu"):
            return cls(kind)
        raise ValueError(f"unknown layer spec {text!r}")

    def __str__(self):
        if self.kind == "conv":
            return f"conv:{self.units}:{self.kernel[0]}:{self.stride[0]}"
        if self.kind == "fc":
            return f"fc:{self.units}"
        return self.kind


def _init_uniform(module: nn.Module, gen: torch.Generator):
    weight = module.weight
    fan_in = weight[0].numel()
    bound = 1.0 / np.sqrt(fan_in)
    with torch.no_grad():
        weight.uniform_(-bound, bound, generator=gen)
        if module.bias is not None:
            module.bias.uniform_(-bound, bound, generator=gen)


def _torch_dtype(dtype) -> torch.dtype:
    if isinstance(dtype, torch.dtype):
        return dtype
    return {np.dtype(np.float32): torch.float32, np.dtype(np.float64): torch.float64}[np.dtype(dtype)]


class Network:
    """A sequential stack built from layer specs, with shape inference.

    ``input_shape`` excludes the batch axis: (C, H, W) for images or (D,) for
    vectors. Dense layers after spatial ones get an implicit flatten.
    """

    def __init__(self, input_shape: Sequence[int], layers: Sequence[LayerSpec | str],
                 seed: int = 0, dtype=np.float32):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.specs = [l if isinstance(l, LayerSpec) else LayerSpec.parse(l) for l in layers]
        self.dtype = _torch_dtype(dtype)
        gen = torch.Generator().manual_seed(int(seed))
        modules: list[nn.Module] = []
        shape = self.input_shape
        for spec in self.specs:
            if spec.kind == "conv":
                if len(shape) != 3:
                    raise ValueError(f"conv layer needs (C, H, W) input, got {shape}")
                m = SameConv2d(shape[0], spec.units, spec.kernel, spec.stride, shape[1:])
                _init_uniform(m.conv, gen)
                shape = (spec.units,) + m.out_hw
            elif spec.kind == "fc":
                if len(shape) > 1:
                    modules.append(nn.Flatten())
                    shape = (int(np.prod(shape)),)
                m = nn.Linear(shape[0], spec.units)
                _init_uniform(m, gen)
                shape = (spec.units,)
            elif spec.kind == "bn":
                m = nn.BatchNorm2d(shape[0], momentum=0.1) if len(shape) == 3 else nn.BatchNorm1d(shape[0], momentum=0.1)
            elif spec.kind == "relu":
                m = nn.ReLU()
            else:
                m = nn.SELU()
            modules.append(m)
        self.output_shape = shape
        self.module = nn.Sequential(*modules).to(self.dtype)
        self._out: torch.Tensor | None = None

    # parameters ---------------------------------------------------------------------
    def params(self) -> list[torch.Tensor]:
        return [p.data for p in self.module.parameters()]

    def grads(self) -> list[torch.Tensor]:
        return [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.module.parameters()]

    def buffers(self) -> list[torch.Tensor]:
        return [b for name, b in self.module.named_buffers() if not name.endswith("num_batches_tracked")]

    def state(self) -> list[torch.Tensor]:
        return self.params() + self.buffers()

    def n_params(self) -> int:
        return sum(p.numel() for p in self.params())

    def clone(self) -> "Network":
        self._out = None
        return copy.deepcopy(self)

    def load_state(self, arrays: Sequence[np.ndarray | torch.Tensor]):
        mine = self.state()
        if len(arrays) != len(mine):
            raise ValueError(f"state has {len(arrays)} tensors, network expects {len(mine)}")
        for i, (dst, src) in enumerate(zip(mine, arrays)):
            src = torch.as_tensor(np.asarray(src))
            if tuple(dst.shape) != tuple(src.shape):
                raise ValueError(f"tensor {i}: shape {tuple(src.shape)} does not match {tuple(dst.shape)}")
            dst.copy_(src.to(dst.dtype))

    # compute --------------------------------------------------------------------------
    def _check(self, x) -> torch.Tensor:
        x = np.asarray(x)
        if x.ndim != len(self.input_shape) + 1 or tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"expected input of shape (N, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        return torch.from_numpy(np.ascontiguousarray(x)).to(self.dtype)

    def forward(self, x: np.ndarray, mode: str = "eval") -> np.ndarray:
        """Output activations for a batch. Train mode uses batch statistics in
        batch-norm layers and keeps the graph for ``backward``."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        t = self._check(x)
        if mode == "eval":
            self.module.eval()
            with torch.no_grad():
                out = self.module(t)
            return out.numpy()
        self.module.train()
        out = self.module(t)
        self._out = out
        return out.detach().numpy()

    __call__ = forward

    def backward(self, upstream: np.ndarray) -> list[torch.Tensor]:
        """Fill dLoss/dParams given dLoss/dOutput for the last train-mode forward."""
        if self._out is None:
            raise RuntimeError("backward() requires a preceding forward pass in train mode")
        up = torch.as_tensor(np.asarray(upstream), dtype=self.dtype)
        if up.shape != self._out.shape:
            raise ValueError(f"upstream gradient shape {tuple(up.shape)} != output shape {tuple(self._out.shape)}")
        for p in self.module.parameters():
            p.grad = None
        self._out.backward(up)
        self._out = None
        return self.grads()

    def describe(self) -> str:
        return " -> ".join(str(s) for s in self.specs)


# --------------------------------------------------------------------------- optimizers


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("adam", "adamw"):
            raise ValueError(f"optimizer kind must be 'adam' or 'adamw', got {self.kind!r}")


def make_optimizer(kind: str, lr: float, weight_decay: float | None = None) -> OptimizerState:
    if weight_decay is None:
        weight_decay = 0.01 if kind == "adamw" else 0.0
    return OptimizerState(kind=kind, lr=lr, weight_decay=weight_decay)


@torch.no_grad()
def optimizer_step(state: OptimizerState, params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor]):
    """In-place Adam update with bias correction; AdamW first shrinks each
    parameter by (1 - lr * weight_decay)."""
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} does not match parameter {tuple(p.shape)}")
        if state.kind == "adamw" and state.weight_decay:
            p.mul_(1 - state.lr * state.weight_decay)
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        p.sub_(state.lr * (m / c1) / ((v / c2).sqrt() + state.eps))
    return params


@torch.no_grad()
def polyak_update(target: Sequence[torch.Tensor], online: Sequence[torch.Tensor], tau: float):
    """target <- tau * online + (1 - tau) * target, element-wise and in place."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    for t, o in zip(target, online):
        if t.shape != o.shape:
            raise ValueError(f"shape mismatch {tuple(t.shape)} vs {tuple(o.shape)}")
        t.copy_(tau * o + (1 - tau) * t)
    return target


# --------------------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"HRLP"
CHECKPOINT_VERSION = 1


def save_checkpoint(net: Network, path: str | Path):
    """Params then buffers: magic, u32 version, u32 tensor count, then per tensor
    u32 ndim, u32 dims, little-endian float32 values."""
    arrays = [t.detach().cpu().numpy() for t in net.state()]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(arrays)))
        for a in arrays:
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_checkpoint(path: str | Path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint (bad magic {data[:4]!r})")
    try:
        return _parse_checkpoint(data, path)
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint ({exc})") from None


def _parse_checkpoint(data: bytes, path) -> list[np.ndarray]:
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    arrays = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        if off + 4 * n > len(data):
            raise ValueError(f"{path}: truncated checkpoint")
        arrays.append(np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).copy())
        off += 4 * n
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return arrays


def load_checkpoint(net: Network, path: str | Path) -> Network:
    try:
        net.load_state(read_checkpoint(path))
    except ValueError as exc:
        raise ValueError(f"{path}: checkpoint does not fit network [{net.describe()}]: {exc}") from None
    return net
