"""
Reverse-mode differentiation engine used by the rasterizer, the denoiser and all training.

Values are float32 torch tensors and torch's autograd tape is the operation graph.
This module adds the pieces the rest of the pipeline relies on: a checked op
dispatcher with descriptive shape errors, a scalar-root ``backward``, a graph
trace, clipped AdamW updates, and the versioned weight checkpoint container.

Checkpoint layout (all integers little-endian)::

    magic   b"SRCK"
    u16     version (1)
    u32     header length, then UTF-8 JSON header
    u32     tensor count
    per tensor:
        u16 name length, UTF-8 name
        u8  ndim, u32 * ndim dims
        f32 * prod(dims) payload, row-major
"""

import json
import logging
import math
import struct
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from .binary import ByteReader
from .errors import FormatError, InputError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

Tensor = torch.Tensor
DTYPE = torch.float32

CHECKPOINT_MAGIC = b"SRCK"
CHECKPOINT_VERSION = 1

_BINARY: Dict[str, Callable[[Tensor, Tensor], Tensor]] = {
    "add": torch.add,
    "sub": torch.sub,
    "mul": torch.mul,
    "div": torch.div,
}

_UNARY: Dict[str, Callable[[Tensor], Tensor]] = {
    "neg": torch.neg,
    "exp": torch.exp,
    "log": torch.log,
    "sigmoid": torch.sigmoid,
    "tanh": torch.tanh,
    "relu": torch.relu,
    "silu": F.silu,
}

_REDUCE: Dict[str, Callable[..., Tensor]] = {
    "sum": torch.sum,
    "mean": torch.mean,
}

OPS = tuple(_BINARY) + tuple(_UNARY) + tuple(_REDUCE) + (
    "matmul", "conv2d", "conv_transpose2d", "upsample", "broadcast", "slice", "concat",
)


def tensor(data: Any, requires_grad: bool = False, dtype: torch.dtype = DTYPE) -> Tensor:
    """Create an owned float tensor (never aliases a numpy buffer)."""
    value = torch.as_tensor(data, dtype=dtype).clone()
    return value.requires_grad_(requires_grad)


def _shape(t: Tensor) -> Tuple[int, ...]:
    return tuple(t.shape)


def _arity(op: str, inputs: Tuple[Tensor, ...], n: int) -> None:
    if len(inputs) != n:
        raise InputError(f"{op} takes {n} input(s), got {len(inputs)}")


def forward_op(op: str, *inputs: Tensor, **kwargs: Any) -> Tensor:
    """Evaluate one differentiable op with shape validation.

    Args:
        op: One of ``OPS``
        *inputs: Operand tensors
        **kwargs: Op options (``dim``, ``keepdim``, ``stride``, ``padding``,
            ``scale``, ``shape``, ``index``)

    Returns:
        The output tensor; it joins the graph when any input requires grad.

    Raises:
        ShapeError: Operand shapes are incompatible (both shapes are named)
        InputError: Unknown op or wrong number of inputs
    """
    if op in _BINARY:
        _arity(op, inputs, 2)
        a, b = inputs
        try:
            torch.broadcast_shapes(a.shape, b.shape)
        except RuntimeError:
            raise ShapeError(f"{op}: cannot broadcast {_shape(a)} with {_shape(b)}") from None
        return _BINARY[op](a, b)

    if op in _UNARY:
        _arity(op, inputs, 1)
        return _UNARY[op](inputs[0])

    if op in _REDUCE:
        _arity(op, inputs, 1)
        dim = kwargs.get("dim")
        if dim is None:
            return _REDUCE[op](inputs[0])
        return _REDUCE[op](inputs[0], dim=dim, keepdim=kwargs.get("keepdim", False))

    if op == "matmul":
        _arity(op, inputs, 2)
        a, b = inputs
        if a.ndim == 0 or b.ndim == 0:
            raise ShapeError(f"matmul: scalar operand {_shape(a)} @ {_shape(b)}")
        inner_a = a.shape[-1]
        inner_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
        if inner_a != inner_b:
            raise ShapeError(f"matmul: inner dimensions differ, {_shape(a)} @ {_shape(b)}")
        return torch.matmul(a, b)

    if op in ("conv2d", "conv_transpose2d"):
        if len(inputs) not in (2, 3):
            raise InputError(f"{op} takes (input, weight[, bias]), got {len(inputs)} inputs")
        x, w = inputs[0], inputs[1]
        bias = inputs[2] if len(inputs) == 3 else None
        stride = kwargs.get("stride", 1)
        if stride not in (1, 2):
            raise InputError(f"{op}: stride must be 1 or 2, got {stride}")
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"{op}: expected 4-D input and weight, got {_shape(x)} and {_shape(w)}")
        channels = w.shape[1] if op == "conv2d" else w.shape[0]
        if x.shape[1] != channels:
            raise ShapeError(f"{op}: input {_shape(x)} does not match weight {_shape(w)}")
        padding = kwargs.get("padding", 0)
        if op == "conv2d":
            return F.conv2d(x, w, bias, stride=stride, padding=padding)
        return F.conv_transpose2d(x, w, bias, stride=stride, padding=padding,
                                  output_padding=kwargs.get("output_padding", 0))

    if op == "upsample":
        _arity(op, inputs, 1)
        x = inputs[0]
        if x.ndim != 4:
            raise ShapeError(f"upsample: expected a 4-D input, got {_shape(x)}")
        return F.interpolate(x, scale_factor=kwargs.get("scale", 2), mode="nearest")

    if op == "broadcast":
        _arity(op, inputs, 1)
        shape = tuple(kwargs["shape"])
        try:
            return torch.broadcast_to(inputs[0], shape)
        except RuntimeError:
            raise ShapeError(f"broadcast: cannot expand {_shape(inputs[0])} to {shape}") from None

    if op == "slice":
        _arity(op, inputs, 1)
        return inputs[0][kwargs["index"]]

    if op == "concat":
        if not inputs:
            raise InputError("concat needs at least one input")
        dim = kwargs.get("dim", 0)
        first = inputs[0]
        for other in inputs[1:]:
            if other.ndim != first.ndim or any(
                i != dim % first.ndim and p != q for i, (p, q) in enumerate(zip(first.shape, other.shape))
            ):
                raise ShapeError(f"concat along {dim}: {_shape(first)} vs {_shape(other)}")
        return torch.cat(inputs, dim=dim)

    raise InputError(f"unknown op '{op}', expected one of {', '.join(OPS)}")


def trace(root: Tensor) -> List[str]:
    """List the graph nodes reachable from ``root`` in topological order.

    Every node appears exactly once; leaves show up as ``AccumulateGrad``.
    """
    if root.grad_fn is None:
        return []
    order: List[Any] = []
    seen = set()
    stack: List[Tuple[Any, bool]] = [(root.grad_fn, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node in seen:
            continue
        seen.add(node)
        stack.append((node, True))
        for child, _ in node.next_functions:
            if child is not None and child not in seen:
                stack.append((child, False))
    return [type(node).__name__ for node in reversed(order)]


def backward(root: Tensor) -> None:
    """Populate ``.grad`` of every leaf that requires grad with d(root)/d(leaf).

    Raises:
        ShapeError: ``root`` is not scalar-shaped
        InputError: ``root`` does not depend on any differentiable leaf
    """
    if root.numel() != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {_shape(root)}")
    if not root.requires_grad:
        raise InputError("backward root does not depend on any leaf that requires grad")
    root.reshape(()).backward()


def gradient_norm(params: Mapping[str, Tensor]) -> float:
    """Global L2 norm over every populated gradient."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(p.grad.detach().double().pow(2).sum())
    return math.sqrt(total)


def clip_gradients(params: Mapping[str, Tensor], clip_norm: Optional[float]) -> float:
    """Scale gradients so their global norm is at most ``clip_norm``.

    Returns:
        The norm before clipping.
    """
    grads = [p for p in params.values() if p.grad is not None]
    if not grads:
        return 0.0
    if clip_norm is None:
        return gradient_norm(params)
    return float(torch.nn.utils.clip_grad_norm_(grads, max_norm=clip_norm))


class AdamWState:
    """Moment buffers for ``adamw_step``, one parameter group per named tensor.

    Args:
        betas: Exponential decay rates of the first and second moments
        eps: Denominator floor
    """

    def __init__(self, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.betas = betas
        self.eps = eps
        self._names: List[str] = []
        self._optimizer: Optional[torch.optim.AdamW] = None

    @property
    def steps(self) -> int:
        if self._optimizer is None:
            return 0
        states = [s for s in self._optimizer.state.values() if "step" in s]
        return int(max(float(s["step"]) for s in states)) if states else 0

    def optimizer_for(self, params: Mapping[str, Tensor]) -> torch.optim.AdamW:
        names = list(params)
        if self._optimizer is None:
            groups = [{"params": [params[n]], "name": n} for n in names]
            self._optimizer = torch.optim.AdamW(groups, lr=0.0, betas=self.betas, eps=self.eps,
                                                weight_decay=0.0, foreach=False)
            self._names = names
        elif names != self._names:
            raise InputError("adamw_step called with a different parameter set than before")
        return self._optimizer


def adamw_step(
    params: Mapping[str, Tensor],
    lr: Union[float, Mapping[str, float]],
    weight_decay: float,
    clip_norm: Optional[float],
    state: AdamWState,
) -> float:
    """Clip the global gradient norm, then apply one decoupled-weight-decay Adam update.

    Args:
        params: Named leaf tensors whose ``.grad`` was filled by ``backward``
        lr: Learning rate, or one per parameter name
        weight_decay: Decoupled decay coefficient
        clip_norm: Maximum global gradient norm (``None`` disables clipping)
        state: Moment buffers, reused across steps

    Returns:
        The gradient norm before clipping.

    Raises:
        NumericalError: A gradient holds NaN or Inf (the parameter is named)
    """
    for name, p in params.items():
        if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
            raise NumericalError(f"non-finite gradient in parameter '{name}'", {"parameter": name})

    norm = clip_gradients(params, clip_norm)
    optimizer = state.optimizer_for(params)
    for group in optimizer.param_groups:
        group["lr"] = lr[group["name"]] if isinstance(lr, Mapping) else lr
        group["weight_decay"] = weight_decay
    optimizer.step()
    return norm


def zero_grad(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def save_checkpoint(path: Union[str, Path], tensors: Mapping[str, Tensor],
                    header: Optional[Mapping[str, Any]] = None) -> int:
    """Write tensors and a JSON header to the checkpoint container.

    Returns:
        Number of bytes written.
    """
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<H", CHECKPOINT_VERSION)
    header_bytes = json.dumps(dict(header or {}), sort_keys=True).encode("utf-8")
    buf += struct.pack("<I", len(header_bytes)) + header_bytes
    buf += struct.pack("<I", len(tensors))
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value.detach().cpu().numpy(), dtype="<f4")
        name_bytes = name.encode("utf-8")
        buf += struct.pack("<H", len(name_bytes)) + name_bytes
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes(order="C")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(buf))
    logger.debug(f"Wrote checkpoint {path} ({len(buf)} bytes, {len(tensors)} tensors)")
    return len(buf)


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, Any], Dict[str, Tensor]]:
    """Read a checkpoint written by ``save_checkpoint``.

    Raises:
        FormatError: Bad magic, unsupported version or truncated payload
    """
    reader = ByteReader(Path(path).read_bytes(), "checkpoint")
    reader.expect(CHECKPOINT_MAGIC)
    (version,) = reader.unpack("H")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", reader.offset - 2)
    (header_len,) = reader.unpack("I")
    try:
        header = json.loads(reader.take(header_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable checkpoint header: {e}", reader.offset) from None
    (count,) = reader.unpack("I")
    tensors: Dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("B")
        shape = reader.unpack(f"{ndim}I") if ndim else ()
        numel = int(np.prod(shape)) if shape else 1
        payload = np.frombuffer(reader.take(4 * numel), dtype="<f4").reshape(shape)
        tensors[name] = torch.from_numpy(payload.astype(np.float32))
    reader.finish()
    return header, tensors
