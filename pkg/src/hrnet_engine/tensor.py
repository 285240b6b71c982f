"""Tensors, the gradient tape and reverse-mode replay.

A :class:`Tensor` wraps a float64 numpy array. Operations in :mod:`hrnet_engine.ops`
append a record to the active :class:`GradTape` (if any) and :func:`backward`
replays the records in reverse to accumulate gradients.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

MAGIC = b"T4v1"
_HEADER = struct.Struct("<4s4q")


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class Tensor:
    __slots__ = ("data", "grad", "name", "requires_grad")

    def __init__(self, data, name: str | None = None, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.grad: np.ndarray | None = None
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"


def tensor4(data, name: str | None = None, requires_grad: bool = False) -> Tensor:
    """Build a rank-4 (N, C, H, W) tensor, checking the layout invariants."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 4:
        raise ShapeError(f"expected rank-4 NCHW data, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"all dims must be >= 1, got {arr.shape}")
    return Tensor(arr, name=name, requires_grad=requires_grad)


def parameter(data, name: str) -> Tensor:
    return Tensor(data, name=name, requires_grad=True)


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # maps the output gradient to one gradient (or None) per input
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class GradTape:
    records: list[Record] = field(default_factory=list)
    replayed: bool = False

    def record(self, op, inputs, output, backward) -> None:
        if self.replayed:
            raise RuntimeError("cannot record onto a tape that was already replayed; call reset()")
        self.records.append(Record(op, tuple(inputs), output, backward))

    def reset(self) -> None:
        self.records.clear()
        self.replayed = False

    def parameters(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for rec in self.records:
            for t in rec.inputs:
                if t.requires_grad and id(t) not in seen:
                    seen[id(t)] = t
        return list(seen.values())

    def __len__(self) -> int:
        return len(self.records)


_ACTIVE: list[GradTape] = []


def active_tape() -> GradTape | None:
    return _ACTIVE[-1] if _ACTIVE else None


@contextmanager
def recording(tape: GradTape | None = None) -> Iterator[GradTape]:
    """Activate ``tape`` (or a fresh one) for the duration of the block."""
    tape = GradTape() if tape is None else tape
    _ACTIVE.append(tape)
    try:
        yield tape
    finally:
        _ACTIVE.pop()


def backward(tape: GradTape, loss: Tensor, seed: float = 1.0) -> dict[str, np.ndarray]:
    """Replay ``tape`` in reverse from the scalar ``loss``.

    Every parameter touched by the tape ends up with a ``.grad`` buffer of its own
    shape (zeros when the loss does not depend on it). Returns gradients keyed by
    parameter name.
    """
    if tape.replayed:
        raise RuntimeError("tape has already been replayed; call reset() before reuse")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape.replayed = True

    for rec in tape.records:
        rec.output.grad = None
    params = tape.parameters()
    for p in params:
        p.grad = np.zeros_like(p.data)
    for rec in tape.records:
        for t in rec.inputs:
            if not t.requires_grad:
                t.grad = None

    loss.grad = np.full_like(loss.data, seed)
    for rec in reversed(tape.records):
        g = rec.output.grad
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None:
                continue
            if t.grad is None:
                t.grad = np.array(gi, dtype=np.float64, copy=True)
            else:
                t.grad = t.grad + gi
    return {p.name if p.name is not None else f"param{i}": p.grad for i, p in enumerate(params)}


def save_tensor(path: str | Path, t: Tensor | np.ndarray) -> None:
    """Write a rank-4 tensor as magic ``T4v1``, four int64 dims, float64 payload (all LE)."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    if arr.ndim != 4:
        raise ShapeError(f"only rank-4 tensors can be serialized, got shape {arr.shape}")
    payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(_HEADER.pack(MAGIC, *arr.shape) + payload)


def load_tensor(path: str | Path) -> Tensor:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("truncated tensor file")
    magic, *dims = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if min(dims) < 1:
        raise ValueError(f"invalid dims {dims}")
    count = int(np.prod(dims))
    body = raw[_HEADER.size:]
    if len(body) != 8 * count:
        raise ValueError(f"payload has {len(body)} bytes, expected {8 * count}")
    arr = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(dims)
    return Tensor(arr)
