"""Differentiable array substrate.

Tensors are ``torch.Tensor``; autograd supplies the reverse-mode tape. This
module adds the shape discipline the model relies on (structured shape
errors, no implicit broadcasting beyond a leading batch or a scalar), seeded
random streams keyed by purpose, and an independent finite-difference
gradient checker.
"""

from __future__ import annotations

import contextlib
import hashlib
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes: Sequence[int], detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericalError(ArithmeticError):
    """Raised when a computation produces non-finite values."""


# ---------------------------------------------------------------------------
# precision and determinism


@contextlib.contextmanager
def precision(dtype: str | torch.dtype = "float64") -> Iterator[None]:
    """Temporarily switch the default floating dtype (32- or 64-bit)."""
    if isinstance(dtype, str):
        dtype = {"float32": torch.float32, "float64": torch.float64}[dtype]
    previous = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def derive_seed(root_seed: int, *key: object) -> int:
    """Map ``(root_seed, key...)`` to a 63-bit seed, independent of call order."""
    payload = repr((int(root_seed),) + tuple(key)).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little") >> 1


@dataclass(frozen=True)
class RngStream:
    """A random stream identified by ``(root_seed, (purpose, index))``.

    Two streams with the same key always produce the same samples, no matter
    how many other streams were consumed in between.
    """

    root_seed: int
    stream_key: tuple = ()

    @property
    def seed(self) -> int:
        return derive_seed(self.root_seed, *self.stream_key)

    def child(self, *key: object) -> RngStream:
        return RngStream(self.root_seed, self.stream_key + tuple(key))

    def torch(self) -> torch.Generator:
        gen = torch.Generator()
        gen.manual_seed(self.seed)
        return gen

    def numpy(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)

    def normal(self, shape: Sequence[int], dtype: torch.dtype | None = None) -> Tensor:
        return torch.randn(tuple(shape), generator=self.torch(), dtype=dtype or torch.get_default_dtype())


@contextlib.contextmanager
def seeded(seed: int) -> Iterator[None]:
    """Run a block (typically module construction) under a fixed global torch seed."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


# ---------------------------------------------------------------------------
# primitive ops


def _is_scalar(x: Tensor) -> bool:
    return x.dim() == 0 or x.numel() == 1 and x.dim() <= 1


def _check_elementwise(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b):
        return
    small, big = (a, b) if a.dim() < b.dim() else (b, a)
    if small.dim() and tuple(big.shape[-small.dim():]) == tuple(small.shape):
        return
    raise ShapeError(op, a.shape, b.shape, detail="only scalar or leading-batch broadcasting")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("add", a, b)
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("mul", a, b)
    return a * b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="inner extents differ")
    if b.dim() > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch extents differ")
    return a @ b


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.dim() != 4 or weight.dim() != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="expected (B,C,H,W) and (O,C,kh,kw)")
    if bias is not None and tuple(bias.shape) != (weight.shape[0],):
        raise ShapeError("conv2d", weight.shape, bias.shape, detail="bias must have one entry per output channel")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def group_norm(x: Tensor, groups: int, weight: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    if x.dim() < 2 or x.shape[1] % groups:
        raise ShapeError("group_norm", x.shape, (groups,), detail="channels not divisible by groups")
    return F.group_norm(x, groups, weight, bias, eps)


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    width = x.shape[-1]
    for p in (weight, bias):
        if p is not None and tuple(p.shape) != (width,):
            raise ShapeError("layer_norm", x.shape, p.shape)
    return F.layer_norm(x, (width,), weight, bias, eps)


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    return torch.softmax(x, dim=dim)


def silu(x: Tensor) -> Tensor:
    return F.silu(x)


def gelu(x: Tensor) -> Tensor:
    return F.gelu(x)


def nearest_upsample(x: Tensor, factor: int = 2) -> Tensor:
    if x.dim() != 4:
        raise ShapeError("nearest_upsample", x.shape, detail="expected (B,C,H,W)")
    return F.interpolate(x, scale_factor=factor, mode="nearest")


def avg_downsample(x: Tensor, factor: int = 2) -> Tensor:
    if x.dim() != 4 or x.shape[-1] % factor or x.shape[-2] % factor:
        raise ShapeError("avg_downsample", x.shape, (factor,), detail="spatial extents not divisible")
    return F.avg_pool2d(x, factor)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    known = [s for s in shape if s != -1]
    total = int(np.prod(known)) if known else 1
    if shape.count(-1) > 1 or (-1 not in shape and total != x.numel()) or (-1 in shape and (total == 0 or x.numel() % total)):
        raise ShapeError("reshape", x.shape, shape)
    return x.reshape(shape)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ref = tensors[0]
    ax = axis % ref.dim()
    for t in tensors[1:]:
        if t.dim() != ref.dim() or any(t.shape[i] != ref.shape[i] for i in range(ref.dim()) if i != ax):
            raise ShapeError("concat", ref.shape, t.shape, detail=f"extents must agree off axis {axis}")
    return torch.cat(list(tensors), dim=ax)


def transpose(x: Tensor, dim0: int = -2, dim1: int = -1) -> Tensor:
    return x.transpose(dim0, dim1)


def slice_(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    n = x.shape[axis]
    if not 0 <= start < stop <= n:
        raise ShapeError("slice", x.shape, (start, stop), detail=f"range outside axis {axis}")
    return x.narrow(axis, start, stop - start)


def embed_lookup(table: Tensor, index: Tensor) -> Tensor:
    if table.dim() != 2:
        raise ShapeError("embed_lookup", table.shape, index.shape, detail="table must be 2-D")
    if index.numel() and (int(index.min()) < 0 or int(index.max()) >= table.shape[0]):
        raise ShapeError("embed_lookup", table.shape, index.shape, detail="index out of range")
    return F.embedding(index, table)


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("mse", a.shape, b.shape)
    return ((a - b) ** 2).mean()


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, h: float = 1e-5,
               coords: Sequence[int] | None = None) -> float:
    """Max relative error between autograd and central differences.

    ``f`` maps a tensor shaped like ``point`` to a scalar. ``coords`` limits
    the comparison to a subset of flat indices (all coordinates by default).
    Relative error is ``|analytic - numeric| / (|analytic| + 1e-8)``.
    """
    if point.dtype != torch.float64:
        raise TypeError("grad_check needs a float64 point")
    x = point.detach().clone().requires_grad_(True)
    out = f(x)
    if out.numel() != 1:
        raise ShapeError("grad_check", out.shape, detail="function must be scalar-valued")
    if not torch.isfinite(out):
        raise NumericalError("grad_check: non-finite function value")
    analytic = None
    if out.requires_grad:
        (analytic,) = torch.autograd.grad(out, x, allow_unused=True)
    analytic = torch.zeros_like(x) if analytic is None else analytic
    if not torch.isfinite(analytic).all():
        raise NumericalError("grad_check: non-finite analytic gradient")
    flat_analytic = analytic.reshape(-1)
    indices = range(x.numel()) if coords is None else coords
    worst = 0.0
    base = point.detach().clone().reshape(-1)
    with torch.no_grad():
        for i in indices:
            orig = base[i].item()
            base[i] = orig + h
            f_plus = f(base.view_as(point)).item()
            base[i] = orig - h
            f_minus = f(base.view_as(point)).item()
            base[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericalError(f"grad_check: non-finite value at coordinate {i}")
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = flat_analytic[i].item()
            worst = max(worst, abs(a - numeric) / (abs(a) + 1e-8))
    return worst
