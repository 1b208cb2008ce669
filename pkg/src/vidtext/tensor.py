"""Dense float64 tensors with tape-based reverse-mode differentiation.

Design constraints, in order of priority: correctness under finite-difference
verification, bitwise determinism for a fixed seed, and simplicity. Arrays
are row-major numpy float64 with explicit shapes; reshape/transpose copy.
Every successful operation leaves only finite values behind.

Gradient protocol: operations executed inside a ``Tape`` context record a
backward rule. ``backward(tape, loss)`` replays the rules in reverse record
order and *accumulates* into ``Tensor.grad``; the caller is responsible for
resetting grads between steps. Running backward twice without a reset
doubles every gradient.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, NonFiniteError, ShapeError, DegeneracyError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Additive attention-mask value: large enough that exp(x - max) underflows to
# exactly 0.0 in float64, small enough to keep stored values finite.
MASK_VALUE = -1e30


class Tensor:
    """A dense float64 array with optional gradient accumulation."""

    __slots__ = ("array", "requires_grad", "grad")

    def __init__(self, array, requires_grad: bool = False):
        arr = np.ascontiguousarray(array, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor constructed with non-finite values")
        self.array = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the stored values."""
        return self.array.reshape(-1)

    def item(self) -> float:
        if self.array.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.array.reshape(())[()])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.array.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.shape}"
            )
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


# --------------------------------------------------------------------------
# Tape


class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager; at most one tape is active at a time.
    Operations executed with no active tape run in pure inference mode and
    record nothing.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __len__(self) -> int:
        return len(self._records)

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def backward(self, loss: Tensor) -> None:
        """Replay recorded rules in reverse, accumulating into leaf grads.

        Intermediate (op-output) grads are reset at the start of each call,
        so leaf gradients accumulate across calls: two backward calls
        without a caller-side reset exactly double every leaf gradient.
        """
        if loss.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.shape}"
            )
        for out, _ in self._records:
            out.grad = None
        loss.accumulate_grad(np.ones_like(loss.array))
        for out, rule in reversed(self._records):
            if out.grad is None:
                continue
            rule(out.grad)


_ACTIVE_TAPE: Tape | None = None


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _emit(out_array: np.ndarray, inputs: Sequence[Tensor],
          rule: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap an op result, recording ``rule`` if a tape is active."""
    if not np.all(np.isfinite(out_array)):
        raise NonFiniteError("operation produced non-finite values")
    tracked = _ACTIVE_TAPE is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.array = out_array
    out.requires_grad = tracked
    out.grad = None
    if tracked:
        _ACTIVE_TAPE._records.append((out, rule))
    return out


# --------------------------------------------------------------------------
# Elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def rule(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _emit(a.array + b.array, (a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")

    def rule(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g)

    return _emit(a.array - b.array, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")

    def rule(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.array)
        if b.requires_grad:
            b.accumulate_grad(g * a.array)

    return _emit(a.array * b.array, (a, b), rule)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def rule(g):
        if a.requires_grad:
            a.accumulate_grad(g * c)

    return _emit(a.array * c, (a,), rule)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b with b broadcast over every axis except the last."""
    if b.array.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: x {x.shape} incompatible with bias {b.shape}")

    def rule(g):
        if x.requires_grad:
            x.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g.reshape(-1, b.shape[0]).sum(axis=0))

    return _emit(x.array + b.array, (x, b), rule)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if shape.count(-1) == 1:
        known = -math.prod(shape)
        if known > 0 and x.size % known == 0:
            shape = tuple(x.size // known if s == -1 else s for s in shape)
    if math.prod(shape) != x.size or any(s < 0 for s in shape):
        raise ShapeError(f"reshape: {x.shape} -> {shape} changes element count")
    old = x.shape

    def rule(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(old))

    return _emit(x.array.reshape(shape).copy(), (x,), rule)


def transpose(x: Tensor, perm: Sequence[int]) -> Tensor:
    perm = tuple(perm)
    if sorted(perm) != list(range(x.array.ndim)):
        raise ShapeError(f"transpose: invalid permutation {perm} for shape {x.shape}")
    inv = np.argsort(perm)

    def rule(g):
        if x.requires_grad:
            x.accumulate_grad(np.ascontiguousarray(g.transpose(inv)))

    return _emit(np.ascontiguousarray(x.array.transpose(perm)), (x,), rule)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ContractError("concat of zero tensors")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    parts = list(tensors)

    def rule(g):
        for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(np.ascontiguousarray(g[tuple(idx)]))

    return _emit(np.concatenate([t.array for t in tensors], axis=axis), parts, rule)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(
            f"narrow: [{start}:{start + length}) out of range for axis {axis} "
            f"of shape {x.shape}"
        )
    idx = [slice(None)] * x.array.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def rule(g):
        if x.requires_grad:
            full = np.zeros_like(x.array)
            full[idx] = g
            x.accumulate_grad(full)

    return _emit(np.ascontiguousarray(x.array[idx]), (x,), rule)


def expand(x: Tensor, axis: int, times: int) -> Tensor:
    """Repeat a size-1 axis ``times`` times; backward sums over it."""
    if x.shape[axis] != 1:
        raise ShapeError(f"expand: axis {axis} of shape {x.shape} is not 1")

    def rule(g):
        if x.requires_grad:
            x.accumulate_grad(g.sum(axis=axis, keepdims=True))

    return _emit(np.repeat(x.array, times, axis=axis), (x,), rule)


# --------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched when both operands share leading dims.

    Accepts 2-D x 2-D, or N-D x N-D with identical leading dimensions.
    Backward: dA = dC @ B^T, dB = A^T @ dC (batched over leading dims).
    """
    if a.array.ndim < 2 or b.array.ndim < 2:
        raise ShapeError(f"matmul: operands must be >= 2-D, got {a.shape} and {b.shape}")
    if a.array.ndim != b.array.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dims of {a.shape} and {b.shape} differ")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims of {a.shape} and {b.shape} disagree")

    def rule(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.array.swapaxes(-1, -2))
        if b.requires_grad:
            b.accumulate_grad(a.array.swapaxes(-1, -2) @ g)

    return _emit(a.array @ b.array, (a, b), rule)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: x @ weight (+ bias).

    weight has shape [in, out]; x may carry arbitrary leading axes.
    """
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1])) if x.array.ndim != 2 else x
    out = matmul(flat, weight)
    if bias is not None:
        out = add_bias(out, bias)
    if x.array.ndim != 2:
        out = reshape(out, lead + (weight.shape[1],))
    return out


# --------------------------------------------------------------------------
# Nonlinearities and normalizations


def softmax_lastdim(x: Tensor) -> Tensor:
    """Stable softmax over the last axis (max-subtracted)."""
    if x.size == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax: empty tensor of shape {x.shape}")
    shifted = x.array - x.array.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        if x.requires_grad:
            inner = (g * y).sum(axis=-1, keepdims=True)
            x.accumulate_grad(y * (g - inner))

    return _emit(y, (x,), rule)


def logsumexp_lastdim(x: Tensor) -> Tensor:
    """log(sum(exp(x))) over the last axis, max-subtracted; backward is softmax."""
    if x.size == 0 or x.shape[-1] < 1:
        raise ShapeError(f"logsumexp: empty tensor of shape {x.shape}")
    m = x.array.max(axis=-1, keepdims=True)
    e = np.exp(x.array - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s)).reshape(x.shape[:-1])
    soft = e / s

    def rule(g):
        if x.requires_grad:
            x.accumulate_grad(soft * g[..., None])

    return _emit(out, (x,), rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-slice normalization over the last axis, then affine by gamma/beta.

    Uses population variance; eps > 0 resolves zero-variance slices.
    """
    h = x.shape[-1]
    if gamma.shape != (h,) or beta.shape != (h,):
        raise ShapeError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match "
            f"last dim of {x.shape}"
        )
    if eps <= 0:
        raise ContractError("layer_norm: eps must be > 0")
    mean = x.array.mean(axis=-1, keepdims=True)
    centered = x.array - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    y = xhat * gamma.array + beta.array

    def rule(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).reshape(-1, h).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate_grad(g.reshape(-1, h).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.array
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv_std * (gx - m1 - xhat * m2))

    return _emit(y, (x, gamma, beta), rule)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error-function GELU: x * Phi(x)."""
    phi_cdf = 0.5 * (1.0 + erf(x.array * _INV_SQRT2))
    y = x.array * phi_cdf

    def rule(g):
        if x.requires_grad:
            pdf = np.exp(-0.5 * x.array * x.array) * _INV_SQRT2PI
            x.accumulate_grad(g * (phi_cdf + x.array * pdf))

    return _emit(y, (x,), rule)


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Normalize each last-axis slice to unit L2 norm.

    Raises DegeneracyError on a zero-norm slice rather than perturbing it.
    """
    norms = np.sqrt((x.array * x.array).sum(axis=-1, keepdims=True))
    if np.any(norms < 1e-150):
        raise DegeneracyError("l2_normalize: zero-norm slice")
    y = x.array / norms

    def rule(g):
        if x.requires_grad:
            inner = (g * y).sum(axis=-1, keepdims=True)
            x.accumulate_grad((g - y * inner) / norms)

    return _emit(y, (x,), rule)


# --------------------------------------------------------------------------
# Reductions


def sum_all(x: Tensor) -> Tensor:
    def rule(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.array, g[()]))

    return _emit(np.asarray(x.array.sum()), (x,), rule)


def mean_all(x: Tensor) -> Tensor:
    n = x.size

    def rule(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.array, g[()] / n))

    return _emit(np.asarray(x.array.mean()), (x,), rule)


def sum_lastdim(x: Tensor) -> Tensor:
    h = x.shape[-1]

    def rule(g):
        if x.requires_grad:
            x.accumulate_grad(np.repeat(g[..., None], h, axis=-1))

    return _emit(x.array.sum(axis=-1), (x,), rule)


def mean_axis(x: Tensor, axis: int) -> Tensor:
    k = x.shape[axis]

    def rule(g):
        if x.requires_grad:
            x.accumulate_grad(
                np.repeat(np.expand_dims(g / k, axis), k, axis=axis)
            )

    return _emit(x.array.mean(axis=axis), (x,), rule)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup table[ids]; backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(
            f"embedding: index out of range for table of {table.shape[0]} rows"
        )

    def rule(g):
        if table.requires_grad:
            acc = np.zeros_like(table.array)
            np.add.at(acc, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
            table.accumulate_grad(acc)

    return _emit(table.array[ids].copy(), (table,), rule)


# --------------------------------------------------------------------------
# Seeded randomness


class SeededRng:
    """Deterministic random source: same seed + same call sequence gives the
    same outputs on every platform (PCG64 under the hood)."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((self.seed, self.stream)))
        )

    def normal(self, shape: Sequence[int], std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(tuple(shape)) * std

    def trunc_normal(self, shape: Sequence[int], std: float = 0.02,
                     clip: float = 2.0) -> np.ndarray:
        """Normal(0, std) with resampling outside +-clip*std."""
        out = self._gen.standard_normal(tuple(shape))
        bad = np.abs(out) > clip
        while bad.any():
            out[bad] = self._gen.standard_normal(int(bad.sum()))
            bad = np.abs(out) > clip
        return out * std

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def uniform(self, shape: Sequence[int]) -> np.ndarray:
        return self._gen.random(tuple(shape))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def get_state(self) -> dict:
        st = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "stream": self.stream,
            "state": str(st["state"]["state"]),
            "inc": str(st["state"]["inc"]),
            "has_uint32": st["has_uint32"],
            "uinteger": st["uinteger"],
        }

    def set_state(self, blob: dict) -> None:
        self.seed = int(blob["seed"])
        self.stream = int(blob["stream"])
        self._gen = np.random.Generator(np.random.PCG64())
        self._gen.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": int(blob["state"]), "inc": int(blob["inc"])},
            "has_uint32": blob["has_uint32"],
            "uinteger": blob["uinteger"],
        }


# --------------------------------------------------------------------------
# Finite-difference verification


class GradCheckReport:
    """Per-parameter maximum relative error between analytic and numeric grads."""

    def __init__(self, per_param: dict[str, float], tol: float):
        self.per_param = per_param
        self.tol = tol

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def __repr__(self) -> str:
        worst = self.max_rel_err
        status = "pass" if self.passed else "FAIL"
        return f"GradCheckReport({status}, max_rel_err={worst:.3e}, tol={self.tol:.0e})"


def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor],
               h: float = 1e-6, tol: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of scalar-valued ``f`` against central
    differences (f(p+h) - f(p-h)) / 2h, elementwise over every parameter.

    Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
    ``f`` must be deterministic and close over ``params``.
    """
    if h <= 0:
        raise ContractError("grad_check: h must be > 0")
    for p in params.values():
        p.zero_grad()
    tape = Tape()
    with tape:
        loss = f()
    if loss.size != 1:
        raise ContractError("grad_check: f must return a scalar")
    if not np.isfinite(loss.item()):
        raise NonFiniteError("grad_check: f evaluated non-finite")
    tape.backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.array))
        for name, p in params.items()
    }

    report: dict[str, float] = {}
    for name, p in params.items():
        flat = p.array.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = analytic[name].reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
        report[name] = worst
    return GradCheckReport(report, tol)


def tensor(values, requires_grad: bool = False) -> Tensor:
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=requires_grad)
