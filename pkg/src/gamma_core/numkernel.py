"""Dense float64 primitives with hand-written backward rules.

Rank-3 arrays are plain ``numpy.ndarray`` objects shaped ``(B, S, D)``.
Every forward primitive has a matching ``*_backward`` that maps the
upstream gradient to gradients of the inputs.  There is no tape: callers
compose forward and backward passes explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def as_tensor3(x, name: str = "tensor") -> np.ndarray:
    """Validate and return ``x`` as a finite array of shape (B, S, D).

    float64 is the working precision; ``longdouble`` input is passed through
    untouched so extended-precision oracles can reuse the same code path.
    """
    arr = np.asarray(x)
    if arr.dtype != np.longdouble:
        arr = arr.astype(DTYPE, copy=False)
    if arr.ndim != 3:
        raise ShapeError(f"{name}: expected rank-3 (B, S, D), got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"{name}: every dimension must be >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name}: contains non-finite entries")
    return arr


# ---------------------------------------------------------------- matmul

def batched_matmul(a: np.ndarray, b: np.ndarray, transpose_b: bool = False) -> np.ndarray:
    """Per-batch product ``a[k] @ b[k]`` (or ``a[k] @ b[k].T``)."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"batched_matmul: incompatible shapes {a.shape} and {b.shape}")
    inner_b = b.shape[2] if transpose_b else b.shape[1]
    if a.shape[2] != inner_b:
        raise ShapeError(
            f"batched_matmul: inner dims differ for {a.shape} and {b.shape}"
            f" (transpose_b={transpose_b})"
        )
    bb = np.swapaxes(b, 1, 2) if transpose_b else b
    return np.matmul(a, bb)


def batched_matmul_backward(
    grad_out: np.ndarray, a: np.ndarray, b: np.ndarray, transpose_b: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    if transpose_b:
        # out = a b^T
        grad_a = np.matmul(grad_out, b)
        grad_b = np.matmul(np.swapaxes(grad_out, 1, 2), a)
    else:
        grad_a = np.matmul(grad_out, np.swapaxes(b, 1, 2))
        grad_b = np.matmul(np.swapaxes(a, 1, 2), grad_out)
    return grad_a, grad_b


# ---------------------------------------------------------------- softmax

def row_softmax(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with per-row max subtraction."""
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def row_softmax_backward(grad_out: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient through softmax given its output ``y``."""
    inner = np.sum(grad_out * y, axis=-1, keepdims=True)
    return y * (grad_out - inner)


def log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


# ---------------------------------------------------------------- sigmoid

def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    x = np.asarray(x)
    x = x.astype(np.result_type(x, DTYPE), copy=False)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(grad_out: np.ndarray, y: np.ndarray) -> np.ndarray:
    return grad_out * y * (1.0 - y)


# ---------------------------------------------------------------- GELU (tanh form)

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def gelu(x: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + _GELU_K * x**3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + _GELU_K * x**3)
    t = np.tanh(inner)
    d_inner = _GELU_C * (1.0 + 3.0 * _GELU_K * x**2)
    return grad_out * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner)


# ---------------------------------------------------------------- affine / concat

def affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``x @ w + b`` over the last axis; ``w`` is (in, out), ``b`` is (1, out)."""
    if x.shape[-1] != w.shape[0] or b.shape != (1, w.shape[1]):
        raise ShapeError(
            f"affine: input width {x.shape[-1]} incompatible with weight {w.shape} / bias {b.shape}"
        )
    return x @ w + b[0]


def affine_backward(
    grad_out: np.ndarray, x: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (grad_x, grad_w, grad_b)."""
    gx = grad_out @ w.T
    flat_x = x.reshape(-1, x.shape[-1])
    flat_g = grad_out.reshape(-1, grad_out.shape[-1])
    gw = flat_x.T @ flat_g
    gb = flat_g.sum(axis=0, keepdims=True)
    return gx, gw, gb


def concat_features(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_features: leading dims differ {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=-1)


def split_features(x: np.ndarray, width: int) -> tuple[np.ndarray, np.ndarray]:
    return x[..., :width], x[..., width:]


# ---------------------------------------------------------------- parameters

@dataclass
class ParamStore:
    """Named rank-2 parameters with same-shaped gradient accumulators."""

    values: dict[str, np.ndarray] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.values:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=DTYPE)
        if arr.ndim != 2:
            raise ShapeError(f"parameter {name!r} must be rank-2, got shape {arr.shape}")
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self) -> Iterator[str]:
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        buf = self.grads[name]
        if grad.shape != buf.shape:
            raise ShapeError(f"gradient for {name!r} has shape {grad.shape}, expected {buf.shape}")
        buf += grad

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, v in self.values.items():
            out.add(name, v.copy())
        return out

    def num_params(self) -> int:
        return sum(v.size for v in self.values.values())


def uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple[int, int]) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tolerance: float
    coords_checked: dict[str, int]

    @property
    def passed(self) -> bool:
        return all(err <= self.tolerance for err in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def to_record(self) -> dict:
        return {
            "passed": self.passed,
            "tolerance": self.tolerance,
            "worst_rel_error": self.worst,
            "max_rel_error": dict(self.max_rel_error),
            "coords_checked": dict(self.coords_checked),
        }


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def finite_diff_check(
    loss_and_grad: Callable[[ParamStore], float],
    params: ParamStore,
    step: float = 1e-5,
    tolerance: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_and_grad(params)`` must return the scalar loss and *accumulate*
    analytic gradients into ``params.grads``; it is called once with
    zeroed gradients for the analytic pass and then repeatedly on perturbed
    values (whatever it writes into the gradient buffers then is ignored).

    With ``max_coords`` set, parameters larger than that are subsampled
    (at least 64 coordinates each).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params.zero_grad()
    base = loss_and_grad(params)
    if not math.isfinite(base):
        raise NonFiniteError(f"finite_diff_check: loss is not finite ({base})")
    analytic = {name: g.copy() for name, g in params.grads.items()}

    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    counts: dict[str, int] = {}
    for name in params:
        value = params[name]
        n = value.size
        if max_coords is not None and n > max(max_coords, 64):
            idx = np.sort(rng.choice(n, size=max(max_coords, 64), replace=False))
        else:
            idx = np.arange(n)
        flat = value.reshape(-1)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = loss_and_grad(params)
            flat[i] = orig - step
            f_minus = loss_and_grad(params)
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NonFiniteError(
                    f"finite_diff_check: non-finite loss perturbing {name}[{i}]"
                )
            numeric = (f_plus - f_minus) / (2.0 * step)
            worst = max(worst, relative_error(analytic[name].reshape(-1)[i], numeric))
        errors[name] = worst
        counts[name] = len(idx)
    params.zero_grad()
    for name, g in analytic.items():
        params.grads[name][...] = g
    return GradCheckReport(max_rel_error=errors, tolerance=tolerance, coords_checked=counts)
