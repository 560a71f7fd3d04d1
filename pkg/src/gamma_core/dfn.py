"""Dual-encoder fusion block: two expert encoders fused by symmetric
cross-attention, a sigmoid gate and a residual feed-forward head.

Forward functions follow the block's equations directly; the matching
``*_backward`` functions recompute what they need from the forward inputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gamma_core.numkernel import (
    NonFiniteError,
    ParamStore,
    ShapeError,
    affine,
    affine_backward,
    as_tensor3,
    batched_matmul,
    batched_matmul_backward,
    concat_features,
    gelu,
    gelu_backward,
    row_softmax,
    row_softmax_backward,
    sigmoid,
    sigmoid_backward,
    split_features,
    uniform_init,
)

CHECKPOINT_VERSION = "dfn-v1"

# Per-role sinusoid timescales. Position 0 is (0...0, 1...1) for any
# timescale, so the two tables agree there and differ everywhere else.
ROLE_TIMESCALES = {"temporal": 10000.0, "global": 1000.0}


@dataclass(frozen=True)
class DfnConfig:
    hidden: int = 8
    gate_hidden: int | None = None  # defaults to hidden
    ffn_hidden: int | None = None  # defaults to 2 * hidden
    gate_dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")
        if self.gate_hidden is not None and self.gate_hidden < 1:
            raise ValueError("gate_hidden must be >= 1")
        if self.ffn_hidden is not None and self.ffn_hidden < 1:
            raise ValueError("ffn_hidden must be >= 1")
        if not 0.0 <= self.gate_dropout < 1.0:
            raise ValueError("gate_dropout must lie in [0, 1)")

    @property
    def gate_width(self) -> int:
        return self.gate_hidden or self.hidden

    @property
    def ffn_width(self) -> int:
        return self.ffn_hidden or 2 * self.hidden


@dataclass
class ExpertEmbeddings:
    e1: np.ndarray  # temporal expert
    e2: np.ndarray  # global expert

    def __post_init__(self):
        self.e1 = as_tensor3(self.e1, "e1")
        self.e2 = as_tensor3(self.e2, "e2")
        if self.e1.shape != self.e2.shape:
            raise ShapeError(f"expert shapes differ: {self.e1.shape} vs {self.e2.shape}")


@dataclass
class FusionTrace:
    e1_hat: np.ndarray
    e2_hat: np.ndarray
    gate: np.ndarray
    e_fused: np.ndarray
    e_out: np.ndarray


# ---------------------------------------------------------------- encoders

def sinusoid_table(length: int, channels: int, max_timescale: float = 10000.0) -> np.ndarray:
    """Whisper-style sinusoidal table: sin half then cos half."""
    half = channels // 2
    if half == 0:
        return np.zeros((length, channels))
    inc = math.log(max_timescale) / max(half - 1, 1)
    inv = np.exp(-inc * np.arange(half))
    scaled = np.arange(length)[:, None] * inv[None, :]
    table = np.concatenate([np.sin(scaled), np.cos(scaled)], axis=1)
    if channels % 2:
        table = np.concatenate([table, np.zeros((length, 1))], axis=1)
    return table


@dataclass
class SyntheticEncoder:
    """Stand-in expert: positional table + affine projection + GELU."""

    role: str
    params: ParamStore
    positions: np.ndarray

    @classmethod
    def create(
        cls,
        role: str,
        in_features: int,
        hidden: int,
        max_len: int = 512,
        rng: np.random.Generator | None = None,
    ) -> "SyntheticEncoder":
        if role not in ROLE_TIMESCALES:
            raise ValueError(f"unknown encoder role {role!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        params = ParamStore()
        params.add("proj.w", uniform_init(rng, in_features, (in_features, hidden)))
        params.add("proj.b", uniform_init(rng, in_features, (1, hidden)))
        table = sinusoid_table(max_len, in_features, ROLE_TIMESCALES[role])
        return cls(role=role, params=params, positions=table)

    @property
    def max_len(self) -> int:
        return self.positions.shape[0]


def encode(encoder: SyntheticEncoder, features: np.ndarray) -> np.ndarray:
    x = as_tensor3(features, "features")
    S = x.shape[1]
    if S > encoder.max_len:
        raise ValueError(
            f"{encoder.role} encoder: sequence length {S} exceeds positional capacity {encoder.max_len}"
        )
    if x.shape[2] != encoder.positions.shape[1]:
        raise ShapeError(
            f"{encoder.role} encoder: feature width {x.shape[2]} != table width {encoder.positions.shape[1]}"
        )
    x = x + encoder.positions[:S][None, :, :]
    return gelu(affine(x, encoder.params["proj.w"], encoder.params["proj.b"]))


# ---------------------------------------------------------------- extractor / injector

def _cross_attend(q: np.ndarray, kv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``q + Softmax(q kv^T / sqrt(D)) kv``; also returns the attention map."""
    D = q.shape[-1]
    attn = row_softmax(batched_matmul(q, kv, transpose_b=True) / math.sqrt(D))
    return q + batched_matmul(attn, kv), attn


def _cross_attend_backward(
    grad_out: np.ndarray, q: np.ndarray, kv: np.ndarray, attn: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    D = q.shape[-1]
    g_attn, g_kv = batched_matmul_backward(grad_out, attn, kv)
    g_scores = row_softmax_backward(g_attn, attn) / math.sqrt(D)
    g_q, g_kv2 = batched_matmul_backward(g_scores, q, kv, transpose_b=True)
    return grad_out + g_q, g_kv + g_kv2


def extract_inject(e1: np.ndarray, e2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric projection-free cross-attention between the two experts."""
    if e1.shape != e2.shape:
        raise ShapeError(f"extract_inject: shapes differ {e1.shape} vs {e2.shape}")
    e1_hat, _ = _cross_attend(e1, e2)
    e2_hat, _ = _cross_attend(e2, e1)
    return e1_hat, e2_hat


def extract_inject_backward(
    e1: np.ndarray, e2: np.ndarray, g1_hat: np.ndarray, g2_hat: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    _, a1 = _cross_attend(e1, e2)
    _, a2 = _cross_attend(e2, e1)
    g_e1_a, g_e2_a = _cross_attend_backward(g1_hat, e1, e2, a1)
    g_e2_b, g_e1_b = _cross_attend_backward(g2_hat, e2, e1, a2)
    return g_e1_a + g_e1_b, g_e2_a + g_e2_b


# ---------------------------------------------------------------- parameters

def init_params(cfg: DfnConfig) -> ParamStore:
    rng = np.random.default_rng(cfg.seed)
    D, H, F = cfg.hidden, cfg.gate_width, cfg.ffn_width
    p = ParamStore()
    p.add("gate.w1", uniform_init(rng, 2 * D, (2 * D, H)))
    p.add("gate.b1", uniform_init(rng, 2 * D, (1, H)))
    p.add("gate.w2", uniform_init(rng, H, (H, D)))
    p.add("gate.b2", uniform_init(rng, H, (1, D)))
    p.add("ffn.w1", uniform_init(rng, 2 * D, (2 * D, F)))
    p.add("ffn.b1", uniform_init(rng, 2 * D, (1, F)))
    p.add("ffn.w2", uniform_init(rng, F, (F, D)))
    p.add("ffn.b2", uniform_init(rng, F, (1, D)))
    return p


def _check_width(params: ParamStore, name: str, rows: int) -> None:
    if params[name].shape[0] != rows:
        raise ShapeError(f"{name} expects input width {params[name].shape[0]}, got {rows}")


# ---------------------------------------------------------------- gate

def dropout_mask(
    shape: tuple[int, ...], rate: float, rng: np.random.Generator
) -> np.ndarray:
    """Inverted-dropout mask: kept units are scaled by 1/(1-rate)."""
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def _gate_forward(e1_hat, e2_hat, params, mask):
    x = concat_features(e1_hat, e2_hat)
    _check_width(params, "gate.w1", x.shape[-1])
    z1 = affine(x, params["gate.w1"], params["gate.b1"])
    h = gelu(z1)
    hd = h * mask if mask is not None else h
    if params["gate.w2"].shape[1] != e1_hat.shape[-1]:
        raise ShapeError(
            f"gate.w2 output width {params['gate.w2'].shape[1]} != hidden {e1_hat.shape[-1]}"
        )
    g = sigmoid(affine(hd, params["gate.w2"], params["gate.b2"]))
    return g, convex_mix(g, e1_hat, e2_hat), {"x": x, "z1": z1, "hd": hd, "mask": mask}


def convex_mix(g: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``g * a + (1 - g) * b`` evaluated as ``b + g * (a - b)``.

    This form is exact when ``a == b``; the clip only removes last-ulp
    excursions outside ``[min(a, b), max(a, b)]``.
    """
    mixed = b + g * (a - b)
    return np.clip(mixed, np.minimum(a, b), np.maximum(a, b))


def gate_and_fuse(
    e1_hat: np.ndarray,
    e2_hat: np.ndarray,
    params: ParamStore,
    training: bool = False,
    dropout: float = 0.1,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Return (gate, fused).  Dropout hits the gate-MLP hidden layer only in training."""
    if e1_hat.shape != e2_hat.shape:
        raise ShapeError(f"gate_and_fuse: shapes differ {e1_hat.shape} vs {e2_hat.shape}")
    mask = None
    if training and dropout > 0:
        rng = rng if rng is not None else np.random.default_rng()
        shape = e1_hat.shape[:-1] + (params["gate.w1"].shape[1],)
        mask = dropout_mask(shape, dropout, rng)
    g, fused, _ = _gate_forward(e1_hat, e2_hat, params, mask)
    return g, fused


def _gate_backward(g_fused, e1_hat, e2_hat, g, cache, params):
    g_e1h = g_fused * g
    g_e2h = g_fused * (1.0 - g)
    g_z2 = sigmoid_backward(g_fused * (e1_hat - e2_hat), g)
    g_hd, gw2, gb2 = affine_backward(g_z2, cache["hd"], params["gate.w2"])
    g_h = g_hd * cache["mask"] if cache["mask"] is not None else g_hd
    g_z1 = gelu_backward(g_h, cache["z1"])
    g_x, gw1, gb1 = affine_backward(g_z1, cache["x"], params["gate.w1"])
    params.accumulate("gate.w1", gw1)
    params.accumulate("gate.b1", gb1)
    params.accumulate("gate.w2", gw2)
    params.accumulate("gate.b2", gb2)
    a, b = split_features(g_x, e1_hat.shape[-1])
    return g_e1h + a, g_e2h + b


# ---------------------------------------------------------------- residual FFN

def residual_ffn(
    e_fused: np.ndarray, e1: np.ndarray, e2: np.ndarray, params: ParamStore
) -> np.ndarray:
    out, _ = _ffn_forward(e_fused, e1, e2, params)
    return out


def _ffn_forward(e_fused, e1, e2, params):
    if not (e_fused.shape == e1.shape == e2.shape):
        raise ShapeError(
            f"residual_ffn: shapes differ {e_fused.shape}, {e1.shape}, {e2.shape}"
        )
    x = concat_features(e_fused, e1 + e2)
    _check_width(params, "ffn.w1", x.shape[-1])
    _check_width(params, "ffn.w2", params["ffn.w1"].shape[1])
    z = affine(x, params["ffn.w1"], params["ffn.b1"])
    out = affine(gelu(z), params["ffn.w2"], params["ffn.b2"])
    return out, {"x": x, "z": z}


def _ffn_backward(g_out, cache, params, width):
    h = gelu(cache["z"])
    g_h, gw2, gb2 = affine_backward(g_out, h, params["ffn.w2"])
    g_z = gelu_backward(g_h, cache["z"])
    g_x, gw1, gb1 = affine_backward(g_z, cache["x"], params["ffn.w1"])
    params.accumulate("ffn.w1", gw1)
    params.accumulate("ffn.b1", gb1)
    params.accumulate("ffn.w2", gw2)
    params.accumulate("ffn.b2", gb2)
    g_fused, g_sum = split_features(g_x, width)
    return g_fused, g_sum


# ---------------------------------------------------------------- full block

def dfn_forward(
    inputs: ExpertEmbeddings,
    params: ParamStore,
    training: bool = False,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> FusionTrace:
    e1_hat, e2_hat = extract_inject(inputs.e1, inputs.e2)
    g, fused = gate_and_fuse(e1_hat, e2_hat, params, training, dropout, rng)
    out = residual_ffn(fused, inputs.e1, inputs.e2, params)
    return FusionTrace(e1_hat, e2_hat, g, fused, out)


@dataclass
class DfnResult:
    trace: FusionTrace
    loss: float
    grad_e1: np.ndarray
    grad_e2: np.ndarray
    stages: dict = field(default_factory=dict, repr=False)


def _finite(stage: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values after stage {stage!r}")


def dfn_forward_backward(
    inputs: ExpertEmbeddings,
    params: ParamStore,
    target: np.ndarray,
    loss_scale: float = 1.0,
    dropout_mask_: np.ndarray | None = None,
) -> DfnResult:
    """MSE-to-target forward and backward pass through the whole block.

    Parameter gradients are accumulated into ``params.grads``; input
    gradients are returned.  ``loss_scale`` multiplies the loss.
    """
    e1, e2 = inputs.e1, inputs.e2
    target = as_tensor3(target, "target")

    # overflow is reported by stage below rather than as numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        e1_hat, e2_hat = extract_inject(e1, e2)
        _finite("extract_inject", e1_hat)
        _finite("extract_inject", e2_hat)
        g, fused, gcache = _gate_forward(e1_hat, e2_hat, params, dropout_mask_)
        _finite("gate_and_fuse", fused)
        out, fcache = _ffn_forward(fused, e1, e2, params)
        _finite("residual_ffn", out)
    if out.shape != target.shape:
        raise ShapeError(f"target shape {target.shape} != output shape {out.shape}")

    diff = out - target
    loss = loss_scale * np.mean(diff**2)
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite values after stage 'loss'")
    g_out = loss_scale * 2.0 * diff / diff.size

    D = e1.shape[-1]
    g_fused, g_sum = _ffn_backward(g_out, fcache, params, D)
    g_e1h, g_e2h = _gate_backward(g_fused, e1_hat, e2_hat, g, gcache, params)
    g_e1, g_e2 = extract_inject_backward(e1, e2, g_e1h, g_e2h)
    trace = FusionTrace(e1_hat, e2_hat, g, fused, out)
    return DfnResult(trace, loss, g_e1 + g_sum, g_e2 + g_sum)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(params: ParamStore, path: str | Path, meta: dict | None = None) -> None:
    """Line-delimited JSON: a header record then one record per parameter."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        header = {"format": CHECKPOINT_VERSION, "meta": meta or {}}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for name in params:
            v = params[name]
            rec = {"name": name, "shape": list(v.shape), "values": v.reshape(-1).tolist()}
            fh.write(json.dumps(rec) + "\n")


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"{path}: empty checkpoint")
    header = json.loads(lines[0])
    if header.get("format") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
    params = ParamStore()
    for line in lines[1:]:
        if not line.strip():
            continue
        rec = json.loads(line)
        arr = np.asarray(rec["values"], dtype=np.float64).reshape(rec["shape"])
        params.add(rec["name"], arr)
    return params, header.get("meta", {})


def gradcheck_dfn(
    batch: int,
    seq: int,
    hidden: int,
    seed: int = 0,
    step: float = 1e-5,
    tolerance: float = 1e-5,
    max_coords: int | None = None,
):
    """Finite-difference check of every parameter and both expert inputs."""
    from gamma_core.numkernel import finite_diff_check

    rng = np.random.default_rng(seed)
    cfg = DfnConfig(hidden=hidden, gate_dropout=0.0, seed=seed)
    params = init_params(cfg)
    shape = (batch, seq, hidden)
    # expert inputs ride along as rank-2 "parameters"
    params.add("input.e1", rng.normal(size=shape).reshape(batch * seq, hidden))
    params.add("input.e2", rng.normal(size=shape).reshape(batch * seq, hidden))
    target = rng.normal(size=shape)

    def loss_and_grad(p: ParamStore) -> float:
        inputs = ExpertEmbeddings(p["input.e1"].reshape(shape), p["input.e2"].reshape(shape))
        res = dfn_forward_backward(inputs, p, target)
        p.accumulate("input.e1", res.grad_e1.reshape(batch * seq, hidden))
        p.accumulate("input.e2", res.grad_e2.reshape(batch * seq, hidden))
        return res.loss

    return finite_diff_check(loss_and_grad, params, step, tolerance, max_coords, seed)
