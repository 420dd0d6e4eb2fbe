"""Density model assembly: conditioner + head + base distribution.

The map x -> y is autoregressive with a lower-triangular Jacobian, so the
exact log-likelihood is the base log-density of y plus the sum of the
per-dimension log-derivatives.  Sampling inverts one dimension at a time,
re-running the conditioner on the partially filled vector (causality makes
the not-yet-filled positions irrelevant).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import diffcore as dc
from . import transforms as tf
from .conditioner import (
    ConditionerConfig,
    condition,
    conditioner_param_count,
    init_conditioner_params,
    linear,
    project_head,
)
from .diffcore import ContractViolation, DimensionError, Node, ParamSet

HEAD_TYPES = ("affine", "cdf", "shared_cdf", "spline")
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class BaseDistribution:
    kind: str  # "standard_normal" | "unit_uniform"

    def log_density(self, y: np.ndarray) -> np.ndarray:
        if self.kind == "standard_normal":
            return -0.5 * (y * y).sum(axis=-1) - 0.5 * y.shape[-1] * LOG_2PI
        return np.zeros(y.shape[:-1])

    def log_density_node(self, y: Node) -> Node:
        n, d = y.value.shape
        if self.kind == "standard_normal":
            quad = dc.mul(-0.5, dc.sum_(dc.mul(y, y), axis=1))
            return dc.add(quad, -0.5 * d * LOG_2PI)
        return dc.constant(np.zeros(n))

    def sample(self, rng: np.random.Generator, n: int, d: int) -> np.ndarray:
        if self.kind == "standard_normal":
            return rng.standard_normal((n, d))
        return rng.random((n, d))

    def check_support(self, y: np.ndarray) -> None:
        # outputs exactly 0.0/1.0 are float64 underflow of the open-interval
        # map at extreme inputs (their density is carried by the logdet term,
        # which stays finite); anything strictly outside [0, 1] is a broken
        # transform
        if self.kind == "unit_uniform" and not np.all((y >= 0.0) & (y <= 1.0)):
            raise ContractViolation(
                "uniform-base flow produced outputs outside [0, 1]"
            )


@dataclass
class ModelConfig:
    """Architecture of one flow: conditioner shape plus head hyperparameters."""

    D: int
    head_type: str = "cdf"
    E: int = 32
    heads: int = 8
    layers: int = 3
    mlp_hidden: int = 64
    cdf_hidden: int = 128     # H, hidden width of the monotone net heads
    spline_bins: int = 8      # K
    spline_bound: float = 3.0  # B, identity outside [-B, B]
    spline_blocks: int = 2    # J

    def __post_init__(self):
        if self.head_type not in HEAD_TYPES:
            raise DimensionError(
                f"head_type must be one of {HEAD_TYPES}, got {self.head_type!r}"
            )

    def psi_dim(self) -> int:
        """Pseudo-parameter width per token (per block for spline stacks)."""
        if self.head_type == "affine":
            return 2
        if self.head_type == "cdf":
            return 3 * self.cdf_hidden + 1
        if self.head_type == "shared_cdf":
            return self.E
        return 3 * self.spline_bins - 1

    def conditioner_config(self) -> ConditionerConfig:
        return ConditionerConfig(
            D=self.D,
            E=self.E,
            heads=self.heads,
            L=self.layers,
            mlp_hidden=self.mlp_hidden,
            psi_dim=self.psi_dim(),
            identity_head=self.head_type in ("shared_cdf", "spline"),
        )


def head_extra_param_count(cfg: ModelConfig) -> int:
    """Learnable head parameters beyond the conditioner's own projection."""
    if cfg.head_type == "shared_cdf":
        h = cfg.cdf_hidden
        return 3 * h + 1 + h * cfg.E + cfg.E
    if cfg.head_type == "spline":
        per_block = cfg.E * cfg.psi_dim() + cfg.psi_dim()
        mix = cfg.D * (cfg.D - 1) // 2
        return cfg.spline_blocks * (per_block + mix)
    return 0


def total_param_count(cfg: ModelConfig) -> int:
    return conditioner_param_count(cfg.conditioner_config()) + head_extra_param_count(cfg)


def pseudo_param_count(cfg: ModelConfig) -> int:
    """Activations emitted per input vector, for the optional reporting mode."""
    blocks = cfg.spline_blocks if cfg.head_type == "spline" else 1
    return cfg.D * blocks * cfg.psi_dim()


@dataclass
class FlowModel:
    config: ModelConfig
    cond: ConditionerConfig
    params: ParamSet
    base: BaseDistribution

    @property
    def head_type(self) -> str:
        return self.config.head_type

    @property
    def D(self) -> int:
        return self.config.D


@dataclass
class LogProbResult:
    y: np.ndarray
    logdet: np.ndarray | float
    logp: np.ndarray | float


def base_for_head(head_type: str) -> BaseDistribution:
    """CDF-style heads land in (0,1)^D, so they pair with the uniform base."""
    if head_type in ("cdf", "shared_cdf"):
        return BaseDistribution("unit_uniform")
    return BaseDistribution("standard_normal")


def build_model(cfg: ModelConfig, seed: int = 0) -> FlowModel:
    """Fresh model: conditioner parameters plus head-specific extras."""
    rng = np.random.default_rng(seed)
    cond_cfg = cfg.conditioner_config()
    params = init_conditioner_params(cond_cfg, rng)
    e = cfg.E

    def uniform(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    if cfg.head_type == "cdf":
        # exp(w2) must sum to ~1 at init or the sigmoid saturates to exactly
        # 0/1 in float64, breaking the uniform-base support invariant before
        # the first step; bias the w2 slots of the projection accordingly.
        h = cfg.cdf_hidden
        params["head.b"].value[2 * h:3 * h] = -np.log(h)
    elif cfg.head_type == "shared_cdf":
        h = cfg.cdf_hidden
        params.add("phi.w1", np.zeros(h))
        params.add("phi.b1", np.zeros(h))
        # same saturation guard as the per-token head
        params.add("phi.w2", np.full(h, -np.log(h)))
        params.add("phi.b2", np.zeros(1))
        params.add("phi.w1_cond", uniform(e, (h, e)))
        params.add("phi.w2_cond", uniform(e, (1, e)))
    elif cfg.head_type == "spline":
        psi = cfg.psi_dim()
        for j in range(cfg.spline_blocks):
            params.add(f"head{j}.w", uniform(e, (e, psi)))
            params.add(f"head{j}.b", np.zeros(psi))
        if cfg.D > 1:
            for j in range(cfg.spline_blocks):
                params.add(f"mix{j}", np.zeros(cfg.D * (cfg.D - 1) // 2))
    return FlowModel(cfg, cond_cfg, params, base_for_head(cfg.head_type))


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def _phi_view(params: ParamSet) -> dict[str, Node]:
    names = ("phi.w1", "phi.b1", "phi.w2", "phi.b2", "phi.w1_cond", "phi.w2_cond")
    return {n: params[n] for n in names}


def transform_forward(model: FlowModel, x: np.ndarray) -> tuple[Node, Node]:
    """x [N, D] -> (y [N, D], per-dimension logdet [N, D]) as graph nodes."""
    cfg = model.config
    hidden = condition(x, model.params, model.cond)
    xn = dc.constant(x)
    if cfg.head_type == "affine":
        psi = project_head(hidden, model.params, model.cond)
        return tf.affine_forward_node(xn, psi)
    if cfg.head_type == "cdf":
        psi = project_head(hidden, model.params, model.cond)
        return tf.cdf_forward_node(xn, psi, cfg.cdf_hidden)
    if cfg.head_type == "shared_cdf":
        return tf.shared_cdf_forward_node(xn, hidden, _phi_view(model.params))
    # spline stack: all block psi come from the same conditioner pass, so
    # every block's parameters depend only on the original inputs < i.
    z: Node = xn
    ld_total: Optional[Node] = None
    for j in range(cfg.spline_blocks):
        psi = linear(hidden, model.params[f"head{j}.w"], model.params[f"head{j}.b"])
        z, ld = tf.spline_forward_node(z, psi, cfg.spline_bins, cfg.spline_bound)
        ld_total = ld if ld_total is None else dc.add(ld_total, ld)
        free = model.params[f"mix{j}"] if cfg.D > 1 else None
        z, _ = tf.mix_forward_node(z, free, cfg.D)
    return z, ld_total


def _as_rows(x) -> tuple[np.ndarray, bool]:
    arr = dc.as_tensor(x)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim == 2:
        return arr, False
    raise DimensionError(f"expected vector or matrix, got shape {arr.shape}")


def forward_values(model: FlowModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Value-only forward: returns (y [N, D], per-dim logdet [N, D])."""
    with dc.no_grad():
        y, ld = transform_forward(model, x)
    return y.value, ld.value


def log_prob(model: FlowModel, x) -> LogProbResult:
    """Exact log-density of a vector or a batch of rows (no-grad)."""
    rows, single = _as_rows(x)
    if rows.shape[1] != model.D:
        raise DimensionError(f"input has {rows.shape[1]} columns, model expects {model.D}")
    y, ld = forward_values(model, rows)
    model.base.check_support(y)
    logdet = ld.sum(axis=1)
    logp = model.base.log_density(y) + logdet
    if single:
        return LogProbResult(y=y[0], logdet=float(logdet[0]), logp=float(logp[0]))
    return LogProbResult(y=y, logdet=logdet, logp=logp)


def nll_loss(model: FlowModel, batch: np.ndarray) -> Node:
    """Mean negative log-likelihood over the batch, differentiable in params."""
    batch = dc.as_tensor(batch)
    if batch.ndim != 2 or batch.shape[0] < 1:
        raise DimensionError(f"batch must be a nonempty matrix, got shape {batch.shape}")
    y, ld = transform_forward(model, batch)
    model.base.check_support(y.value)
    logp = dc.add(model.base.log_density_node(y), dc.sum_(ld, axis=1))
    return dc.neg(dc.mean(logp))


# ---------------------------------------------------------------------------
# sampling by sequential inversion
# ---------------------------------------------------------------------------


def _head_psi_values(model: FlowModel, hidden_vals: np.ndarray, dim: int,
                     prefix: str = "head") -> np.ndarray:
    w = model.params[prefix + ".w"].value
    b = model.params[prefix + ".b"].value
    return hidden_vals[:, dim, :] @ w + b


def sample(model: FlowModel, n: int, seed: int) -> np.ndarray:
    """Draw n vectors: sample base noise, then invert dimension by dimension."""
    if n < 1:
        raise DimensionError(f"sample count must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    noise = model.base.sample(rng, n, model.D)
    return invert_rows(model, noise)


def invert_rows(model: FlowModel, targets: np.ndarray) -> np.ndarray:
    """Map base-space rows back through the flow, one dimension at a time."""
    noise = dc.as_tensor(targets)
    if noise.ndim != 2 or noise.shape[1] != model.D:
        raise DimensionError(
            f"targets must be [n, {model.D}], got shape {noise.shape}"
        )
    cfg = model.config
    n, d = noise.shape
    x = np.zeros((n, d))
    # per-block pre-mix outputs, needed to undo the mixing rows
    t_bufs = [np.zeros((n, d)) for _ in range(cfg.spline_blocks)] \
        if cfg.head_type == "spline" else []
    mixes = []
    if cfg.head_type == "spline":
        for j in range(cfg.spline_blocks):
            free = model.params[f"mix{j}"].value if d > 1 else np.zeros(0)
            mixes.append(tf.LowerMixL(free, d).matrix)
    if model.base.kind == "unit_uniform" and not np.all((noise > 0) & (noise < 1)):
        raise DimensionError("uniform-base targets must lie strictly in (0, 1)")

    for i in range(d):
        with dc.no_grad():
            hidden = condition(x, model.params, model.cond).value
        target = noise[:, i]
        try:
            if cfg.head_type == "affine":
                psi = _head_psi_values(model, hidden, i)
                x[:, i] = (target - psi[:, 0]) / np.exp(psi[:, 1])
            elif cfg.head_type == "cdf":
                h = cfg.cdf_hidden
                psi = _head_psi_values(model, hidden, i)
                x[:, i] = tf.cdf_inv_batch(
                    target, psi[:, :h], psi[:, h:2 * h], psi[:, 2 * h:3 * h],
                    psi[:, 3 * h],
                )
            elif cfg.head_type == "shared_cdf":
                x[:, i] = _shared_cdf_inv_batch(model, hidden[:, i, :], target)
            else:
                x[:, i] = _spline_stack_inv_dim(model, hidden, i, target, t_bufs, mixes)
        except tf.InversionError as err:
            raise tf.InversionError(
                f"inversion failed at sample {err.index}, dimension {i}: {err}",
                index=err.index,
            ) from err
    return x


def _shared_cdf_inv_batch(model: FlowModel, h_rows: np.ndarray,
                          target: np.ndarray) -> np.ndarray:
    p = model.params
    w1 = p["phi.w1"].value
    b1 = p["phi.b1"].value + h_rows @ p["phi.w1_cond"].value.T
    w2 = p["phi.w2"].value
    b2 = float(p["phi.b2"].value[0]) + h_rows @ p["phi.w2_cond"].value.T[:, 0]

    def f(x):
        a = np.exp(w1) * x[..., None] + b1
        u = (np.tanh(a) * np.exp(w2)).sum(axis=-1) + b2
        return 0.5 * (1.0 + np.tanh(0.5 * u))

    return tf.monotone_bisect(f, target, tol=1e-6)


def _spline_stack_inv_dim(model: FlowModel, hidden: np.ndarray, dim: int,
                          target: np.ndarray, t_bufs: list[np.ndarray],
                          mixes: list[np.ndarray]) -> np.ndarray:
    """Undo mix row `dim` and the spline, block by block from the top."""
    cfg = model.config
    k = cfg.spline_bins
    v = target.copy()
    for j in reversed(range(cfg.spline_blocks)):
        if dim > 0:
            v = v - t_bufs[j][:, :dim] @ mixes[j][dim, :dim]
        psi = _head_psi_values(model, hidden, dim, prefix=f"head{j}")
        t_bufs[j][:, dim] = v
        v = tf.spline_inverse_np(
            v, psi[:, :k], psi[:, k:2 * k], psi[:, 2 * k:], cfg.spline_bound
        )
    return v


# ---------------------------------------------------------------------------
# numerical oracle
# ---------------------------------------------------------------------------


def numerical_jacobian(model: FlowModel, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of the map x -> y (test oracle)."""
    if step <= 0:
        raise DimensionError("jacobian step must be positive")
    x = dc.as_tensor(x)
    d = model.D
    jac = np.zeros((d, d))
    for j in range(d):
        xp = x.copy()
        xp[j] += step
        xm = x.copy()
        xm[j] -= step
        yp, _ = forward_values(model, xp[None, :])
        ym, _ = forward_values(model, xm[None, :])
        jac[:, j] = (yp[0] - ym[0]) / (2.0 * step)
    return jac
