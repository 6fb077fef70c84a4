"""Data-dependent generalization measure of SSM layers.

The per-channel key term is

    t = sum_j |k_j| sqrt(var[L-1-j]) + | sum_j k_j mu[L-1-j] |

i.e. the last position of ``|k| * sqrt(var)`` plus the absolute value of the
last position of ``k * mu``; a layer's measure is ``tau = mean_ch t^2``.  The
continuous counterpart replaces the sums by integrals of ``rho(T - s)``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import expm

from .ssm import (
    DiscreteKernel,
    SSMLayerParams,
    causal_conv,
    compute_kernel,
    continuous_kernel,
    continuous_kernel_grid,
    forward,
    model_hash,
)

__all__ = [
    "SequenceStats",
    "GenMeasureReport",
    "compute_stats",
    "key_terms",
    "tau_discrete",
    "tau_profile",
    "layer_kernel",
    "layer_tau",
    "skip_tau",
    "tau_continuous",
    "continuous_key_terms",
    "padding_measures",
    "transfer_params",
    "transfer_discrete",
    "measure_model",
]

MeanFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class SequenceStats:
    """Per-position, per-feature mean and population variance, each ``(L, d)``."""

    mu: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        if self.mu.shape != self.var.shape or self.mu.ndim != 2:
            raise ValueError("mu and var must both be (L, d)")
        if np.any(self.var < 0):
            raise ValueError("variance must be non-negative")

    @property
    def length(self) -> int:
        return self.mu.shape[0]

    @classmethod
    def constant(cls, length: int, d: int, mean: float, var: float) -> "SequenceStats":
        return cls(np.full((length, d), float(mean)), np.full((length, d), float(var)))


def compute_stats(batch: np.ndarray) -> SequenceStats:
    """Statistics along the batch axis of an ``(n, L, d)`` array."""
    batch = np.asarray(batch, dtype=float)
    if batch.ndim != 3:
        raise ValueError("batch must be (n, L, d)")
    if batch.shape[0] < 2:
        raise ValueError("need at least two sequences to estimate a variance")
    mu = batch.mean(axis=0)
    var = np.mean((batch - mu) ** 2, axis=0)
    return SequenceStats(mu, var)


def _check(kernel: DiscreteKernel, stats: SequenceStats):
    if kernel.values.shape != stats.mu.shape:
        raise ValueError(f"kernel shape {kernel.values.shape} does not match stats shape {stats.mu.shape}")


def key_terms(kernel: DiscreteKernel, stats: SequenceStats) -> np.ndarray:
    """Un-squared per-channel key term ``t``, shape ``(d,)``."""
    _check(kernel, stats)
    k = kernel.values
    sd_rev = np.sqrt(stats.var[::-1])
    mu_rev = stats.mu[::-1]
    return np.sum(np.abs(k) * sd_rev, axis=0) + np.abs(np.sum(k * mu_rev, axis=0))


def tau_discrete(kernel: DiscreteKernel, stats: SequenceStats) -> float:
    t = key_terms(kernel, stats)
    return float(np.sum(t**2) / t.size)


def tau_profile(kernel: DiscreteKernel, stats: SequenceStats) -> np.ndarray:
    """Measure of every prefix: entry ``L'-1`` is tau of the first ``L'`` steps."""
    _check(kernel, stats)
    k = kernel.values
    t = causal_conv(np.abs(k), np.sqrt(stats.var)) + np.abs(causal_conv(k, stats.mu))
    return np.mean(t**2, axis=1)


def layer_kernel(params: SSMLayerParams, length: int) -> DiscreteKernel:
    """Kernel including the skip connection as a tap at lag 0."""
    k = compute_kernel(params, length)
    if params.d_skip is None:
        return k
    vals = k.values.copy()
    vals[0] += params.d_skip
    return DiscreteKernel(vals)


def layer_tau(params: SSMLayerParams, stats: SequenceStats) -> float:
    return tau_discrete(layer_kernel(params, stats.length), stats)


def skip_tau(params: SSMLayerParams, stats: SequenceStats) -> float:
    """Measure of the skip path alone: ``mean_ch (|D| sd[L-1] + |D mu[L-1]|)^2``."""
    if params.d_skip is None:
        return 0.0
    dsk = params.d_skip
    t = np.abs(dsk) * np.sqrt(stats.var[-1]) + np.abs(dsk * stats.mu[-1])
    return float(np.mean(t**2))


# -- continuous measure -----------------------------------------------------


def _kernel_at(params: SSMLayerParams, start: float, step: float, n: int) -> np.ndarray:
    """``rho(start + i step)`` for ``i < n`` (``step`` may be negative)."""
    if params.repr == "diag":
        return continuous_kernel(params, start + step * np.arange(n))
    # full A: march a uniform grid upward from the smallest argument
    lo = start + step * (n - 1) if step < 0 else start
    h = abs(step)
    shifted = params.replace(b=expm(lo * params.a) @ params.b) if lo > 0 else params
    vals = continuous_kernel_grid(shifted, h, n)
    return vals[::-1] if step < 0 else vals


def _interleave(coarse: np.ndarray, mid: np.ndarray) -> np.ndarray:
    out = np.empty((coarse.shape[0] + mid.shape[0],) + coarse.shape[1:], dtype=coarse.dtype)
    out[0::2] = coarse
    out[1::2] = mid
    return out


def continuous_key_terms(
    params: SSMLayerParams,
    mean_fn: MeanFn,
    var_fn: MeanFn,
    T: float,
    *,
    shift: float = 0.0,
    time_scale: float = 1.0,
    panels: int = 4096,
    rtol: float = 1e-8,
    max_panels: int = 1 << 20,
) -> np.ndarray:
    """Per-channel ``int_0^T |rho(a(s))| sqrt(K(s)) ds + |int_0^T rho(a(s)) mu(s) ds|``

    with kernel argument ``a(s) = shift + time_scale * (T - s)``.  Composite
    Simpson, doubling the panel count until successive estimates agree to
    ``rtol``.
    """
    if T <= 0:
        raise ValueError("horizon T must be positive")
    if time_scale <= 0 or shift < 0:
        raise ValueError("time_scale must be positive and shift non-negative")

    def integrands(s: np.ndarray, rho: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        sd = np.sqrt(np.asarray(var_fn(s), dtype=float))
        mu = np.asarray(mean_fn(s), dtype=float)
        f_abs = np.abs(rho) * sd[:, None]
        f_mu = rho * mu[:, None]
        if not (np.all(np.isfinite(f_abs)) and np.all(np.isfinite(f_mu))):
            raise ValueError("non-finite integrand in measure quadrature")
        return f_abs, f_mu

    def rule(f: np.ndarray, h: float) -> np.ndarray:
        return h / 3 * (f[0] + f[-1] + 4 * f[1:-1:2].sum(axis=0) + 2 * f[2:-1:2].sum(axis=0))

    # nested grids: each doubling only evaluates the new midpoints
    n_panels = panels
    s = np.linspace(0.0, T, n_panels + 1)
    f_abs, f_mu = integrands(s, _kernel_at(params, shift + time_scale * T, -time_scale * T / n_panels, n_panels + 1))
    h = T / n_panels
    prev = rule(f_abs, h) + np.abs(rule(f_mu, h))
    while n_panels < max_panels:
        mid = (np.arange(n_panels) + 0.5) * h
        g_abs, g_mu = integrands(mid, _kernel_at(params, shift + time_scale * (T - 0.5 * h), -time_scale * h, n_panels))
        f_abs = _interleave(f_abs, g_abs)
        f_mu = _interleave(f_mu, g_mu)
        n_panels *= 2
        h = T / n_panels
        cur = rule(f_abs, h) + np.abs(rule(f_mu, h))
        scale = max(float(np.max(np.abs(cur))), 1e-300)
        if np.max(np.abs(cur - prev)) <= rtol * scale:
            return cur
        prev = cur
    return prev


def tau_continuous(params, mean_fn, var_fn, T, *, time_scale: float = 1.0, **quad) -> float:
    """Continuous measure: channel mean of the squared key term."""
    t = continuous_key_terms(params, mean_fn, var_fn, T, time_scale=time_scale, **quad)
    return float(np.mean(t**2))


def padding_measures(params, mean_fn, var_fn, T, pad: Optional[float] = None, **quad) -> tuple[float, float]:
    """Bound key term (``+1``) for a process on ``[0, T]`` after left / right
    zero padding by ``pad`` (default ``T``).

    Left padding leaves the measure of the original process unchanged; right
    padding shifts the kernel argument by ``pad``, adding a factor
    ``exp(A pad)``.  Channels are combined as ``sqrt(mean t^2)``.
    """
    pad = T if pad is None else pad
    left = continuous_key_terms(params, mean_fn, var_fn, T, **quad)
    right = continuous_key_terms(params, mean_fn, var_fn, T, shift=pad, **quad)
    combine = lambda t: float(np.sqrt(np.mean(t**2))) + 1.0  # noqa: E731
    return combine(left), combine(right)


def transfer_params(params: SSMLayerParams, factor: float) -> SSMLayerParams:
    """Continuous-time transfer to ``1/factor`` of the sampling frequency:
    ``(C, A, B) -> (factor C, A, B)``; the kernel is then read at time
    ``factor * s`` on the coarser axis."""
    if factor <= 0:
        raise ValueError("factor must be positive")
    return params.replace(c=params.c * factor)


def transfer_discrete(params: SSMLayerParams, factor: float) -> SSMLayerParams:
    """ZOH realization of the same transfer: ``delta -> factor * delta``.

    ``B_bar`` already carries the step length, so the amplitude factor on
    ``C`` is absorbed and must not be applied twice.
    """
    if factor <= 0:
        raise ValueError("factor must be positive")
    return params.replace(delta=params.delta * factor)


# -- reports ----------------------------------------------------------------


@dataclass
class GenMeasureReport:
    tau_per_layer: list[float]
    tau_total: float
    psi_sq_over_sqrt_n: float
    n: int
    model_hash: str = ""
    dataset_hash: str = ""
    skip_tau_per_layer: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def layer_stats(model: Sequence[SSMLayerParams], inputs: np.ndarray) -> list[SequenceStats]:
    """Statistics of every layer's input, propagating through the stack."""
    out = []
    h = np.asarray(inputs, dtype=float)
    for layer in model:
        out.append(compute_stats(h))
        h = forward(layer, h)
    return out


def measure_model(model: Sequence[SSMLayerParams], inputs: np.ndarray, dataset_hash: str = "") -> GenMeasureReport:
    """Per-layer measure at the current parameters on the given batch.

    ``psi_sq_over_sqrt_n`` uses the summed layer measure as psi^2.
    """
    inputs = np.asarray(inputs, dtype=float)
    stats = layer_stats(model, inputs)
    taus = [layer_tau(p, s) for p, s in zip(model, stats)]
    total = float(sum(taus))
    n = inputs.shape[0]
    if not dataset_hash:
        dataset_hash = hashlib.sha256(np.ascontiguousarray(inputs).tobytes()).hexdigest()[:16]
    return GenMeasureReport(
        tau_per_layer=taus,
        tau_total=total,
        psi_sq_over_sqrt_n=total / math.sqrt(n),
        n=n,
        model_hash=model_hash(model),
        dataset_hash=dataset_hash,
        skip_tau_per_layer=[skip_tau(p, s) for p, s in zip(model, stats)],
    )
