"""HiPPO-LegS initialization and measure-normalizing rescaling of ``C``."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .measure import SequenceStats, compute_stats, skip_tau, tau_discrete
from .ssm import SSMLayerParams, compute_kernel, forward

__all__ = [
    "InitConfig",
    "DegenerateMeasureError",
    "legs_matrix",
    "init_hippo",
    "rescale_c",
    "rescale_with_skip",
    "rescale_all_layers",
    "TAU_FLOOR",
]

log = logging.getLogger(__name__)

TAU_FLOOR = 1e-12


class DegenerateMeasureError(ValueError):
    pass


@dataclass(frozen=True)
class InitConfig:
    kind: str = "legs_diag"
    m: int = 16
    d: int = 1
    n_layers: int = 1
    delta_min: float = 1e-3
    delta_max: float = 1e-1
    seed: int = 0
    skip: bool = False

    def __post_init__(self):
        if self.kind not in ("legs_full", "legs_diag"):
            raise ValueError(f"unknown init kind {self.kind!r}")
        if self.m < 1 or self.d < 1 or self.n_layers < 1:
            raise ValueError("m, d and n_layers must be positive")
        if not 0 < self.delta_min < self.delta_max:
            raise ValueError("need 0 < delta_min < delta_max")


def legs_matrix(m: int) -> tuple[np.ndarray, np.ndarray]:
    """HiPPO-LegS ``(A, B)``: ``A[n, k] = -sqrt(2n+1) sqrt(2k+1)`` below the
    diagonal, ``-(n+1)`` on it, ``0`` above; ``B[n] = sqrt(2n+1)``."""
    q = np.sqrt(2.0 * np.arange(m) + 1.0)
    a = -np.tril(np.outer(q, q), k=-1) - np.diag(np.arange(m) + 1.0)
    return a, q.copy()


def init_hippo(config: InitConfig) -> list[SSMLayerParams]:
    rng = np.random.default_rng(config.seed)
    layers = []
    for _ in range(config.n_layers):
        delta = np.exp(rng.uniform(math.log(config.delta_min), math.log(config.delta_max), size=config.d))
        d_skip = rng.standard_normal(config.d) if config.skip else None
        if config.kind == "legs_full":
            a, b = legs_matrix(config.m)
            c = rng.standard_normal((config.d, config.m))
            layers.append(SSMLayerParams.full(a, b, c, delta, d_skip))
        else:
            # S4D-LegS style diagonal: A_n = -1/2 + i pi n, B_n = 1
            c = (rng.standard_normal((config.d, config.m)) + 1j * rng.standard_normal((config.d, config.m))) / math.sqrt(2)
            layers.append(
                SSMLayerParams.diagonal(
                    np.full(config.m, math.log(0.5)),
                    math.pi * np.arange(config.m),
                    np.ones(config.m, dtype=complex),
                    c,
                    delta,
                    d_skip,
                )
            )
    return layers


def _check_tau(tau: float, name: str = "tau") -> None:
    if not math.isfinite(tau) or tau <= 0:
        raise DegenerateMeasureError(f"degenerate measure: {name}={tau!r}")


def rescale_c(params: SSMLayerParams, tau: float) -> SSMLayerParams:
    """``C -> C / sqrt(tau)``; every other field is left untouched."""
    _check_tau(tau)
    if tau == 1.0:
        return params
    return params.replace(c=params.c / math.sqrt(tau))


def rescale_with_skip(params: SSMLayerParams, tau_conv: float, tau_skip: float) -> SSMLayerParams:
    """Normalize the convolution path and the skip path separately.

    ``C -> C / sqrt(tau_conv)`` and ``D -> D / sqrt(tau_skip)``, so each
    component measure is 1 afterwards.  Without a skip weight this is
    :func:`rescale_c`.
    """
    if params.d_skip is None:
        return rescale_c(params, tau_conv)
    _check_tau(tau_skip, "tau_skip")
    out = rescale_c(params, tau_conv)
    if tau_skip != 1.0:
        out = out.replace(d_skip=out.d_skip / math.sqrt(tau_skip))
    return out


def rescale_all_layers(model: Sequence[SSMLayerParams], batch: np.ndarray):
    """Normalize every layer in order, propagating ``batch`` through the
    already-rescaled earlier layers to get each layer's input statistics.

    Returns ``(new_model, taus)`` where ``taus[i]`` is the measure of layer
    ``i`` before its rescaling (the convolution part when a skip is present).
    Layers whose measure is below ``TAU_FLOOR`` are left unchanged.
    """
    h = np.asarray(batch, dtype=float)
    if h.shape[0] < 2:
        raise ValueError("rescaling needs a minibatch of at least two sequences")
    out, taus = [], []
    for i, layer in enumerate(model):
        stats: SequenceStats = compute_stats(h)
        tau = tau_discrete(compute_kernel(layer, stats.length), stats)
        taus.append(tau)
        if tau <= TAU_FLOOR:
            log.warning("layer %d: measure %.3g below floor, skipping rescale", i, tau)
            new = layer
        elif layer.d_skip is not None:
            t_skip = skip_tau(layer, stats)
            new = rescale_with_skip(layer, tau, t_skip) if t_skip > TAU_FLOOR else rescale_c(layer, tau)
        else:
            new = rescale_c(layer, tau)
        out.append(new)
        h = forward(new, h)
    return out, taus
