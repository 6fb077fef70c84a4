"""Training linear SSM stacks on the last-position MSE, optionally penalized by
the data-dependent measure (or a comparison regularizer).

Gradients are exact reverse-mode derivatives written out by hand:

* through the readout and the FFT convolutions (cross-correlations),
* through the kernel taps into ``C``, ``B``, ``A`` and ``delta`` -- closed form
  for diagonal ``A``; an adjoint recursion plus the Frechet derivative of the
  matrix exponential for dense ``A``,
* through the penalty, with sign(0) = 0 for every absolute value.

Input statistics inside the penalty are treated as constants.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import expm_frechet

from .measure import SequenceStats, compute_stats, layer_kernel, tau_discrete
from .seqgen import SequenceDataset
from .ssm import SSMLayerParams, discretize_zoh, fft_size, forward, model_to_dict

__all__ = [
    "REGULARIZERS",
    "TrainConfig",
    "TrainState",
    "TrainingDiverged",
    "AdamW",
    "predict",
    "empirical_risk",
    "regularized_risk",
    "gradients",
    "gradient_norm",
    "input_stats",
    "train",
    "METRIC_COLUMNS",
]

log = logging.getLogger(__name__)

REGULARIZERS = ("tau", "filter_norm", "weight_decay_a", "none")
METRIC_COLUMNS = ("epoch", "train_mse", "test_mse", "tau_total", "grad_norm", "lr")

MAIN_KEYS = ("c", "d_skip")
STATE_KEYS = ("a_log_re", "a_im", "a", "b", "delta")


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, state: "TrainState"):
        super().__init__(msg)
        self.state = state


@dataclass(frozen=True)
class TrainConfig:
    lambda_reg: float = 0.0
    regularizer: str = "tau"
    lr_main: float = 0.01
    lr_state: float = 0.001
    weight_decay_c: float = 0.01
    epochs: int = 100
    batch_size: int = 100
    schedule: bool = True
    seed: int = 0
    reg_layers: Optional[tuple[int, ...]] = None  # None: every layer is penalized
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be >= 0")
        if self.lr_main < 0 or self.lr_state < 0:
            raise ValueError("learning rates must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.reg_layers is not None:
            object.__setattr__(self, "reg_layers", tuple(self.reg_layers))

    def penalized(self, i: int) -> bool:
        return self.reg_layers is None or i in self.reg_layers


# -- objective --------------------------------------------------------------


def predict(model: Sequence[SSMLayerParams], inputs: np.ndarray) -> np.ndarray:
    """Last-position output averaged over channels, one value per sequence."""
    h = np.asarray(inputs, dtype=float)
    for layer in model:
        h = forward(layer, h)
    return h[:, -1, :].mean(axis=1)


def empirical_risk(model, dataset: SequenceDataset) -> float:
    if dataset.n == 0:
        raise ValueError("empty dataset")
    resid = predict(model, dataset.inputs) - dataset.labels
    return float(np.mean(resid**2))


def _penalty_stats(config: TrainConfig, stats: SequenceStats) -> SequenceStats:
    if config.regularizer == "filter_norm":
        return SequenceStats(np.zeros_like(stats.mu), np.ones_like(stats.var))
    return stats


def _a_sq_norm(p: SSMLayerParams) -> float:
    if p.repr == "diag":
        return float(np.sum(np.exp(2 * p.a_log_re) + p.a_im**2))
    return float(np.sum(p.a**2))


def regularized_risk(model, dataset: SequenceDataset, config: TrainConfig, stats=None):
    """``R_n + lambda * sum_i penalty_i``; returns ``(value, per-layer penalties)``.

    ``stats`` optionally pins the per-layer input statistics used by the
    penalty (the gradient treats them as constants; finite-difference checks
    of deeper stacks must hold them fixed too).
    """
    risk, penalties, _ = _evaluate(model, dataset.inputs, dataset.labels, config, need_grad=False, stats=stats)
    return risk + config.lambda_reg * sum(penalties), penalties


# -- gradients --------------------------------------------------------------


def _correlate(g: np.ndarray, x: np.ndarray, n_fft: int, length: int) -> np.ndarray:
    """``sum_batch sum_t g[t] x[t-j]`` for ``j < length``."""
    gf = np.fft.rfft(g, n=n_fft, axis=-2)
    xf = np.fft.rfft(x, n=n_fft, axis=-2)
    return np.fft.irfft(np.sum(gf * np.conj(xf), axis=0), n=n_fft, axis=0)[:length]


def _conv_transpose(g: np.ndarray, k: np.ndarray, n_fft: int, length: int) -> np.ndarray:
    """``dx[s] = sum_t g[t] k[t-s]``."""
    gf = np.fft.rfft(g, n=n_fft, axis=-2)
    kf = np.fft.rfft(k, n=n_fft, axis=0)
    return np.fft.irfft(gf * np.conj(kf), n=n_fft, axis=-2)[..., :length, :]


def _tau_kernel_grad(k: np.ndarray, stats: SequenceStats) -> np.ndarray:
    sd_rev = np.sqrt(stats.var[::-1])
    mu_rev = stats.mu[::-1]
    mean_part = np.sum(k * mu_rev, axis=0)
    t = np.sum(np.abs(k) * sd_rev, axis=0) + np.abs(mean_part)
    d = k.shape[1]
    return (2.0 * t / d) * (np.sign(k) * sd_rev + np.sign(mean_part) * mu_rev)


def _diag_kernel_backward(p: SSMLayerParams, gk: np.ndarray) -> dict:
    """Pull ``dLoss/dk`` (``(L, d)``) back to the diagonal parameters.

    With ``u = delta lam``, ``k_j = Re sum_n C B (e^u - 1)/lam e^{j u}``; for a
    holomorphic ``h`` and ``f = Re h`` the real/imag gradient is ``conj(h')``.
    """
    length = gk.shape[0]
    lam = p.diag_a
    dt = p.delta[:, None]
    u = dt * lam[None, :]  # (d, m)
    eu = np.exp(u)
    powers = np.exp(u[:, :, None] * np.arange(length))  # (d, m, L)
    s0 = np.einsum("ld,dml->dm", gk, powers)
    s1 = np.einsum("ld,dml->dm", gk * np.arange(length)[:, None], powers)
    cb = p.c * p.b[None, :]
    phi = (eu - 1.0) / lam[None, :]
    dphi_dlam = dt * eu / lam[None, :] - (eu - 1.0) / lam[None, :] ** 2

    h_c = p.b[None, :] * phi * s0
    h_b = np.sum(p.c * phi * s0, axis=0)
    h_lam = np.sum(cb * (dphi_dlam * s0 + phi * dt * s1), axis=0)
    g_delta = np.sum(cb * (eu * s0 + (eu - 1.0) * s1), axis=1).real

    return {
        "c": np.conj(h_c),
        "b": np.conj(h_b),
        "a_log_re": (h_lam * -np.exp(p.a_log_re)).real,
        "a_im": -h_lam.imag,
        "delta": g_delta,
    }


def _full_kernel_backward(p: SSMLayerParams, gk: np.ndarray) -> dict:
    length = gk.shape[0]
    m = p.m
    a = p.a
    a_bar, b_bar, _ = discretize_zoh(p)
    v = np.linalg.solve(a, p.b)  # A^{-1} B
    eye = np.eye(m)
    g_c = np.zeros((p.d, m))
    g_a = np.zeros((m, m))
    g_b = np.zeros(m)
    g_delta = np.zeros(p.d)
    for ch in range(p.d):
        ab = a_bar[ch]
        hs = np.empty((length, m))
        h = b_bar[ch].copy()
        for j in range(length):
            hs[j] = h
            h = ab @ h
        g_c[ch] = gk[:, ch] @ hs
        # adjoint of h_{j+1} = A_bar h_j, h_0 = B_bar
        adj = gk[length - 1, ch] * p.c[ch]
        g_abar = np.zeros((m, m))
        for j in range(length - 2, -1, -1):
            g_abar += np.outer(adj, hs[j])
            adj = gk[j, ch] * p.c[ch] + ab.T @ adj
        g_bbar = adj
        # B_bar = (A_bar - I) v
        g_abar += np.outer(g_bbar, v)
        g_v = (ab - eye).T @ g_bbar
        g_b += np.linalg.solve(a.T, g_v)
        g_a -= np.outer(np.linalg.solve(a.T, g_v), v)
        # A_bar = expm(delta A)
        g_x = expm_frechet(p.delta[ch] * a.T, g_abar, compute_expm=False)
        g_a += p.delta[ch] * g_x
        g_delta[ch] = np.sum(g_x * a)
    return {"c": g_c, "b": g_b, "a": g_a, "delta": g_delta}


def _evaluate(model, inputs, labels, config: TrainConfig, need_grad: bool, stats=None):
    inputs = np.asarray(inputs, dtype=float)
    n, length, _ = inputs.shape
    xs, kernels = [], []
    fixed = stats
    stats = []
    h = inputs
    for i, layer in enumerate(model):
        xs.append(h)
        kernels.append(layer_kernel(layer, length).values)
        if fixed is not None:
            stats.append(fixed[i])
        elif config.lambda_reg > 0 and config.regularizer in ("tau", "filter_norm") and n >= 2:
            stats.append(compute_stats(h))
        else:
            stats.append(None)
        h = forward(layer, h)
    resid = h[:, -1, :].mean(axis=1) - labels
    risk = float(np.mean(resid**2))

    penalties = []
    for i, layer in enumerate(model):
        if config.regularizer == "none" or not config.penalized(i):
            penalties.append(0.0)
        elif config.regularizer in ("tau", "filter_norm"):
            st = stats[i] if stats[i] is not None else compute_stats(xs[i])
            penalties.append(tau_discrete_values(kernels[i], _penalty_stats(config, st)))
        else:
            penalties.append(_a_sq_norm(layer))
    if not need_grad:
        return risk, penalties, None

    n_fft = fft_size(length)
    d_out = h.shape[2]
    g = np.zeros_like(h)
    g[:, -1, :] = (2.0 * resid / (n * d_out))[:, None]
    grads: list[dict] = [None] * len(model)
    lam = config.lambda_reg
    for i in range(len(model) - 1, -1, -1):
        layer, x, k = model[i], xs[i], kernels[i]
        gk = _correlate(g, x, n_fft, length)
        if lam > 0 and config.penalized(i) and config.regularizer in ("tau", "filter_norm"):
            gk = gk + lam * _tau_kernel_grad(k, _penalty_stats(config, stats[i]))
        if layer.repr == "diag":
            gr = _diag_kernel_backward(layer, gk)
        else:
            gr = _full_kernel_backward(layer, gk)
        if layer.d_skip is not None:
            # skip weight enters the effective kernel at lag 0
            gr["d_skip"] = gk[0].copy()
        if lam > 0 and config.penalized(i) and config.regularizer == "weight_decay_a":
            if layer.repr == "diag":
                gr["a_log_re"] = gr["a_log_re"] + lam * 2.0 * np.exp(2 * layer.a_log_re)
                gr["a_im"] = gr["a_im"] + lam * 2.0 * layer.a_im
            else:
                gr["a"] = gr["a"] + lam * 2.0 * layer.a
        grads[i] = gr
        if i > 0:
            gx = _conv_transpose(g, k, n_fft, length)
            g = gx
    return risk, penalties, grads


def tau_discrete_values(k: np.ndarray, stats: SequenceStats) -> float:
    sd_rev = np.sqrt(stats.var[::-1])
    t = np.sum(np.abs(k) * sd_rev, axis=0) + np.abs(np.sum(k * stats.mu[::-1], axis=0))
    return float(np.mean(t**2))


def input_stats(model, inputs) -> list[SequenceStats]:
    """Statistics of each layer's input under the current parameters."""
    out, h = [], np.asarray(inputs, dtype=float)
    for layer in model:
        out.append(compute_stats(h))
        h = forward(layer, h)
    return out


def gradients(model, dataset: SequenceDataset, config: TrainConfig) -> list[dict]:
    """Exact gradients of the regularized risk, one dict per layer.

    Complex parameters carry ``d/dRe + 1j d/dIm``; ``delta`` is differentiated
    directly (not its logarithm).
    """
    _, _, grads = _evaluate(model, dataset.inputs, dataset.labels, config, need_grad=True)
    return grads


def gradient_norm(grads: list[dict]) -> float:
    total = 0.0
    for gr in grads:
        for v in gr.values():
            total += float(np.sum(np.abs(v) ** 2))
    return math.sqrt(total)


# -- optimizer --------------------------------------------------------------


def _trainable_keys(p: SSMLayerParams) -> list[str]:
    keys = ["c", "b", "delta"]
    keys += ["a_log_re", "a_im"] if p.repr == "diag" else ["a"]
    if p.d_skip is not None:
        keys.append("d_skip")
    return keys


def _as_real(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v)
    if np.iscomplexobj(v):
        return np.concatenate([v.real.ravel(), v.imag.ravel()])
    return v.ravel().astype(float)


@dataclass
class AdamW:
    """Adam with bias correction and decoupled weight decay, per parameter group.

    Moments are flat real vectors keyed by ``(layer, name)``; complex parameters
    are updated as independent real and imaginary coordinates.
    """

    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, model, grads, lrs: dict, decays: dict) -> list[SSMLayerParams]:
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        new_model = []
        for i, (p, gr) in enumerate(zip(model, grads)):
            changes = {}
            for key in _trainable_keys(p):
                group = "main" if key in MAIN_KEYS else "state"
                lr, wd = lrs[group], decays.get(group, 0.0)
                value = getattr(p, key)
                g = gr[key]
                if key == "delta":
                    g = g * value  # optimize log(delta)
                g_flat = _as_real(g)
                mk = (i, key)
                m_prev = self.m.get(mk, np.zeros_like(g_flat))
                v_prev = self.v.get(mk, np.zeros_like(g_flat))
                m_new = b1 * m_prev + (1 - b1) * g_flat
                v_new = b2 * v_prev + (1 - b2) * g_flat**2
                self.m[mk], self.v[mk] = m_new, v_new
                upd = lr * (m_new / bc1) / (np.sqrt(v_new / bc2) + self.eps)
                if np.iscomplexobj(value):
                    half = value.size
                    upd = (upd[:half] + 1j * upd[half:]).reshape(value.shape)
                else:
                    upd = upd.reshape(value.shape)
                if key == "delta":
                    changes[key] = value * np.exp(-upd)
                else:
                    base = value * (1.0 - lr * wd) if wd else value
                    changes[key] = base - upd
            new_model.append(p.replace(**changes))
        return new_model

    def state_dict(self) -> dict:
        def enc(d):
            return {f"{i}:{k}": v.tolist() for (i, k), v in sorted(d.items())}

        return {"betas": list(self.betas), "eps": self.eps, "step": self.step_count, "m": enc(self.m), "v": enc(self.v)}


# -- loop -------------------------------------------------------------------


@dataclass
class TrainState:
    model: list
    optimizer: AdamW
    epoch: int = 0
    history: dict = field(default_factory=lambda: {c: [] for c in METRIC_COLUMNS})

    def row(self, idx: int = -1) -> dict:
        return {c: self.history[c][idx] for c in METRIC_COLUMNS}


def _cosine(base: float, epoch: int, total: int, enabled: bool) -> float:
    if not enabled or total <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * epoch / total))


def _train_tau(model, inputs) -> float:
    total = 0.0
    h = inputs
    for layer in model:
        total += tau_discrete(layer_kernel(layer, h.shape[1]), compute_stats(h))
        h = forward(layer, h)
    return total


def _record(state, train_ds, test_ds, grad_norm, lr):
    hist = state.history
    hist["epoch"].append(state.epoch)
    hist["train_mse"].append(empirical_risk(state.model, train_ds))
    hist["test_mse"].append(empirical_risk(state.model, test_ds) if test_ds is not None else float("nan"))
    hist["tau_total"].append(_train_tau(state.model, train_ds.inputs) if train_ds.n >= 2 else float("nan"))
    hist["grad_norm"].append(grad_norm)
    hist["lr"].append(lr)


def _write_metrics_row(path: Path, row: dict, header: bool):
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(METRIC_COLUMNS)
        w.writerow([row[c] if c == "epoch" else repr(float(row[c])) for c in METRIC_COLUMNS])


def save_checkpoint(state: TrainState, path) -> None:
    blob = {"model": model_to_dict(state.model), "optimizer": state.optimizer.state_dict(), "epoch": state.epoch}
    Path(path).write_text(json.dumps(blob) + "\n")


def train(
    train_ds: SequenceDataset,
    test_ds: Optional[SequenceDataset],
    config: TrainConfig,
    model: Sequence[SSMLayerParams],
    out_dir=None,
) -> TrainState:
    """Run ``config.epochs`` epochs of grouped AdamW.

    ``C`` (and the skip weight) use ``lr_main`` with decoupled decay;
    ``A``, ``B`` and ``delta`` use ``lr_state`` without decay.  Row 0 of the
    history is the initial model.  Raises :class:`TrainingDiverged` on a
    non-finite loss or an invalid parameter update.
    """
    state = TrainState(model=list(model), optimizer=AdamW())
    rng = np.random.default_rng(config.seed)
    out = Path(out_dir) if out_dir is not None else None
    metrics_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        metrics_path.unlink(missing_ok=True)

    init_grads = gradients(state.model, train_ds, config)
    _record(state, train_ds, test_ds, gradient_norm(init_grads), _cosine(config.lr_main, 0, config.epochs, config.schedule))
    if metrics_path is not None:
        _write_metrics_row(metrics_path, state.row(), header=True)

    n = train_ds.n
    for epoch in range(config.epochs):
        lrs = {
            "main": _cosine(config.lr_main, epoch, config.epochs, config.schedule),
            "state": _cosine(config.lr_state, epoch, config.epochs, config.schedule),
        }
        order = np.arange(n) if config.batch_size >= n else rng.permutation(n)
        last_norm = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb, yb = train_ds.inputs[idx], train_ds.labels[idx]
            risk, pens, grads = _evaluate(state.model, xb, yb, config, need_grad=True)
            loss = risk + config.lambda_reg * sum(pens)
            last_norm = gradient_norm(grads)
            if not (math.isfinite(loss) and math.isfinite(last_norm)):
                raise TrainingDiverged(f"training diverged at epoch {epoch + 1}: loss={loss}", state)
            try:
                state.model = state.optimizer.step(
                    state.model, grads, lrs, {"main": config.weight_decay_c, "state": 0.0}
                )
            except (ValueError, np.linalg.LinAlgError) as exc:
                raise TrainingDiverged(f"training diverged at epoch {epoch + 1}: {exc}", state) from exc
        state.epoch = epoch + 1
        _record(state, train_ds, test_ds, last_norm, lrs["main"])
        if not math.isfinite(state.history["train_mse"][-1]):
            raise TrainingDiverged(f"training diverged at epoch {state.epoch}: non-finite train loss", state)
        if metrics_path is not None:
            _write_metrics_row(metrics_path, state.row(), header=False)
        if out is not None and config.checkpoint_every and state.epoch % config.checkpoint_every == 0:
            save_checkpoint(state, out / f"checkpoint_{state.epoch:04d}.json")
    return state
