"""Experiment orchestration for the synthetic white-noise study.

Everything here is deterministic in ``(plan, seed)``: seeds are derived from a
fixed table, floats are written with ``repr`` and every output embeds the
config hash, so re-running a command reproduces its files byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .initialization import InitConfig, init_hippo, rescale_all_layers
from .measure import (
    compute_stats,
    measure_model,
    padding_measures,
    tau_continuous,
    tau_profile,
    transfer_discrete,
    transfer_params,
)
from .seqgen import ProcessSpec, sample_batch
from .ssm import SSMLayerParams, causal_conv, compute_kernel, continuous_kernel_grid, forward, model_hash
from .train import TrainConfig, TrainingDiverged, train

__all__ = [
    "ARMS",
    "PROFILES",
    "SCHEMA_VERSION",
    "MATRIX_COLUMNS",
    "SUMMARY_COLUMNS",
    "PROP1_COLUMNS",
    "PADDING_COLUMNS",
    "ExperimentPlan",
    "MatrixResult",
    "TransferReport",
    "run_matrix",
    "run_cell",
    "prop1_sweep",
    "prop1_spread",
    "padding_demo",
    "transfer_demo",
    "summarize",
    "write_csv",
    "write_json",
    "read_csv",
]

SCHEMA_VERSION = 1
ARMS = ("baseline", "rescale_only", "reg_only", "rescale_and_reg")
PROFILES = {
    "paper": {"length": 1000, "m": 64, "epochs": 100},
    "fast": {"length": 128, "m": 16, "epochs": 50},
}

MATRIX_COLUMNS = (
    "schema_version", "config_hash", "b", "arm", "repeat", "data_seed", "init_seed",
    "status", "train_mse", "test_mse", "psi_sq_over_sqrt_n",
)
SUMMARY_COLUMNS = (
    "schema_version", "config_hash", "b", "arm", "n_ok", "n_diverged",
    "train_mse_mean", "train_mse_stderr", "test_mse_mean", "test_mse_stderr",
    "psi_sq_over_sqrt_n_mean", "psi_sq_over_sqrt_n_stderr",
)
PROP1_COLUMNS = ("schema_version", "config_hash", "variant", "b", "length", "mean_abs_output")
PADDING_COLUMNS = ("schema_version", "horizon", "pad", "left", "right")


@dataclass(frozen=True)
class ExperimentPlan:
    """Settings of the synthetic study.

    ``length``, ``m`` and ``epochs`` default to the chosen profile; ``lengths``
    (the sweep grid for the output-scale curves) defaults to ``1 .. 1000``.
    """

    b_values: tuple[float, ...] = (1.0, 0.1, 0.01)
    arms: tuple[str, ...] = ARMS
    repeats: int = 3
    lengths: Optional[tuple[int, ...]] = None
    profile: str = "fast"
    seed: int = 0
    kind: str = "legs_diag"
    length: Optional[int] = None
    m: Optional[int] = None
    epochs: Optional[int] = None
    n_train: int = 100
    n_test: int = 1000
    lambda_reg: float = 0.01
    regularizer: str = "tau"

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}; expected one of {sorted(PROFILES)}")
        prof = PROFILES[self.profile]
        for key in ("length", "m", "epochs"):
            if getattr(self, key) is None:
                object.__setattr__(self, key, prof[key])
        if self.lengths is None:
            object.__setattr__(self, "lengths", tuple(range(1, 1001)))
        object.__setattr__(self, "b_values", tuple(float(b) for b in self.b_values))
        object.__setattr__(self, "arms", tuple(self.arms))
        object.__setattr__(self, "lengths", tuple(int(v) for v in self.lengths))
        if not self.b_values or not self.arms or not self.lengths:
            raise ValueError("b_values, arms and lengths must be non-empty")
        if any(b == 0 for b in self.b_values):
            raise ValueError("bandwidths must be non-zero")
        bad = [a for a in self.arms if a not in ARMS]
        if bad:
            raise ValueError(f"unknown arms {bad}; expected a subset of {ARMS}")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if min(self.lengths) < 1:
            raise ValueError("lengths must be >= 1")
        if self.n_train < 2 or self.n_test < 1:
            raise ValueError("need n_train >= 2 and n_test >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _seed_table(plan: ExperimentPlan, b_index: int, repeat: int) -> tuple[int, int, int]:
    """``(train_seed, test_seed, init_seed)`` for one cell.

    Data seeds depend on ``(b, repeat)`` and are shared by every arm; the
    init seed depends on ``repeat`` only, so all bandwidths see the same
    initial model.
    """
    train_seed, test_seed = np.random.SeedSequence([plan.seed, b_index, repeat]).generate_state(2)
    init_seed = np.random.SeedSequence([plan.seed, repeat]).generate_state(1)[0]
    return int(train_seed), int(test_seed), int(init_seed)


# -- io ---------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns: Sequence[str], rows: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), indent=1, sort_keys=True, allow_nan=False) + "\n")
    return path


# -- training matrix --------------------------------------------------------


@dataclass
class MatrixResult:
    plan: ExperimentPlan
    rows: list[dict]
    summary: list[dict]

    @property
    def n_diverged(self) -> int:
        return sum(r["status"] != "ok" for r in self.rows)

    def cell(self, b: float, arm: str) -> dict:
        for row in self.summary:
            if row["b"] == float(b) and row["arm"] == arm:
                return row
        raise KeyError((b, arm))


def run_cell(plan: ExperimentPlan, b_index: int, arm: str, repeat: int) -> dict:
    """Generate data, initialize, optionally rescale, train and measure one cell."""
    b = plan.b_values[b_index]
    train_seed, test_seed, init_seed = _seed_table(plan, b_index, repeat)
    train_ds = sample_batch(ProcessSpec(length=plan.length, b=b, seed=train_seed), plan.n_train)
    test_ds = sample_batch(ProcessSpec(length=plan.length, b=b, seed=test_seed), plan.n_test)
    model = init_hippo(InitConfig(kind=plan.kind, m=plan.m, seed=init_seed))
    if arm in ("rescale_only", "rescale_and_reg"):
        model, _ = rescale_all_layers(model, train_ds.inputs)
    config = TrainConfig(
        lambda_reg=plan.lambda_reg if arm in ("reg_only", "rescale_and_reg") else 0.0,
        regularizer=plan.regularizer,
        epochs=plan.epochs,
        batch_size=plan.n_train,
        seed=init_seed,
    )
    row = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": plan.config_hash(),
        "b": b,
        "arm": arm,
        "repeat": repeat,
        "data_seed": train_seed,
        "init_seed": init_seed,
    }
    try:
        state = train(train_ds, test_ds, config, model)
    except TrainingDiverged as exc:
        row.update(status="diverged", train_mse=math.nan, test_mse=math.nan, psi_sq_over_sqrt_n=math.nan)
        row["error"] = str(exc)
        return row
    report = measure_model(state.model, train_ds.inputs, train_ds.digest())
    row.update(
        status="ok",
        train_mse=state.history["train_mse"][-1],
        test_mse=state.history["test_mse"][-1],
        psi_sq_over_sqrt_n=report.psi_sq_over_sqrt_n,
    )
    return row


def _mean_stderr(values: list[float]) -> tuple[float, float]:
    if not values:
        return math.nan, math.nan
    arr = np.asarray(values, dtype=float)
    if arr.size == 1:
        return float(arr[0]), 0.0
    return float(arr.mean()), float(arr.std(ddof=1) / math.sqrt(arr.size))


def summarize(rows: Sequence[dict], plan: ExperimentPlan) -> list[dict]:
    """Mean and standard error per ``(b, arm)`` over the converged repeats."""
    out = []
    for b in plan.b_values:
        for arm in plan.arms:
            cell = [r for r in rows if float(r["b"]) == b and r["arm"] == arm]
            ok = [r for r in cell if r["status"] == "ok"]
            entry = {
                "schema_version": SCHEMA_VERSION,
                "config_hash": plan.config_hash(),
                "b": b,
                "arm": arm,
                "n_ok": len(ok),
                "n_diverged": len(cell) - len(ok),
            }
            for key in ("train_mse", "test_mse", "psi_sq_over_sqrt_n"):
                entry[f"{key}_mean"], entry[f"{key}_stderr"] = _mean_stderr([float(r[key]) for r in ok])
            out.append(entry)
    return out


def run_matrix(plan: ExperimentPlan, out_dir=None, workers: int = 1) -> MatrixResult:
    """Every ``(b, arm, repeat)`` cell of the plan.

    A diverged cell is recorded with ``status = diverged`` and the matrix
    keeps going.  With ``workers > 1`` cells run in a process pool; results
    are merged in table order so the output does not depend on scheduling.
    """
    jobs = [(bi, arm, r) for bi in range(len(plan.b_values)) for arm in plan.arms for r in range(plan.repeats)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_cell, [plan] * len(jobs), *zip(*jobs)))
    else:
        rows = [run_cell(plan, *job) for job in jobs]
    result = MatrixResult(plan, rows, summarize(rows, plan))
    if out_dir is not None:
        out = Path(out_dir)
        write_csv(out / "matrix.csv", MATRIX_COLUMNS, rows)
        write_csv(out / "summary.csv", SUMMARY_COLUMNS, result.summary)
        write_json(out / "matrix.json", {"plan": plan.to_dict(), "config_hash": plan.config_hash(),
                                          "schema_version": SCHEMA_VERSION, "rows": rows, "summary": result.summary})
    return result


# -- output-scale sweep -----------------------------------------------------


def prop1_sweep(plan: ExperimentPlan, out_dir=None) -> list[dict]:
    """Mean ``|y_L|`` of a single-layer model at initialization, with and
    without the measure rescaling, for every ``L`` in ``plan.lengths``.

    One pass at the largest length covers all prefixes: the layer is causal,
    so ``y_L`` of a length-``L`` input is position ``L - 1`` of the long
    output, and the measure of each prefix comes from :func:`tau_profile`.
    Curves are averaged over ``plan.repeats`` initial models.
    """
    l_max = max(plan.lengths)
    idx = np.asarray(plan.lengths) - 1
    chash = plan.config_hash()
    rows = []
    for bi, b in enumerate(plan.b_values):
        raw = np.zeros(idx.size)
        scaled = np.zeros(idx.size)
        for r in range(plan.repeats):
            train_seed, test_seed, init_seed = _seed_table(plan, bi, r)
            fit = sample_batch(ProcessSpec(length=l_max, b=b, seed=train_seed), plan.n_train).inputs
            ev = sample_batch(ProcessSpec(length=l_max, b=b, seed=test_seed), plan.n_test).inputs
            layer = init_hippo(InitConfig(kind=plan.kind, m=plan.m, seed=init_seed))[0]
            kernel = compute_kernel(layer, l_max)
            y = forward(layer, ev, kernel)  # (n, L, 1)
            tau = tau_profile(kernel, compute_stats(fit))  # (L,)
            y_last = np.abs(y[:, idx, 0])
            raw += y_last.mean(axis=0)
            scaled += (y_last / np.sqrt(tau[idx])).mean(axis=0)
        for variant, curve in (("unrescaled", raw), ("rescaled", scaled)):
            for L, v in zip(plan.lengths, curve / plan.repeats):
                rows.append({"schema_version": SCHEMA_VERSION, "config_hash": chash,
                             "variant": variant, "b": b, "length": L, "mean_abs_output": v})
    if out_dir is not None:
        write_csv(Path(out_dir) / "prop1.csv", PROP1_COLUMNS, rows)
    return rows


def prop1_spread(rows: Sequence[dict], variant: str, length: int) -> float:
    """Ratio of the largest to the smallest mean ``|y_L|`` across bandwidths."""
    vals = [float(r["mean_abs_output"]) for r in rows if r["variant"] == variant and int(r["length"]) == length]
    if not vals:
        raise KeyError((variant, length))
    return max(vals) / min(vals)


# -- analytic demos ---------------------------------------------------------


def padding_demo(
    params: SSMLayerParams,
    pads: Sequence[float],
    horizon: float = 10.0,
    process: Optional[ProcessSpec] = None,
    out_dir=None,
) -> list[dict]:
    """Left / right zero-padding measures of a process on ``[0, horizon]`` for
    each padding length in ``pads``."""
    process = process or ProcessSpec()
    rows = []
    for pad in pads:
        left, right = padding_measures(params, process.mean_fn, process.var_fn, horizon, pad=pad)
        rows.append({"schema_version": SCHEMA_VERSION, "horizon": float(horizon), "pad": float(pad),
                     "left": left, "right": right})
    if out_dir is not None:
        write_csv(Path(out_dir) / "padding.csv", PADDING_COLUMNS, rows)
    return rows


@dataclass
class TransferReport:
    factor: int
    step: float
    horizon: float
    output_deviation: float
    measure_deviation: float
    tau_original: float
    tau_transferred: float
    model_hash: str = ""
    schema_version: int = SCHEMA_VERSION
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _smooth_signal(t: np.ndarray) -> np.ndarray:
    return 1.0 + np.sin(0.7 * t) + 0.5 * np.cos(0.23 * t + 0.4)


def _trapezoid_conv(rho: np.ndarray, x: np.ndarray, h: float) -> np.ndarray:
    """``int_0^t rho(t - s) x(s) ds`` at every grid point by the trapezoid rule."""
    full = causal_conv(rho, x)
    return h * (full - 0.5 * (rho * x[:1] + rho[:1] * x))


def transfer_demo(
    params: SSMLayerParams,
    factor: int = 2,
    step: float = 2.5e-4,
    horizon: float = 10.0,
    process: Optional[ProcessSpec] = None,
    out_dir=None,
) -> TransferReport:
    """Zero-shot transfer of a layer to ``1 / factor`` of the sampling rate.

    Output check: a smooth signal ``x`` is sampled every ``step``; the
    original kernel is convolved with it on that grid, and the transferred
    parameters (kernel read at ``factor * u``) with the every-``factor``-th
    subsequence, also with grid spacing ``step`` in the transferred time
    unit.  The maximum gap over the shared time points is reported.  Measure
    check: the continuous measure on ``[0, horizon]`` against the transferred
    one on ``[0, horizon / factor]``.  The gap between the two ZOH
    realizations (timescale ``step`` versus ``factor * step``) is reported
    in ``extra``; it is first order in ``step``.
    """
    if factor < 1 or int(factor) != factor:
        raise ValueError("factor must be a positive integer")
    factor = int(factor)
    process = process or ProcessSpec()
    n_coarse = int(round(horizon / (step * factor))) + 1
    t = np.arange((n_coarse - 1) * factor + 1) * step
    x_fine = np.repeat(_smooth_signal(t)[:, None], params.d, axis=1)
    x_coarse = x_fine[::factor]

    moved = transfer_params(params, factor)
    y_orig = _trapezoid_conv(continuous_kernel_grid(params, step, t.size), x_fine, step)
    y_new = _trapezoid_conv(continuous_kernel_grid(moved, factor * step, n_coarse), x_coarse, step)
    out_dev = float(np.max(np.abs(y_orig[::factor] - y_new)))

    fine = params.replace(delta=np.full(params.d, float(step)))
    zoh_dev = float(np.max(np.abs(forward(fine, x_fine)[::factor] - forward(transfer_discrete(fine, factor), x_coarse))))

    tau0 = tau_continuous(params, process.mean_fn, process.var_fn, horizon)
    tau1 = tau_continuous(moved, process.mean_fn, process.var_fn, horizon / factor, time_scale=float(factor))
    report = TransferReport(
        factor=factor,
        step=float(step),
        horizon=float(horizon),
        output_deviation=out_dev,
        measure_deviation=abs(tau1 - tau0),
        tau_original=tau0,
        tau_transferred=tau1,
        model_hash=model_hash([params]),
        extra={"zoh_output_deviation": zoh_dev},
    )
    if out_dir is not None:
        write_json(Path(out_dir) / "transfer.json", report.to_dict())
    return report


# -- reports ----------------------------------------------------------------

REPORT_COLUMNS = (
    "schema_version", "arm", "b", "n_ok", "n_diverged",
    "train_mse_mean", "train_mse_stderr", "test_mse_mean", "test_mse_stderr",
    "psi_sq_over_sqrt_n_mean", "psi_sq_over_sqrt_n_stderr",
)


def report_table(rows: Sequence[dict]) -> list[dict]:
    """Aggregate per-cell matrix rows (possibly from several runs) by arm and b."""
    b_order: list[float] = []
    for r in rows:
        b = float(r["b"])
        if b not in b_order:
            b_order.append(b)
    arms = [a for a in ARMS if any(r["arm"] == a for r in rows)]
    out = []
    for arm in arms:
        for b in b_order:
            cell = [r for r in rows if r["arm"] == arm and float(r["b"]) == b]
            if not cell:
                continue
            ok = [r for r in cell if r["status"] == "ok"]
            entry = {"schema_version": SCHEMA_VERSION, "arm": arm, "b": b, "n_ok": len(ok),
                     "n_diverged": len(cell) - len(ok)}
            for key in ("train_mse", "test_mse", "psi_sq_over_sqrt_n"):
                entry[f"{key}_mean"], entry[f"{key}_stderr"] = _mean_stderr([float(r[key]) for r in ok])
            out.append(entry)
    return out


def report_markdown(table: Sequence[dict]) -> str:
    b_order: list[float] = []
    for r in table:
        if r["b"] not in b_order:
            b_order.append(r["b"])
    lines = []
    for key, title in (("train_mse", "train MSE"), ("test_mse", "test MSE"),
                       ("psi_sq_over_sqrt_n", "psi^2/sqrt(n)")):
        lines.append(f"### {title}\n")
        lines.append("| arm | " + " | ".join(f"b={b:g}" for b in b_order) + " |")
        lines.append("|---|" + "---|" * len(b_order))
        for arm in dict.fromkeys(r["arm"] for r in table):
            cells = []
            for b in b_order:
                hit = [r for r in table if r["arm"] == arm and r["b"] == b]
                cells.append(f"{hit[0][key + '_mean']:.3g} ± {hit[0][key + '_stderr']:.2g}" if hit else "")
            lines.append(f"| {arm} | " + " | ".join(cells) + " |")
        lines.append("")
    return "\n".join(lines)
