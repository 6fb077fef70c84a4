"""Linear state-space layers: parameters, ZOH discretization, kernels and the
FFT convolution forward pass.

A layer maps a real sequence of shape ``(L, d)`` to another ``(L, d)`` sequence.
The state matrix ``A`` and input map ``B`` are shared across the ``d`` feature
channels; the output map ``C`` (``d x m``), the timescale ``delta`` and the
optional skip weight are per channel.  Two representations are supported:

* ``diag`` -- complex diagonal ``A`` with ``Re(A) = -exp(a_log_re)`` and
  ``Im(A) = a_im``; ``B`` and ``C`` are complex and the output is the real part
  of the complex inner product.
* ``full`` -- real dense ``A`` (e.g. HiPPO-LegS); ``B`` and ``C`` are real.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np
from scipy.linalg import expm

__all__ = [
    "SSMLayerParams",
    "DiscreteKernel",
    "SingularStateMatrixError",
    "discretize_zoh",
    "compute_kernel",
    "causal_conv",
    "forward",
    "forward_model",
    "continuous_kernel",
    "continuous_kernel_grid",
    "params_to_dict",
    "params_from_dict",
    "model_to_dict",
    "model_from_dict",
    "save_model",
    "load_model",
    "model_hash",
]


class SingularStateMatrixError(ValueError):
    """Raised when the state matrix cannot be inverted for ZOH."""


def _frozen(x, dtype) -> np.ndarray:
    arr = np.array(x, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class SSMLayerParams:
    """Continuous-time parameters of one SSM layer.

    Use :meth:`diagonal` or :meth:`full` rather than the raw constructor.
    """

    repr: str
    b: np.ndarray
    c: np.ndarray
    delta: np.ndarray
    a_log_re: Optional[np.ndarray] = None
    a_im: Optional[np.ndarray] = None
    a: Optional[np.ndarray] = None
    d_skip: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.repr == "diag":
            if self.a_log_re is None or self.a_im is None:
                raise ValueError("diag layer needs a_log_re and a_im")
            vec_dtype = np.complex128
            object.__setattr__(self, "a_log_re", _frozen(self.a_log_re, np.float64))
            object.__setattr__(self, "a_im", _frozen(self.a_im, np.float64))
            object.__setattr__(self, "a", None)
        elif self.repr == "full":
            if self.a is None:
                raise ValueError("full layer needs a")
            vec_dtype = np.float64
            object.__setattr__(self, "a", _frozen(self.a, np.float64))
            object.__setattr__(self, "a_log_re", None)
            object.__setattr__(self, "a_im", None)
        else:
            raise ValueError(f"unknown repr {self.repr!r}")

        object.__setattr__(self, "b", _frozen(self.b, vec_dtype))
        object.__setattr__(self, "c", _frozen(np.atleast_2d(self.c), vec_dtype))
        object.__setattr__(self, "delta", _frozen(np.atleast_1d(self.delta), np.float64))
        if self.d_skip is not None:
            object.__setattr__(self, "d_skip", _frozen(np.atleast_1d(self.d_skip), np.float64))

        m, d = self.m, self.d
        if self.repr == "diag" and self.a_im.shape != (m,):
            raise ValueError("a_log_re and a_im must have the same length")
        if self.repr == "full":
            if self.a.shape != (m, m):
                raise ValueError(f"a must be square, got {self.a.shape}")
            if not np.all(np.isfinite(self.a)):
                raise ValueError("a has non-finite entries")
            if np.max(np.linalg.eigvals(self.a).real) >= 0:
                raise ValueError("state matrix has an eigenvalue with non-negative real part")
        if self.b.shape != (m,):
            raise ValueError(f"b must have shape ({m},), got {self.b.shape}")
        if self.c.shape != (d, m):
            raise ValueError(f"c must have shape ({d}, {m}), got {self.c.shape}")
        if self.delta.shape != (d,) or not np.all(self.delta > 0):
            raise ValueError("delta must be positive with one entry per channel")
        if self.d_skip is not None and self.d_skip.shape != (d,):
            raise ValueError("d_skip must have one entry per channel")

    @classmethod
    def diagonal(cls, a_log_re, a_im, b, c, delta, d_skip=None) -> "SSMLayerParams":
        return cls("diag", b=b, c=c, delta=delta, a_log_re=a_log_re, a_im=a_im, d_skip=d_skip)

    @classmethod
    def full(cls, a, b, c, delta, d_skip=None) -> "SSMLayerParams":
        return cls("full", b=b, c=c, delta=delta, a=a, d_skip=d_skip)

    @property
    def m(self) -> int:
        return self.a_log_re.shape[0] if self.repr == "diag" else self.a.shape[0]

    @property
    def d(self) -> int:
        return self.c.shape[0]

    @property
    def eigenvalues(self) -> np.ndarray:
        if self.repr == "diag":
            return -np.exp(self.a_log_re) + 1j * self.a_im
        return np.linalg.eigvals(self.a)

    @property
    def diag_a(self) -> np.ndarray:
        """Complex diagonal of A (diag layers only)."""
        return -np.exp(self.a_log_re) + 1j * self.a_im

    def replace(self, **changes) -> "SSMLayerParams":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True, eq=False)
class DiscreteKernel:
    """Real convolution taps, shape ``(L, d)``."""

    values: np.ndarray

    def __post_init__(self):
        vals = _frozen(self.values, np.float64)
        if vals.ndim != 2:
            raise ValueError("kernel values must be (L, d)")
        if not np.all(np.isfinite(vals)):
            raise ValueError("kernel has non-finite taps")
        object.__setattr__(self, "values", vals)

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def scaled(self, factor: float) -> "DiscreteKernel":
        return DiscreteKernel(self.values * factor)


def discretize_zoh(params: SSMLayerParams):
    """Zero-order-hold discretization, one system per channel.

    Returns ``(A_bar, B_bar, C_bar)``.  For ``diag`` layers these are complex
    arrays of shape ``(d, m)`` (``A_bar`` holds the diagonal); for ``full``
    layers ``A_bar`` is ``(d, m, m)`` and ``B_bar``, ``C_bar`` are ``(d, m)``.
    """
    dt = params.delta
    if params.repr == "diag":
        lam = params.diag_a
        if np.min(np.abs(lam)) < 1e-300:
            raise SingularStateMatrixError("non-invertible state matrix")
        a_bar = np.exp(dt[:, None] * lam[None, :])
        b_bar = (a_bar - 1.0) / lam[None, :] * params.b[None, :]
        return a_bar, b_bar, params.c.copy()

    a = params.a
    if np.linalg.cond(a) > 1.0 / np.finfo(float).eps:
        raise SingularStateMatrixError("non-invertible state matrix")
    a_inv_b = np.linalg.solve(a, params.b)
    eye = np.eye(params.m)
    a_bar = np.stack([expm(t * a) for t in dt])
    b_bar = np.einsum("dij,j->di", a_bar - eye, a_inv_b)
    return a_bar, b_bar, params.c.copy()


def _diag_kernel(params: SSMLayerParams, length: int) -> np.ndarray:
    lam = params.diag_a
    dt_lam = params.delta[:, None] * lam[None, :]  # (d, m)
    _, b_bar, c_bar = discretize_zoh(params)
    # Vandermonde: A_bar^j = exp(j * dt * lam)
    powers = np.exp(dt_lam[:, :, None] * np.arange(length))  # (d, m, L)
    k = np.einsum("dm,dml->ld", c_bar * b_bar, powers)
    return k.real


def _full_kernel(params: SSMLayerParams, length: int) -> np.ndarray:
    a_bar, b_bar, c_bar = discretize_zoh(params)
    out = np.empty((length, params.d))
    for ch in range(params.d):
        h = b_bar[ch].copy()
        for j in range(length):
            out[j, ch] = c_bar[ch] @ h
            h = a_bar[ch] @ h
    return out


def compute_kernel(params: SSMLayerParams, length: int) -> DiscreteKernel:
    """Discrete kernel ``k_j = Re(C_bar A_bar^j B_bar)`` for ``j < length``."""
    if length < 1:
        raise ValueError("kernel length must be >= 1")
    if params.repr == "diag":
        return DiscreteKernel(_diag_kernel(params, length))
    return DiscreteKernel(_full_kernel(params, length))


def fft_size(length: int) -> int:
    return 1 << int(np.ceil(np.log2(max(2 * length, 2))))


def causal_conv(k: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Channelwise causal convolution ``y_t = sum_{j<=t} k_j x_{t-j}``.

    ``k`` is ``(L, d)``; ``x`` is ``(..., L, d)``.
    """
    length = x.shape[-2]
    if k.shape[0] != length:
        raise ValueError(f"kernel length {k.shape[0]} != sequence length {length}")
    n = fft_size(length)
    kf = np.fft.rfft(k, n=n, axis=0)
    xf = np.fft.rfft(x, n=n, axis=-2)
    return np.fft.irfft(xf * kf, n=n, axis=-2)[..., :length, :]


def forward(params: SSMLayerParams, x: np.ndarray, kernel: Optional[DiscreteKernel] = None) -> np.ndarray:
    """Apply one layer to ``x`` of shape ``(L, d)`` or ``(n, L, d)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-1] != params.d:
        raise ValueError(f"expected trailing feature dim {params.d}, got shape {x.shape}")
    length = x.shape[-2]
    if kernel is None:
        kernel = compute_kernel(params, length)
    elif kernel.length != length:
        raise ValueError("kernel length does not match input length")
    y = causal_conv(kernel.values, x)
    if params.d_skip is not None:
        y = y + params.d_skip * x
    return y


def forward_model(model, x: np.ndarray, return_all: bool = False):
    """Run a stack of layers; with ``return_all`` also return every layer input."""
    inputs = []
    h = np.asarray(x, dtype=np.float64)
    for layer in model:
        inputs.append(h)
        h = forward(layer, h)
    return (h, inputs) if return_all else h


def continuous_kernel(params: SSMLayerParams, s) -> np.ndarray:
    """``Re(C exp(A s) B)`` per channel; returns shape ``s.shape + (d,)``."""
    s = np.asarray(s, dtype=np.float64)
    if np.any(s < 0):
        raise ValueError("continuous kernel is defined for s >= 0")
    if params.repr == "diag":
        lam = params.diag_a
        cb = params.c * params.b[None, :]  # (d, m)
        e = np.exp(s[..., None] * lam)  # (..., m)
        return np.einsum("...m,dm->...d", e, cb).real
    flat = s.ravel()
    out = np.empty((flat.size, params.d))
    for i, si in enumerate(flat):
        out[i] = params.c @ (expm(si * params.a) @ params.b)
    return out.reshape(s.shape + (params.d,))


def continuous_kernel_grid(params: SSMLayerParams, h: float, n: int) -> np.ndarray:
    """``rho(i h)`` for ``i = 0..n-1``, shape ``(n, d)``.

    Full matrices use one ``expm(A h)`` and repeated products, which is exact
    up to rounding on a uniform grid.
    """
    if params.repr == "diag":
        return continuous_kernel(params, h * np.arange(n))
    step = expm(h * params.a)
    block = 64
    powers = [np.eye(params.m)]
    for _ in range(block - 1):
        powers.append(step @ powers[-1])
    powers = np.stack(powers)  # (block, m, m)
    jump = step @ powers[-1]
    out = np.empty((n, params.d))
    v = params.b.copy()
    for start in range(0, n, block):
        stop = min(start + block, n)
        states = powers[: stop - start] @ v  # (block, m)
        out[start:stop] = states @ params.c.T
        v = jump @ v
    return out


# -- serialization ---------------------------------------------------------


def params_to_dict(p: SSMLayerParams) -> dict[str, Any]:
    out: dict[str, Any] = {"m": p.m, "d": p.d, "repr": p.repr}
    if p.repr == "diag":
        out["a_log_re"] = p.a_log_re.tolist()
        out["a_im"] = p.a_im.tolist()
    else:
        out["a"] = p.a.tolist()
    b = np.asarray(p.b, dtype=np.complex128)
    c = np.asarray(p.c, dtype=np.complex128)
    out["b_re"] = b.real.tolist()
    out["b_im"] = b.imag.tolist()
    out["c_re"] = c.real.tolist()
    out["c_im"] = c.imag.tolist()
    if p.d_skip is not None:
        out["d_skip"] = p.d_skip.tolist()
    out["delta"] = p.delta.tolist()
    return out


def params_from_dict(obj: dict[str, Any]) -> SSMLayerParams:
    rep = obj.get("repr", "diag")
    b = np.asarray(obj["b_re"], dtype=float)
    c = np.asarray(obj["c_re"], dtype=float)
    if rep == "diag":
        b = b + 1j * np.asarray(obj.get("b_im", np.zeros_like(b)), dtype=float)
        c = c + 1j * np.asarray(obj.get("c_im", np.zeros_like(c)), dtype=float)
        p = SSMLayerParams.diagonal(obj["a_log_re"], obj["a_im"], b, c, obj["delta"], obj.get("d_skip"))
    else:
        p = SSMLayerParams.full(obj["a"], b, c, obj["delta"], obj.get("d_skip"))
    if p.m != obj.get("m", p.m) or p.d != obj.get("d", p.d):
        raise ValueError("declared m/d do not match array shapes")
    return p


def model_to_dict(model) -> dict[str, Any]:
    return {"layers": [params_to_dict(p) for p in model]}


def model_from_dict(obj: dict[str, Any]) -> list[SSMLayerParams]:
    if "layers" in obj:
        return [params_from_dict(o) for o in obj["layers"]]
    if "model" in obj:  # checkpoint
        return model_from_dict(obj["model"])
    return [params_from_dict(obj)]


def save_model(model, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=1)
        fh.write("\n")


def load_model(path) -> list[SSMLayerParams]:
    with open(path) as fh:
        return model_from_dict(json.load(fh))


def model_hash(model) -> str:
    blob = json.dumps(model_to_dict(model), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
