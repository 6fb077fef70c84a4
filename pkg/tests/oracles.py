"""Slow, independent reference implementations used only by the tests.

None of these share code with the package: matrix exponentials are plain
Taylor series, convolutions and measures are explicit loops, and gradients
are central differences.
"""

import math

import numpy as np

from ssmgen.train import input_stats, regularized_risk


def taylor_expm(x, terms=60):
    """``exp(x)`` by Taylor series after scaling to norm < 0.5, then squaring."""
    x = np.asarray(x, dtype=complex if np.iscomplexobj(x) else float)
    norm = np.linalg.norm(x, 1)
    s = max(0, int(math.ceil(math.log2(norm / 0.5)))) if norm > 0.5 else 0
    y = x / 2**s
    out = np.eye(x.shape[0], dtype=x.dtype)
    term = np.eye(x.shape[0], dtype=x.dtype)
    for k in range(1, terms):
        term = term @ y / k
        out = out + term
    for _ in range(s):
        out = out @ out
    return out


def zoh_series(a, b, delta, terms=80):
    """``(exp(dA), int_0^d exp(sA) ds B)`` by Taylor series (no inverse of A)."""
    a = np.asarray(a)
    m = a.shape[0]
    abar = taylor_expm(delta * a)
    # sum_k d^{k+1} A^k / (k+1)!
    acc = np.zeros((m, m), dtype=abar.dtype)
    term = np.eye(m, dtype=abar.dtype) * delta
    for k in range(terms):
        acc = acc + term
        term = term @ (delta * a) / (k + 2)
    return abar, acc @ np.asarray(b)


def dense_kernel(a, b, c, delta, length):
    """``Re(c Abar^j Bbar)`` by repeated dense multiplication, one channel per row of ``c``."""
    c = np.atleast_2d(c)
    out = np.zeros((length, c.shape[0]))
    for ch in range(c.shape[0]):
        abar, bbar = zoh_series(a, b, delta[ch])
        state = bbar.copy()
        for j in range(length):
            out[j, ch] = np.real(c[ch] @ state)
            state = abar @ state
    return out


def direct_conv(k, x):
    """``y[t] = sum_{j<=t} k[j] x[t-j]`` per channel, by explicit loops."""
    length, d = x.shape
    y = np.zeros((length, d))
    for t in range(length):
        for j in range(t + 1):
            y[t] += k[j] * x[t - j]
    return y


def tau_double_sum(k, mu, var):
    """Measure from its definition with explicit sums over lags and channels."""
    length, d = k.shape
    total = 0.0
    for ch in range(d):
        s_abs = 0.0
        s_mu = 0.0
        for j in range(length):
            s_abs += abs(k[j, ch]) * math.sqrt(var[length - 1 - j, ch])
            s_mu += k[j, ch] * mu[length - 1 - j, ch]
        total += (s_abs + abs(s_mu)) ** 2
    return total / d


def fd_gradients(model, dataset, config, step=1e-5):
    """Central differences of the regularized risk, statistics held fixed.

    Complex parameters are returned as ``d/dRe + 1j d/dIm`` to match the
    package's convention.
    """
    stats = input_stats(model, dataset.inputs)

    def f(mod):
        return regularized_risk(mod, dataset, config, stats=stats)[0]

    out = []
    for i, p in enumerate(model):
        keys = ["c", "b", "delta"] + (["a_log_re", "a_im"] if p.repr == "diag" else ["a"])
        if p.d_skip is not None:
            keys.append("d_skip")
        grads = {}
        for key in keys:
            base = np.array(getattr(p, key))
            parts = [1.0, 1j] if np.iscomplexobj(base) else [1.0]
            g = np.zeros(base.shape, dtype=base.dtype)
            for unit in parts:
                for idx in np.ndindex(base.shape):
                    h = step * base[idx] if key == "delta" else step
                    vals = []
                    for sgn in (1, -1):
                        arr = base.copy()
                        arr[idx] = arr[idx] + sgn * h * unit
                        mod = list(model)
                        mod[i] = p.replace(**{key: arr})
                        vals.append(f(mod))
                    g[idx] += unit * (vals[0] - vals[1]) / (2 * h)
            grads[key] = g
        out.append(grads)
    return out


def rel_error(analytic, fd):
    """Per-array ``max |a - f| / max |f|`` (absolute when ``f`` vanishes)."""
    worst = 0.0
    for ga, gf in zip(analytic, fd):
        for key, f in gf.items():
            a = np.asarray(ga[key])
            scale = float(np.max(np.abs(f)))
            err = float(np.max(np.abs(a - f)))
            worst = max(worst, err / scale if scale > 1e-8 else err)
    return worst
