"""Signal vectors, lattices and Markovian embeddings of memory-dependent rules.

Rules are called with the index ``n`` of the step they produce, the real
value ``x`` of the measurement outcome and the current signal. A rule that
maps ``y_{n-1}`` to ``y_n`` is therefore called as ``f(n, x, y_{n-1})``.
"""
import math
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .backend import kernels

__all__ = [
    "SignalLattice",
    "NonMarkovianRule",
    "UpdateRule",
    "MomentumParams",
    "markovian_rule",
    "markovian_embed_momentum",
    "markovian_embed_history",
    "reconstruct_history",
    "project_to_lattice",
    "embedded_trajectory",
    "history_buffer_trajectory",
    "kernel_integral",
    "kernel_limit_check",
    "kernel_convergence_table",
]

DEFAULT_LATTICE_CAP = 10**7


@dataclass(frozen=True, eq=False)
class SignalLattice:
    """Uniform rectangular grid ``min + k * step`` for each signal component.

    The top grid point of a component is the last one not above ``max``.
    """

    min: np.ndarray
    max: np.ndarray
    step: np.ndarray
    clip_tol: float = 1e-9

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.min, dtype=np.float64)).copy()
        hi = np.atleast_1d(np.asarray(self.max, dtype=np.float64)).copy()
        st = np.atleast_1d(np.asarray(self.step, dtype=np.float64)).copy()
        if not (lo.shape == hi.shape == st.shape and lo.ndim == 1 and len(lo) > 0):
            raise ValueError("lattice min, max and step need one entry per component")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(np.isfinite(st))):
            raise ValueError("lattice bounds must be finite")
        if np.any(st <= 0):
            raise ValueError("lattice step must be positive")
        if np.any(lo >= hi):
            raise ValueError("lattice min must be below max")
        counts = np.floor((hi - lo) / st + 1e-9).astype(np.int64) + 1
        for name, a in (("min", lo), ("max", hi), ("step", st), ("counts", counts)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @classmethod
    def from_counts(cls, lo, step, counts):
        lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
        step = np.atleast_1d(np.asarray(step, dtype=np.float64))
        counts = np.atleast_1d(np.asarray(counts))
        return cls(lo, lo + (counts - 1) * step, step)

    @property
    def dim(self):
        return len(self.min)

    @property
    def size(self):
        return math.prod(int(c) for c in self.counts)

    @property
    def top(self):
        return self.min + (self.counts - 1) * self.step

    def check_size(self, cap=DEFAULT_LATTICE_CAP):
        if self.size > cap:
            raise ValueError(f"lattice has {self.size} points, above the cap of {cap}")

    def point(self, index):
        return self.min + np.asarray(index, dtype=np.float64) * self.step

    def points(self, indices):
        return self.min + np.asarray(indices, dtype=np.float64) * self.step

    def project(self, raw):
        """Nearest lattice index of one point and whether it was clipped."""
        raw = np.asarray(raw, dtype=np.float64).reshape(1, -1)
        idx, clipped = self.project_many(raw)
        return tuple(int(i) for i in idx[0]), bool(clipped[0])

    def project_many(self, raw):
        raw = np.ascontiguousarray(raw, dtype=np.float64)
        if raw.ndim != 2 or raw.shape[1] != self.dim:
            raise ValueError(f"expected points of dimension {self.dim}, got shape {raw.shape}")
        if not np.all(np.isfinite(raw)):
            raise ValueError("cannot project non-finite signal values")
        return kernels.project(raw, self.min, self.step, self.counts, self.clip_tol)

    def index_of(self, y):
        """Index of a point that must already lie on the lattice."""
        index, clipped = self.project(y)
        if clipped or not np.allclose(self.point(index), y, rtol=0, atol=1e-9 * float(self.step.max())):
            raise KeyError(f"signal point {np.asarray(y).tolist()} is not on the lattice")
        return index

    def flat(self, indices):
        """Row-major linear key of each index row; sorts like the index tuples."""
        indices = np.asarray(indices, dtype=np.int64).reshape(-1, self.dim)
        return np.ravel_multi_index(indices.T, tuple(int(c) for c in self.counts))

    def unflat(self, keys):
        return np.stack(np.unravel_index(np.asarray(keys, dtype=np.int64), tuple(int(c) for c in self.counts)), axis=1)

    def to_dict(self):
        return {"min": self.min.tolist(), "max": self.max.tolist(), "step": self.step.tolist()}


def project_to_lattice(lat, raw):
    """Clamp to the lattice box and round to the nearest grid point.

    Exact halves round toward negative infinity. Returns ``(index, clipped)``.
    """
    return lat.project(raw)


class UpdateRule:
    """Markovian signal update ``y_n = f_n(x_n, y_{n-1})`` on D components.

    ``batch(n, x, Y)`` evaluates many signal points (rows of ``Y``) sharing
    one outcome; without it the scalar function is looped.
    """

    def __init__(self, dim, func, batch=None, name=None):
        self.dim = int(dim)
        self.func = func
        self._batch = batch
        self.name = name or getattr(func, "__name__", "rule")

    def __call__(self, n, x, y):
        out = np.asarray(self.func(n, x, np.asarray(y, dtype=np.float64)), dtype=np.float64).reshape(-1)
        if out.shape != (self.dim,):
            raise ValueError(f"rule {self.name} returned {out.shape}, expected ({self.dim},)")
        if not np.all(np.isfinite(out)):
            raise ValueError(f"rule {self.name} returned non-finite values")
        return out

    def batch(self, n, x, ys):
        ys = np.asarray(ys, dtype=np.float64)
        if self._batch is None:
            return np.array([self(n, x, y) for y in ys]).reshape(len(ys), self.dim)
        out = np.asarray(self._batch(n, x, ys), dtype=np.float64)
        if out.shape != ys.shape:
            raise ValueError(f"rule {self.name} batch returned {out.shape}, expected {ys.shape}")
        return out

    def __repr__(self):
        return f"UpdateRule({self.name!r}, dim={self.dim})"


class NonMarkovianRule:
    """``s_n = g_n(x_n, s_{n-1}, ..., s_{n-1-T})`` with memory depth ``T``.

    ``g(n, x, history)`` receives the history with the newest value first in
    the last axis. When ``vectorized`` is true, ``g`` must also accept a
    ``(N, T+1)`` history array and return ``N`` values.
    """

    def __init__(self, depth, g, vectorized=True, name=None):
        if depth < 0:
            raise ValueError("memory depth must be non-negative")
        self.depth = int(depth)
        self.g = g
        self.vectorized = vectorized
        self.name = name or getattr(g, "__name__", "g")

    def __call__(self, n, x, history):
        return float(self.g(n, x, np.asarray(history, dtype=np.float64)))

    def many(self, n, x, histories):
        if self.vectorized:
            out = np.asarray(self.g(n, x, histories), dtype=np.float64)
            return np.broadcast_to(out, (len(histories),)).copy()
        return np.array([self(n, x, h) for h in histories], dtype=np.float64)


@dataclass(frozen=True)
class MomentumParams:
    """Momentum weight ``beta``; ``gamma``/``delta_t`` are only used by the continuum check."""

    beta: float
    gamma: float = 0.0
    delta_t: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.gamma < 0 or not self.delta_t > 0:
            raise ValueError("gamma must be >= 0 and delta_t > 0")

    @classmethod
    def from_rate(cls, gamma, delta_t):
        """``beta = 1 - gamma * delta_t``."""
        if gamma * delta_t >= 1.0:
            raise ValueError("gamma * delta_t must stay below 1")
        return cls(1.0 - gamma * delta_t, gamma, delta_t)


def markovian_rule(g, name=None):
    """One-component rule ``s_n = g(n, x, s_{n-1})``; ``g`` must broadcast over arrays."""

    def f(n, x, y):
        return np.array([g(n, x, y[0])])

    def batch(n, x, ys):
        s = np.asarray(g(n, x, ys[:, 0]), dtype=np.float64)
        return np.broadcast_to(s, (len(ys),)).reshape(-1, 1).copy()

    return UpdateRule(1, f, batch, name=name or getattr(g, "__name__", "markovian"))


def markovian_embed_momentum(g, params):
    """Embed the momentum update on ``y = (s, m)``.

    ``m_n = beta m_{n-1} + (1 - beta) g(n, x, s_{n-1})`` and
    ``s_n = s_{n-1} + m_n``. ``g`` must broadcast over arrays of ``s``.
    """
    beta = float(params.beta)
    keep = 1.0 - beta

    def f(n, x, y):
        m = beta * y[1] + keep * g(n, x, y[0])
        return np.array([y[0] + m, m])

    def batch(n, x, ys):
        m = beta * ys[:, 1] + keep * np.asarray(g(n, x, ys[:, 0]), dtype=np.float64)
        return np.stack([ys[:, 0] + m, m], axis=1)

    return UpdateRule(2, f, batch, name=f"momentum(beta={beta})")


def reconstruct_history(y):
    """Recover ``(s_n, s_{n-1}, ..., s_{n-T})`` from ``(s_n, m^(1), ..., m^(T))``."""
    y = np.asarray(y, dtype=np.float64)
    out = np.empty_like(y)
    out[..., 0] = y[..., 0]
    out[..., 1:] = y[..., :1] - np.cumsum(y[..., 1:], axis=-1)
    return out


def markovian_embed_history(rule):
    """Embed a depth-``T`` rule into ``y = (s, m^(1), ..., m^(T))``.

    ``m^(1)`` is the newest increment and ``m^(k)`` is ``m^(k-1)`` one step
    earlier, so the past values are recovered by :func:`reconstruct_history`.
    """
    depth = rule.depth

    def f(n, x, y):
        s_next = rule(n, x, reconstruct_history(y))
        out = np.empty(depth + 1)
        out[0] = s_next
        if depth:
            out[1] = s_next - y[0]
            out[2:] = y[1:depth]
        return out

    def batch(n, x, ys):
        s_next = rule.many(n, x, reconstruct_history(ys))
        out = np.empty_like(ys)
        out[:, 0] = s_next
        if depth:
            out[:, 1] = s_next - ys[:, 0]
            out[:, 2:] = ys[:, 1:depth]
        return out

    return UpdateRule(depth + 1, f, batch, name=f"history(T={depth}, {rule.name})")


def embedded_trajectory(rule, y0, outcomes, start=1):
    """Iterate ``rule`` without lattice projection; row ``k`` is ``y_k``."""
    y = np.asarray(y0, dtype=np.float64).copy()
    out = np.empty((len(outcomes) + 1, rule.dim))
    out[0] = y
    for k, x in enumerate(outcomes):
        y = rule(start + k, x, y)
        out[k + 1] = y
    return out


def history_buffer_trajectory(rule, s0, outcomes, start=1):
    """Direct recursion of a depth-``T`` rule on a buffer of past values.

    The buffer starts filled with ``s0``. Returns ``s_0, s_1, ...``.
    """
    buf = deque([float(s0)] * (rule.depth + 1), maxlen=rule.depth + 1)
    out = np.empty(len(outcomes) + 1)
    out[0] = s0
    for k, x in enumerate(outcomes):
        s = rule(start + k, x, np.array(buf))
        buf.appendleft(s)
        out[k + 1] = s
    return out


def kernel_integral(drive, gamma, t):
    """``s(t) = int_0^t (1 - exp(-gamma (t - u))) g(u) du`` by adaptive quadrature."""
    if t <= 0:
        return 0.0
    val, _ = integrate.quad(lambda u: (1.0 - math.exp(-gamma * (t - u))) * drive(u), 0.0, t,
                            epsabs=1e-13, epsrel=1e-12, limit=200)
    return val


def _momentum_final_signal(drive, params, n_steps):
    # per-step drive is g(t_{n-1}) * dt so s carries physical time units
    dt = params.delta_t

    def g(n, x, s):
        return dt * drive((n - 1) * dt)

    rule = markovian_embed_momentum(g, params)
    y = np.zeros(2)
    for n in range(1, n_steps + 1):
        y = rule(n, 0.0, y)
    return float(y[0])


def kernel_limit_check(params, drive, t_max, reference=None):
    """Absolute error of the discrete momentum recursion against the memory kernel.

    ``params.beta`` must equal ``1 - gamma * delta_t`` and ``gamma * delta_t``
    must stay below 0.5. The recursion starts from ``s = m = 0`` at ``t = 0``.
    ``reference`` overrides the quadrature value of the kernel integral.
    """
    gamma, dt = params.gamma, params.delta_t
    if gamma * dt >= 0.5:
        raise ValueError(f"gamma * delta_t = {gamma * dt} is too coarse (needs < 0.5)")
    if abs(params.beta - (1.0 - gamma * dt)) > 1e-12:
        raise ValueError("beta must equal 1 - gamma * delta_t for the continuum check")
    n_steps = round(t_max / dt)
    if n_steps < 1 or abs(n_steps * dt - t_max) > 1e-9 * max(1.0, t_max):
        raise ValueError("t_max must be a positive multiple of delta_t")
    if reference is None:
        reference = kernel_integral(drive, gamma, t_max)
    return abs(_momentum_final_signal(drive, params, n_steps) - reference)


def kernel_convergence_table(drive, gamma, t_max, dts, reference=None):
    """Errors for each ``dt`` and the observed ratio/order between neighbours."""
    if reference is None:
        reference = kernel_integral(drive, gamma, t_max)
    rows = []
    prev = None
    for dt in dts:
        err = kernel_limit_check(MomentumParams.from_rate(gamma, dt), drive, t_max, reference)
        row = {"delta_t": float(dt), "error": err, "ratio": None, "order": None}
        if prev is not None and err > 0:
            row["ratio"] = prev[1] / err
            row["order"] = math.log(prev[1] / err) / math.log(prev[0] / dt)
        rows.append(row)
        prev = (dt, err)
    return rows
