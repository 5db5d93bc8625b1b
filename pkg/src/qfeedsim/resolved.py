"""Deterministic propagation of the feedback-resolved state over a signal lattice.

The resolved state assigns a subnormalized density matrix to every lattice
point that carries weight. Its trace over the lattice is the unconditional
quantum state and the per-point traces are the signal distribution.
"""
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .backend import kernels
from .core import DimensionMismatch, check_density_matrix, as_matrix, TOL
from .signals import DEFAULT_LATTICE_CAP

__all__ = [
    "ResolvedState",
    "SupportOverflow",
    "DEFAULT_PRUNE",
    "DEFAULT_MAX_ENTRIES",
    "init_resolved",
    "det_step",
    "propagate",
    "marginal_quantum",
    "signal_distribution",
    "component_distribution",
    "expectation",
    "max_entry_difference",
    "total_variation",
]

DEFAULT_PRUNE = 1e-12
DEFAULT_MAX_ENTRIES = 2_000_000
# fixed chunking keeps results independent of the thread count
CHUNK = 4096


class SupportOverflow(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class ResolvedState:
    """Sparse map from lattice point to subnormalized state.

    ``keys`` are row-major flat lattice keys in increasing order and
    ``states[i]`` is the matrix stored at ``keys[i]``.
    """

    lattice: object
    keys: np.ndarray
    states: np.ndarray
    step: int = 0
    leaked_mass: float = 0.0
    clip_count: int = 0

    def __post_init__(self):
        keys = np.asarray(self.keys, dtype=np.int64).reshape(-1)
        states = np.asarray(self.states, dtype=np.complex128)
        if states.ndim != 3 or len(states) != len(keys):
            raise ValueError("need exactly one (d, d) state per key")
        if len(keys) > 1 and np.any(np.diff(keys) <= 0):
            raise ValueError("keys must be strictly increasing")
        keys.setflags(write=False)
        states.setflags(write=False)
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "states", states)

    @classmethod
    def from_entries(cls, lattice, entries, dim=None, **kw):
        """Build from a ``{index tuple: matrix}`` mapping."""
        if not entries:
            if dim is None:
                raise ValueError("dimension required for an empty state")
            return cls(lattice, np.zeros(0, np.int64), np.zeros((0, dim, dim), np.complex128), **kw)
        idx = np.array(list(entries.keys()), dtype=np.int64).reshape(len(entries), lattice.dim)
        keys = lattice.flat(idx)
        order = np.argsort(keys, kind="stable")
        mats = np.array([entries[k] for k in entries], dtype=np.complex128)
        return cls(lattice, keys[order], mats[order], **kw)

    @property
    def dim(self):
        return self.states.shape[1]

    def __len__(self):
        return len(self.keys)

    @property
    def indices(self):
        return self.lattice.unflat(self.keys)

    @property
    def points(self):
        return self.lattice.points(self.indices)

    @property
    def traces(self):
        return np.trace(self.states, axis1=1, axis2=2).real

    @property
    def total_trace(self):
        return float(self.traces.sum())

    @property
    def entries(self):
        return {tuple(int(i) for i in idx): m for idx, m in zip(self.indices, self.states)}


def init_resolved(rho0, y0, lat, lattice_cap=DEFAULT_LATTICE_CAP):
    """Initial state ``rho0`` placed at the lattice point nearest ``y0``."""
    lat.check_size(lattice_cap)
    rho0 = check_density_matrix(rho0, name="rho0")
    y0 = np.asarray(y0, dtype=np.float64).reshape(-1)
    if y0.shape != (lat.dim,):
        raise DimensionMismatch(f"y0 has {y0.size} components, lattice has {lat.dim}")
    index, clipped = lat.project(y0)
    key = lat.flat([index])
    return ResolvedState(lat, key, rho0[None], 0, 0.0, int(clipped))


def _chunks(n):
    return [slice(i, min(i + CHUNK, n)) for i in range(0, n, CHUNK)]


def _map(func, n, threads):
    parts = _chunks(n)
    if threads > 1 and len(parts) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(func, parts))
    return [func(sl) for sl in parts]


def _feedback_ops(channels, lattice, keys):
    idx = lattice.unflat(keys)
    pts = lattice.points(idx)
    ops = [channels.kraus_at(p, tuple(int(i) for i in row)) for p, row in zip(pts, idx)]
    rank = max(len(o) for o in ops)
    d = ops[0].shape[1]
    out = np.zeros((len(ops), rank, d, d), dtype=np.complex128)
    for j, o in enumerate(ops):
        out[j, : len(o)] = o
    return out


def det_step(state, inst, prune=DEFAULT_PRUNE, max_entries=DEFAULT_MAX_ENTRIES, threads=1):
    """One step of the deterministic feedback master equation.

    Every stored point ``y'`` and outcome ``x'`` contributes
    ``M_{x'}(y') rho(y')`` at the projected lattice point ``f(x', y')``.
    Contributions are summed per destination in (source key, outcome) order
    and the feedback channel of the destination is applied to the sum, which
    equals applying it term by term because the channel is linear. Entries
    whose trace falls below ``prune`` are dropped and their trace is added to
    ``leaked_mass``; with ``prune == 0`` only entries of non-positive trace go.
    """
    if inst.dim != state.dim:
        raise DimensionMismatch(f"instrument acts on dimension {inst.dim}, state has {state.dim}")
    lat = state.lattice
    if inst.rule.dim != lat.dim:
        raise DimensionMismatch("update rule and lattice dimensions differ")
    n = state.step + 1
    nsrc, nx, dim_y = len(state), inst.n_outcomes, lat.dim
    if nsrc == 0:
        return ResolvedState(lat, state.keys, state.states, n, state.leaked_mass, state.clip_count)

    pts = state.points
    raw = np.empty((nsrc, nx, dim_y))
    for x in range(nx):
        raw[:, x] = inst.rule.batch(n, inst.kraus.outcomes[x], pts)
    idx, clipped = lat.project_many(raw.reshape(-1, dim_y))
    dest = lat.flat(idx)

    kraus = inst.kraus.operators
    parts = _map(lambda sl: kernels.sandwich_all(kraus, state.states[sl]), nsrc, threads)
    contribs = np.concatenate(parts).reshape(nsrc * nx, state.dim, state.dim)

    ukeys, slots = np.unique(dest, return_inverse=True)
    summed = kernels.scatter_add(contribs, slots.astype(np.int64).reshape(-1), len(ukeys))

    if not getattr(inst.channels, "is_identity", False):
        ops = _feedback_ops(inst.channels, lat, ukeys)
        parts = _map(lambda sl: kernels.apply_kraus(ops[sl], summed[sl]), len(ukeys), threads)
        summed = np.concatenate(parts)

    tr = kernels.traces(summed)
    keep = tr >= prune if prune > 0 else tr > 0
    leaked = state.leaked_mass + float(tr[~keep].sum())
    n_keep = int(keep.sum())
    if n_keep > max_entries:
        raise SupportOverflow(
            f"support grew to {n_keep} lattice points (limit {max_entries}); "
            "use a coarser lattice or a higher prune threshold"
        )
    return ResolvedState(lat, ukeys[keep], summed[keep], n, leaked, state.clip_count + int(clipped.sum()))


def propagate(state, inst, n_steps, prune=DEFAULT_PRUNE, max_entries=DEFAULT_MAX_ENTRIES, threads=1,
              callback=None):
    """Apply :func:`det_step` ``n_steps`` times; ``callback(state)`` sees every step."""
    if callback is not None:
        callback(state)
    for _ in range(n_steps):
        state = det_step(state, inst, prune, max_entries, threads)
        if callback is not None:
            callback(state)
    return state


def marginal_quantum(state):
    """Unconditional state ``sum_y rho(y)``, renormalized by the unleaked mass."""
    if len(state) == 0:
        raise ValueError("resolved state has empty support")
    if state.leaked_mass > 1e-6:
        warnings.warn(f"{state.leaked_mass:.3g} of the trace was pruned; marginal is renormalized",
                      RuntimeWarning, stacklevel=2)
    return state.states.sum(axis=0) / (1.0 - state.leaked_mass)


def signal_distribution(state):
    """``{lattice index: tr rho(y)}``."""
    return {tuple(int(i) for i in idx): float(t) for idx, t in zip(state.indices, state.traces)}


def component_distribution(state, component=0):
    """Distribution of one signal component, summed over the others, keyed by value."""
    vals = state.points[:, component]
    out = {}
    for v, t in zip(vals, state.traces):
        out[float(v)] = out.get(float(v), 0.0) + float(t)
    return dict(sorted(out.items()))


def expectation(state, obs):
    """Per-point conditional expectations of ``obs`` and their weighted aggregate.

    Points with zero trace are skipped. The aggregate is
    ``tr(obs * marginal_quantum(state))``.
    """
    obs = as_matrix(obs, "observable")
    if np.max(np.abs(obs - obs.conj().T)) > TOL.hermitian:
        raise ValueError("observable must be Hermitian")
    vals = np.einsum("ij,bji->b", obs, state.states).real
    tr = state.traces
    cond = {}
    for idx, v, t in zip(state.indices, vals, tr):
        if t > 0:
            cond[tuple(int(i) for i in idx)] = float(v / t)
    aggregate = float(vals.sum() / (1.0 - state.leaked_mass))
    return cond, aggregate


def max_entry_difference(a, b):
    """Largest entrywise difference of two resolved states; missing points count as zero."""
    if a.dim != b.dim:
        raise DimensionMismatch("states have different Hilbert dimensions")
    keys = np.union1d(a.keys, b.keys)
    if len(keys) == 0:
        return 0.0
    da = np.zeros((len(keys), a.dim, a.dim), dtype=np.complex128)
    db = np.zeros_like(da)
    da[np.searchsorted(keys, a.keys)] = a.states
    db[np.searchsorted(keys, b.keys)] = b.states
    return float(np.max(np.abs(da - db)))


def total_variation(p, q):
    """Total variation distance between two ``{key: probability}`` maps."""
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)
