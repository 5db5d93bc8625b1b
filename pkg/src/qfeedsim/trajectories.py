"""Stochastic conditional trajectories, Monte Carlo ensembles and exact path sums.

Randomness comes from one counter-based Philox stream per trajectory, keyed
by the base seed and the trajectory index, so any partition of an ensemble
into chunks or threads reproduces the same draws.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .backend import kernels
from .core import TOL, InvalidOperator, born_probabilities, check_density_matrix, instrument_apply
from .resolved import ResolvedState, _feedback_ops

__all__ = [
    "Trajectory",
    "EnsembleEstimate",
    "EnumerationCapExceeded",
    "DEFAULT_PATH_CAP",
    "trajectory_stream",
    "sample_step",
    "run_trajectory",
    "ensemble_estimate",
    "enumerate_paths",
]

DEFAULT_PATH_CAP = 10**6
TRAJ_CHUNK = 8192


class EnumerationCapExceeded(RuntimeError):
    pass


def trajectory_stream(seed, traj_index):
    """Independent generator for trajectory ``traj_index`` of an ensemble."""
    if seed is None:
        raise ValueError("a seed is required for trajectory runs")
    return np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, 0, int(traj_index)]))


def _draw(p, u):
    live = p > 0.0
    if not live.any():
        raise InvalidOperator("every outcome has vanishing probability; Kraus set is not complete")
    cum = np.cumsum(np.where(live, p, 0.0))
    hit = np.nonzero(live & (cum > u * cum[-1]))[0]
    return int(hit[0]) if len(hit) else int(np.nonzero(live)[0][-1])


def _outcome_probabilities(kraus, rho):
    p = born_probabilities(kraus, rho)
    p[p < TOL.probability_floor] = 0.0
    if not np.any(p):
        raise InvalidOperator("every outcome has vanishing probability; Kraus set is not complete")
    if abs(p.sum() - 1.0) > 1e-9:
        raise InvalidOperator(f"outcome probabilities sum to {p.sum()!r}")
    return p


class Sample(NamedTuple):
    x: int
    y_next: np.ndarray
    rho_next: np.ndarray
    index: tuple
    clipped: bool


def sample_step(rho, y, inst, rng, n=1):
    """Draw an outcome by the Born rule and return the normalized conditional update."""
    p = _outcome_probabilities(inst.kraus, rho)
    x = _draw(p, rng.random())
    out = instrument_apply(inst, x, y, rho, n)
    rho_next = out.state / np.trace(out.state).real
    return Sample(x, out.y_next, rho_next, out.index, out.clipped)


@dataclass
class Trajectory:
    """Record of one conditional run; row ``k`` holds step ``k`` (row 0 is the start)."""

    seed: int
    traj_index: int
    outcomes: np.ndarray
    indices: np.ndarray
    signals: np.ndarray
    states: np.ndarray
    clip_count: int = 0

    def __len__(self):
        return len(self.outcomes)

    @property
    def records(self):
        xs = [None, *(int(x) for x in self.outcomes)]
        return [(n, xs[n], self.signals[n], self.states[n]) for n in range(len(self.states))]


def run_trajectory(rho0, y0, inst, n_steps, seed, traj_index=0):
    """Simulate one conditional trajectory with the stream of ``traj_index``."""
    rho = check_density_matrix(rho0, name="rho0")
    rng = trajectory_stream(seed, traj_index)
    index, clipped = inst.lattice.project(y0)
    y = inst.lattice.point(index)
    clips = int(clipped)
    outcomes = np.empty(n_steps, dtype=np.int64)
    indices = np.empty((n_steps + 1, inst.lattice.dim), dtype=np.int64)
    signals = np.empty((n_steps + 1, inst.lattice.dim))
    states = np.empty((n_steps + 1, inst.dim, inst.dim), dtype=np.complex128)
    indices[0], signals[0], states[0] = index, y, rho
    for n in range(1, n_steps + 1):
        s = sample_step(rho, y, inst, rng, n)
        rho, y = s.rho_next, s.y_next
        clips += s.clipped
        outcomes[n - 1], indices[n], signals[n], states[n] = s.x, s.index, y, rho
    return Trajectory(int(seed), int(traj_index), outcomes, indices, signals, states, clips)


def _run_batch(inst, rho0, index0, n_steps, seed, traj_ids):
    lat = inst.lattice
    kr = inst.kraus
    b = len(traj_ids)
    u = np.empty((b, n_steps))
    for row, t in enumerate(traj_ids):
        u[row] = trajectory_stream(seed, t).random(n_steps)
    states = np.ascontiguousarray(np.broadcast_to(rho0, (b,) + rho0.shape))
    idx = np.broadcast_to(np.asarray(index0, dtype=np.int64), (b, lat.dim)).copy()
    pts = lat.points(idx)
    clips = 0
    for n in range(1, n_steps + 1):
        p = np.clip(kernels.born_batch(kr.effects, states), 0.0, 1.0)
        p[p < TOL.probability_floor] = 0.0
        if np.any(~p.any(axis=1)):
            raise InvalidOperator("every outcome has vanishing probability; Kraus set is not complete")
        choice = kernels.categorical(np.ascontiguousarray(p), np.ascontiguousarray(u[:, n - 1]))
        post = kernels.select_sandwich(kr.operators, states, choice)
        raw = np.empty((b, lat.dim))
        for x in range(len(kr)):
            sel = choice == x
            if sel.any():
                raw[sel] = inst.rule.batch(n, kr.outcomes[x], pts[sel])
        idx, clipped = lat.project_many(raw)
        clips += int(clipped.sum())
        pts = lat.points(idx)
        if not getattr(inst.channels, "is_identity", False):
            ukeys, inv = np.unique(lat.flat(idx), return_inverse=True)
            ops = _feedback_ops(inst.channels, lat, ukeys)[inv.reshape(-1)]
            post = kernels.apply_kraus(np.ascontiguousarray(ops), post)
        states = post / kernels.traces(post)[:, None, None]
    return idx, states, clips


@dataclass(frozen=True, eq=False)
class EnsembleEstimate:
    """Monte Carlo estimate of the resolved state.

    ``std_err[i]`` is the binomial standard error of the weight at
    ``resolved.keys[i]`` and ``counts[i]`` the number of trajectories there.
    """

    resolved: ResolvedState
    n_traj: int
    std_err: np.ndarray
    counts: np.ndarray
    seed: int


def ensemble_estimate(model, n_traj, n_steps, base_seed, threads=1):
    """Average ``rho_n`` binned at the final signal over ``n_traj`` trajectories.

    ``model`` needs ``instrument``, ``rho0`` and ``y0`` attributes. Each
    trajectory contributes its normalized state divided by ``n_traj``;
    contributions are summed in trajectory order.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be at least 1")
    if base_seed is None:
        raise ValueError("a seed is required for trajectory runs")
    inst = model.instrument
    lat = inst.lattice
    rho0 = check_density_matrix(model.rho0, name="rho0")
    index0, clipped0 = lat.project(model.y0)
    ids = np.arange(n_traj)
    parts = [ids[i:i + TRAJ_CHUNK] for i in range(0, n_traj, TRAJ_CHUNK)]

    def work(chunk):
        return _run_batch(inst, rho0, index0, n_steps, base_seed, chunk)

    if threads > 1 and len(parts) > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(work, parts))
    else:
        results = [work(c) for c in parts]

    idx = np.concatenate([r[0] for r in results])
    states = np.concatenate([r[1] for r in results])
    clips = sum(r[2] for r in results) + int(clipped0) * n_traj
    keys, inv, counts = np.unique(lat.flat(idx), return_inverse=True, return_counts=True)
    summed = kernels.scatter_add(np.ascontiguousarray(states / n_traj), inv.astype(np.int64).reshape(-1), len(keys))
    p = counts / n_traj
    std_err = np.sqrt(p * (1.0 - p) / n_traj)
    resolved = ResolvedState(lat, keys, summed, n_steps, 0.0, clips)
    return EnsembleEstimate(resolved, int(n_traj), std_err, counts, int(base_seed))


def enumerate_paths(rho0, y0, inst, n_steps, cap=DEFAULT_PATH_CAP):
    """Exact resolved state by summing every measurement record.

    Each branch carries the unnormalized product of instrument maps along
    its outcome sequence and is binned by its final lattice point. Branches
    whose operator is exactly zero are skipped since all their descendants
    vanish too.
    """
    nx = inst.n_outcomes
    if nx**n_steps > cap:
        raise EnumerationCapExceeded(f"{nx}^{n_steps} outcome sequences exceed the cap of {cap}")
    lat = inst.lattice
    rho0 = check_density_matrix(rho0, name="rho0")
    index0, clipped0 = lat.project(y0)
    clips = int(clipped0)
    bins = {}
    stack = [(0, rho0, lat.point(index0), index0)]
    while stack:
        depth, rho, y, index = stack.pop()
        if depth == n_steps:
            if index in bins:
                bins[index] = bins[index] + rho
            else:
                bins[index] = rho
            continue
        children = []
        for x in range(nx):
            out = instrument_apply(inst, x, y, rho, depth + 1)
            clips += out.clipped
            if np.any(out.state):
                children.append((depth + 1, out.state, out.y_next, out.index))
        stack.extend(reversed(children))
    return ResolvedState.from_entries(lat, bins, dim=inst.dim, step=n_steps, clip_count=clips)
