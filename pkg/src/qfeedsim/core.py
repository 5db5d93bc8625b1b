"""Density matrices, Kraus measurements, feedback channels and instruments.

Operators are plain ``complex128`` numpy arrays of shape ``(d, d)``; stacks of
operators have shape ``(n, d, d)``. The small container classes below only
validate and hold those arrays.
"""
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np
import scipy.linalg

__all__ = [
    "ToleranceSettings",
    "TOL",
    "DimensionMismatch",
    "InvalidOperator",
    "UnnormalizableOutcome",
    "KrausSet",
    "QuantumChannel",
    "ParametricChannels",
    "TableChannels",
    "Instrument",
    "PostMeasurement",
    "as_matrix",
    "check_density_matrix",
    "check_weighted_state",
    "born_probabilities",
    "post_measurement_state",
    "apply_channel",
    "channel_at",
    "instrument_apply",
    "matrix_exponential",
]


@dataclass(frozen=True)
class ToleranceSettings:
    """Numerical thresholds shared by all validity checks."""

    hermitian: float = 1e-10
    psd: float = 1e-10
    trace: float = 1e-10
    completeness: float = 1e-9
    unitarity: float = 1e-9
    probability_floor: float = 1e-14


TOL = ToleranceSettings()


class DimensionMismatch(ValueError):
    pass


class InvalidOperator(ValueError):
    pass


class UnnormalizableOutcome(ArithmeticError):
    """Raised when a caller asks to normalize a (near) zero-probability branch."""


def as_matrix(a, name="matrix"):
    """Coerce ``a`` to a finite square complex128 array."""
    m = np.array(a, dtype=np.complex128)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] == 0:
        raise DimensionMismatch(f"{name} must be a non-empty square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidOperator(f"{name} has non-finite entries")
    return m


def _hermitian_defect(m):
    return float(np.max(np.abs(m - m.conj().T)))


def _min_eigenvalue(m):
    return float(np.linalg.eigvalsh(0.5 * (m + m.conj().T))[0])


def check_weighted_state(m, tol=TOL, name="state"):
    """Validate a subnormalized state (Hermitian, PSD, 0 <= trace <= 1)."""
    m = as_matrix(m, name)
    if _hermitian_defect(m) > tol.hermitian:
        raise InvalidOperator(f"{name} is not Hermitian")
    if _min_eigenvalue(m) < -tol.psd:
        raise InvalidOperator(f"{name} is not positive semidefinite")
    tr = float(np.trace(m).real)
    if tr < -tol.trace or tr > 1.0 + tol.trace:
        raise InvalidOperator(f"{name} trace {tr} outside [0, 1]")
    return m


def check_density_matrix(m, tol=TOL, name="rho"):
    """Validate and return a unit-trace density matrix."""
    m = check_weighted_state(m, tol, name)
    tr = float(np.trace(m).real)
    if abs(tr - 1.0) > tol.trace:
        raise InvalidOperator(f"{name} has trace {tr!r}, expected 1")
    return m


def _stack(ops, name):
    arr = np.array(ops, dtype=np.complex128)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1] != arr.shape[2] or arr.shape[0] == 0:
        raise DimensionMismatch(f"{name} must be a non-empty list of square matrices")
    if not np.all(np.isfinite(arr)):
        raise InvalidOperator(f"{name} has non-finite entries")
    return arr


def _completeness_defect(ops):
    d = ops.shape[1]
    total = np.einsum("kji,kjl->il", ops.conj(), ops)
    return float(np.max(np.abs(total - np.eye(d))))


def _readonly(a):
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class KrausSet:
    """Measurement operators ``K_x`` with the real value reported for each outcome.

    ``outcomes[x]`` is what the signal update rule receives when outcome ``x``
    fires; it defaults to ``0, 1, 2, ...``.
    """

    operators: np.ndarray
    outcomes: np.ndarray = None
    tol: ToleranceSettings = TOL

    def __post_init__(self):
        ops = _stack(self.operators, "Kraus operators")
        if self.outcomes is None:
            vals = np.arange(len(ops), dtype=np.float64)
        else:
            vals = np.array(self.outcomes, dtype=np.float64).reshape(-1)
        if vals.shape != (len(ops),):
            raise DimensionMismatch("need one outcome value per Kraus operator")
        if not np.all(np.isfinite(vals)):
            raise InvalidOperator("outcome values must be finite")
        defect = _completeness_defect(ops)
        if defect > self.tol.completeness:
            raise InvalidOperator(f"Kraus set is incomplete: max |sum K^H K - 1| = {defect:.3g}")
        object.__setattr__(self, "operators", _readonly(ops))
        object.__setattr__(self, "outcomes", _readonly(vals))
        object.__setattr__(self, "effects", _readonly(np.ascontiguousarray(np.einsum("kji,kjl->kil", ops.conj(), ops))))

    @property
    def dim(self):
        return self.operators.shape[1]

    def __len__(self):
        return self.operators.shape[0]


@dataclass(frozen=True, eq=False)
class QuantumChannel:
    """A CPTP map given by its Kraus operators."""

    kraus_ops: np.ndarray
    tol: ToleranceSettings = TOL

    def __post_init__(self):
        ops = _stack(self.kraus_ops, "channel Kraus operators")
        defect = _completeness_defect(ops)
        if defect > self.tol.completeness:
            raise InvalidOperator(f"channel is not trace preserving (defect {defect:.3g})")
        object.__setattr__(self, "kraus_ops", _readonly(ops))

    @property
    def dim(self):
        return self.kraus_ops.shape[1]

    @classmethod
    def identity(cls, dim):
        return cls(np.eye(dim)[None])

    @classmethod
    def unitary(cls, u):
        return cls(as_matrix(u, "unitary")[None])


def matrix_exponential(a):
    """Matrix exponential of a finite complex square matrix.

    Uses scaling and squaring with a Pade approximant (``scipy.linalg.expm``).
    Raises ``OverflowError`` instead of returning non-finite entries.
    """
    a = as_matrix(a, "exponent")
    with np.errstate(over="raise", invalid="raise"):
        try:
            out = scipy.linalg.expm(a)
        except FloatingPointError as exc:
            raise OverflowError("matrix exponential overflowed") from exc
    if not np.all(np.isfinite(out)):
        raise OverflowError("matrix exponential overflowed")
    return out


@lru_cache(maxsize=65536)
def _unitary_cached(key, h0_bytes, couplings_bytes, d, dt):
    y = np.frombuffer(key, dtype=np.float64)
    h0 = np.frombuffer(h0_bytes, dtype=np.complex128).reshape(d, d)
    hk = np.frombuffer(couplings_bytes, dtype=np.complex128).reshape(-1, d, d)
    gen = h0 + np.tensordot(y[: len(hk)], hk, axes=1) if len(hk) else h0
    u = matrix_exponential(-1j * dt * gen)
    u.setflags(write=False)
    return u


@dataclass(frozen=True, eq=False)
class ParametricChannels:
    """Unitary feedback ``exp(-i (H0 + sum_k y_k H_k) dt)``.

    ``couplings[k]`` multiplies signal component ``k``; components beyond
    ``len(couplings)`` do not enter the Hamiltonian.
    """

    h0: np.ndarray
    couplings: np.ndarray = ()
    dt: float = 1.0
    tol: ToleranceSettings = TOL

    def __post_init__(self):
        h0 = as_matrix(self.h0, "H0")
        d = h0.shape[0]
        hk = np.array(self.couplings, dtype=np.complex128)
        hk = hk.reshape(-1, d, d) if hk.size else np.zeros((0, d, d), dtype=np.complex128)
        for i, h in enumerate([h0, *hk]):
            if not np.all(np.isfinite(h)):
                raise InvalidOperator("Hamiltonian has non-finite entries")
            if _hermitian_defect(h) > self.tol.hermitian:
                raise InvalidOperator(f"Hamiltonian term {i} is not Hermitian")
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise ValueError("dt must be positive")
        object.__setattr__(self, "h0", _readonly(h0))
        object.__setattr__(self, "couplings", _readonly(hk))
        object.__setattr__(self, "is_identity", not h0.any() and not hk.any())

    @property
    def dim(self):
        return self.h0.shape[0]

    def unitary_at(self, y):
        y = np.ascontiguousarray(np.asarray(y, dtype=np.float64).reshape(-1))
        if not np.all(np.isfinite(y)):
            raise ValueError("signal point must be finite")
        if self.is_identity:
            return np.eye(self.dim, dtype=np.complex128)
        # only the coupled components matter for the cache key
        key = y[: len(self.couplings)].tobytes()
        return _unitary_cached(key, self.h0.tobytes(), self.couplings.tobytes(), self.dim, float(self.dt))

    def kraus_at(self, y, index=None):
        return self.unitary_at(y)[None]


@dataclass(frozen=True, eq=False)
class TableChannels:
    """Lookup table from lattice index to channel."""

    lattice: object
    table: dict

    def __post_init__(self):
        table = {tuple(int(i) for i in k): ch for k, ch in self.table.items()}
        dims = {ch.dim for ch in table.values()}
        if len(dims) > 1:
            raise DimensionMismatch("table channels disagree on dimension")
        nr = {len(ch.kraus_ops) for ch in table.values()}
        object.__setattr__(self, "table", table)
        object.__setattr__(self, "is_identity", False)
        object.__setattr__(self, "_rank", nr.pop() if len(nr) == 1 else None)

    @property
    def dim(self):
        return next(iter(self.table.values())).dim

    def channel_for_index(self, index):
        key = tuple(int(i) for i in index)
        try:
            return self.table[key]
        except KeyError:
            raise KeyError(f"no channel stored for lattice index {key}") from None

    def kraus_at(self, y, index=None):
        if index is None:
            index = self.lattice.index_of(y)
        return self.channel_for_index(index).kraus_ops


def channel_at(family, y, index=None):
    """Return the feedback channel for signal point ``y``.

    Table families look the point up by lattice index (``y`` must lie on the
    lattice); parametric families build the unitary channel.
    """
    if isinstance(family, TableChannels):
        if index is None:
            index = family.lattice.index_of(y)
        return family.channel_for_index(index)
    if isinstance(family, ParametricChannels):
        return QuantumChannel.unitary(family.unitary_at(y))
    raise TypeError(f"not a channel family: {type(family).__name__}")


def born_probabilities(kraus, rho):
    """Outcome probabilities ``tr(K_x rho K_x^H)``, clamped to [0, 1]."""
    rho = as_matrix(rho, "rho")
    if rho.shape[0] != kraus.dim:
        raise DimensionMismatch(f"rho is {rho.shape[0]}-dimensional, Kraus set is {kraus.dim}")
    p = np.einsum("xij,ji->x", kraus.effects, rho).real
    if not np.all(np.isfinite(p)):
        raise InvalidOperator("non-finite Born probability")
    return np.clip(p, 0.0, 1.0)


class PostMeasurement(NamedTuple):
    state: np.ndarray
    probability: float

    @property
    def normalizable(self):
        return self.probability >= TOL.probability_floor

    def normalized(self):
        if not self.normalizable:
            raise UnnormalizableOutcome(f"outcome probability {self.probability:.3g} is too small to normalize")
        return self.state / self.probability


def post_measurement_state(k, rho):
    """Unnormalized ``K rho K^H`` and its trace."""
    k = as_matrix(k, "Kraus operator")
    rho = as_matrix(rho, "rho")
    if k.shape != rho.shape:
        raise DimensionMismatch(f"operator {k.shape} and state {rho.shape} differ")
    out = k @ rho @ k.conj().T
    return PostMeasurement(out, float(np.trace(out).real))


def apply_channel(ch, rho):
    rho = as_matrix(rho, "state")
    if rho.shape[0] != ch.dim:
        raise DimensionMismatch(f"state is {rho.shape[0]}-dimensional, channel is {ch.dim}")
    ops = ch.kraus_ops
    return np.einsum("kij,jl,kml->im", ops, rho, ops.conj())


@dataclass(frozen=True, eq=False)
class Instrument:
    """Measurement, signal update and feedback bundled as ``M_x(y)``.

    ``M_x(y) rho = L(f(x, y)) [K_x rho K_x^H]`` where the feedback channel is
    chosen by the projected post-update signal.
    """

    kraus: KrausSet
    channels: object
    rule: object
    lattice: object

    def __post_init__(self):
        if self.channels.dim != self.kraus.dim:
            raise DimensionMismatch("Kraus set and feedback channels act on different dimensions")
        if self.rule.dim != self.lattice.dim:
            raise DimensionMismatch(f"rule has dimension {self.rule.dim}, lattice {self.lattice.dim}")

    @property
    def dim(self):
        return self.kraus.dim

    @property
    def n_outcomes(self):
        return len(self.kraus)

    def next_signal(self, n, x, y):
        """Projected ``f_n(x, y)`` as ``(index, point, clipped)``."""
        raw = self.rule(n, self.kraus.outcomes[x], y)
        index, clipped = self.lattice.project(raw)
        return index, self.lattice.point(index), clipped


class InstrumentOutput(NamedTuple):
    state: np.ndarray
    y_next: np.ndarray
    index: tuple
    clipped: bool


def instrument_apply(inst, x, y, rho, n=1):
    """Apply ``M_x(y)`` to a (sub)normalized state.

    ``n`` is the index of the step being produced, passed to the update rule.
    """
    if not 0 <= x < inst.n_outcomes:
        raise IndexError(f"outcome {x} outside alphabet of size {inst.n_outcomes}")
    post = post_measurement_state(inst.kraus.operators[x], rho)
    index, y_next, clipped = inst.next_signal(n, x, y)
    ops = inst.channels.kraus_at(y_next, index)
    out = np.einsum("kij,jl,kml->im", ops, post.state, ops.conj())
    return InstrumentOutput(out, y_next, index, clipped)
