"""Built-in feedback models.

Each builder returns a :class:`ModelSpec` holding every piece needed by the
engines: the Kraus set, the feedback channel family, the signal rule, a
signal lattice wide enough for ``n_steps`` steps, the initial state and the
initial signal.
"""
import dataclasses
import inspect
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .core import Instrument, KrausSet, ParametricChannels, check_density_matrix
from .signals import (
    MomentumParams,
    NonMarkovianRule,
    SignalLattice,
    markovian_embed_history,
    markovian_embed_momentum,
    markovian_rule,
)

__all__ = [
    "ModelSpec",
    "MODELS",
    "SIGMA_X",
    "SIGMA_Y",
    "SIGMA_Z",
    "build_model",
    "model_identity",
    "model_qubit_counting",
    "model_qubit_gaussian_feedback",
    "model_momentum_vs_markov_pair",
    "gaussian_kraus",
]

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)

QUBIT_STATES = {
    "mixed": np.eye(2) / 2,
    "zero": np.diag([1.0, 0.0]),
    "one": np.diag([0.0, 1.0]),
    "plus": np.full((2, 2), 0.5),
    "minus": np.array([[0.5, -0.5], [-0.5, 0.5]]),
}

RULES = ("markovian", "momentum", "history")


@dataclass(frozen=True, eq=False)
class ModelSpec:
    name: str
    params: dict
    kraus: KrausSet
    channels: object
    rule: object
    lattice: SignalLattice
    rho0: np.ndarray
    y0: np.ndarray
    n_steps: int
    dt: float = 1.0
    info: dict = field(default_factory=dict)

    @cached_property
    def instrument(self):
        return Instrument(self.kraus, self.channels, self.rule, self.lattice)

    @property
    def dim(self):
        return self.kraus.dim

    def with_lattice(self, lattice):
        return dataclasses.replace(self, lattice=lattice)


def _qubit_state(rho0):
    if isinstance(rho0, str):
        try:
            return QUBIT_STATES[rho0].astype(complex)
        except KeyError:
            raise ValueError(f"unknown initial state {rho0!r}; choose from {sorted(QUBIT_STATES)}") from None
    return check_density_matrix(rho0, name="rho0")


def _identity_channels(d, dt=1.0):
    return ParametricChannels(np.zeros((d, d)), (), dt)


def _check_rule(rule):
    if rule not in RULES:
        raise ValueError(f"unknown rule {rule!r}; choose from {RULES}")


def model_identity(n_steps=1, dim=2, rho0="mixed"):
    """Single-outcome identity measurement, identity feedback and a frozen signal."""
    rho = _qubit_state(rho0) if dim == 2 else np.eye(dim) / dim

    def stay(n, x, s):
        return s

    return ModelSpec(
        name="identity",
        params={"n_steps": n_steps, "dim": dim, "rho0": rho0},
        kraus=KrausSet(np.eye(dim)[None]),
        channels=_identity_channels(dim),
        rule=markovian_rule(stay, name="identity"),
        lattice=SignalLattice([0.0], [1.0], [1.0]),
        rho0=rho,
        y0=np.zeros(1),
        n_steps=n_steps,
    )


HADAMARD = np.array([[1, 1], [1, -1]], dtype=complex) / np.sqrt(2)
MIXERS = ("hadamard", "none")


def model_qubit_counting(n_steps=3, rho0="mixed", rule="markovian", beta=0.0, depth=1, s0=0.0, m0=0.0,
                         lattice_step=None, mixer="hadamard"):
    """Projective sigma_z measurement that counts ``1`` outcomes.

    The post-measurement channel does not depend on the signal. With
    ``mixer="hadamard"`` a Hadamard rotation follows every readout, so every
    outcome after the first is a fair coin and a maximally mixed start gives
    binomial counts. With ``mixer="none"`` the channel is the identity and
    all outcomes repeat the first one. ``rule="markovian"`` is
    ``s_n = s_{n-1} + x_n``; ``"momentum"`` feeds the same drive ``x`` through
    the momentum embedding with weight ``beta`` (initial momentum ``m0``);
    ``"history"`` adds ``x`` to the mean of the last ``depth + 1`` values.
    """
    _check_rule(rule)
    if mixer not in MIXERS:
        raise ValueError(f"unknown mixer {mixer!r}; choose from {MIXERS}")
    kraus = KrausSet([np.diag([1.0, 0.0]), np.diag([0.0, 1.0])], outcomes=[0.0, 1.0])
    if mixer == "hadamard":
        # exp(-i H0) = Hadamard since the Hadamard matrix has eigenvalues +-1
        channels = ParametricChannels(0.5 * np.pi * (np.eye(2) - HADAMARD), (), 1.0)
    else:
        channels = _identity_channels(2)
    n = int(n_steps)

    def count(n, x, s):
        return s + x

    def drive(n, x, s):
        return x + 0.0 * s

    if rule == "markovian":
        upd = markovian_rule(count, name="count")
        step = 1.0 if lattice_step is None else lattice_step
        lattice = SignalLattice([s0], [s0 + max(n, 1)], [step])
        y0 = np.array([s0])
    elif rule == "momentum":
        upd = markovian_embed_momentum(drive, MomentumParams(beta))
        step = 1.0 / 256 if lattice_step is None else lattice_step
        m_lo, m_hi = min(m0, 0.0), max(m0, 1.0)
        lattice = SignalLattice([s0 + max(n, 1) * m_lo, m_lo], [s0 + max(n, 1) * m_hi, m_hi], [step, step])
        y0 = np.array([s0, m0])
    else:
        def moving_average(n, x, hist):
            return np.mean(hist, axis=-1) + x

        upd = markovian_embed_history(NonMarkovianRule(depth, moving_average, name="moving_average"))
        step = 1.0 / 256 if lattice_step is None else lattice_step
        span = max(n, 1)
        lattice = SignalLattice([s0] + [-span] * depth, [s0 + span] + [span] * depth, [step] * (depth + 1))
        y0 = np.array([s0] + [0.0] * depth)

    return ModelSpec(
        name="qubit_counting",
        params=dict(n_steps=n, rho0=rho0, rule=rule, beta=beta, depth=depth, s0=s0, m0=m0, lattice_step=lattice_step,
                    mixer=mixer),
        kraus=kraus,
        channels=channels,
        rule=upd,
        lattice=lattice,
        rho0=_qubit_state(rho0),
        y0=y0,
        n_steps=n,
    )


def gaussian_kraus(lam, n_bins, x_range):
    """Binned Gaussian sigma_z measurement ``K_x ~ exp(-lam (sigma_z - x)^2 / 4)``.

    Outcomes are ``n_bins`` evenly spaced values on ``[-x_range, x_range]``.
    The operators are scaled so that ``sum_x K_x^H K_x = 1`` over the bins.
    The completeness deficit is the probability mass of the continuous
    outcome density ``N(+-1, 1/lam)`` lying beyond the outer bin edges, i.e.
    what the grid cuts off before renormalization. Returns the Kraus set and
    that deficit.
    """
    if not lam > 0:
        raise ValueError("measurement strength lam must be positive")
    if n_bins < 2:
        raise ValueError("n_bins must be at least 2")
    if not x_range > 0:
        raise ValueError("x_range must be positive")
    xs = np.linspace(-x_range, x_range, n_bins)
    edge = x_range + x_range / (n_bins - 1)
    hint = f"use x_range >= {1.0 + 5.0 / math.sqrt(lam):.3g}"
    # by symmetry both eigenvalues lose the same mass; the far tail is at edge + 1
    scale = math.sqrt(lam / 2.0)
    deficit = 0.5 * (math.erfc((edge - 1.0) * scale) + math.erfc((edge + 1.0) * scale))
    if deficit > 1e-6:
        raise ValueError(f"bin grid too narrow: completeness deficit {deficit:.3g}; {hint}")
    up = np.exp(-lam * (1.0 - xs) ** 2 / 4.0)
    down = np.exp(-lam * (-1.0 - xs) ** 2 / 4.0)
    norm = np.sum(up**2)
    if not (np.isfinite(norm) and norm > 0):
        raise ValueError(f"Gaussian weights vanish on every bin; {hint}")
    ops = np.zeros((n_bins, 2, 2), dtype=complex)
    ops[:, 0, 0] = up / np.sqrt(norm)
    ops[:, 1, 1] = down / np.sqrt(norm)
    return KrausSet(ops, outcomes=xs), float(deficit)


def model_qubit_gaussian_feedback(n_steps=6, lam=1.0, n_bins=5, x_range=6.0, omega=1.0, dt=0.1, gain=1.0,
                                  leak=0.0, rule="markovian", beta=0.5, depth=1, rho0="plus", s0=0.0, m0=0.0,
                                  lattice_step=None, lattice_span=None):
    """Weak Gaussian sigma_z measurement with a sigma_y feedback rotation.

    The drive is ``gain * x - leak * s`` and the feedback unitary is
    ``exp(-i omega s sigma_y dt)`` with ``s`` the first signal component.
    With ``rule="markovian"``, ``leak == 0`` and ``s0 == 0`` the signal is an
    integrator whose default lattice step divides every outcome, so no
    rounding happens. Other settings use a step of an eighth of the bin
    spacing.
    ``lattice_span`` overrides the half width of the ``s`` axis.
    """
    _check_rule(rule)
    if not 0.0 <= leak <= 1.0:
        raise ValueError("leak must lie in [0, 1]")
    kraus, deficit = gaussian_kraus(lam, n_bins, x_range)
    spacing = 2.0 * x_range / (n_bins - 1)
    n = int(n_steps)
    reach = gain * x_range
    if lattice_span is None:
        span = reach * max(n, 1) if leak == 0 else min(reach * max(n, 1), reach / leak)
        span += abs(s0)
    else:
        span = float(lattice_span)

    def drive(n, x, s):
        return gain * x - leak * s

    if rule == "markovian":
        def integrate(n, x, s):
            return s + (gain * x - leak * s)

        upd = markovian_rule(integrate, name="leaky_integrator")
        exact = leak == 0.0 and s0 == 0.0
        # even bin counts put the outcomes on odd multiples of half the spacing
        base = gain * spacing if n_bins % 2 else gain * spacing / 2
        step = (base if exact else gain * spacing / 8) if lattice_step is None else lattice_step
        top = np.floor(span / step) * step
        lattice = SignalLattice([-top], [top], [step])
        y0 = np.array([s0])
    elif rule == "momentum":
        upd = markovian_embed_momentum(drive, MomentumParams(beta))
        step = gain * spacing / 8 if lattice_step is None else lattice_step
        top = np.floor(span / step) * step
        m_top = np.ceil(max(abs(m0), reach + leak * span) / step) * step
        lattice = SignalLattice([-top, -m_top], [top, m_top], [step, step])
        y0 = np.array([s0, m0])
    else:
        def filtered(n, x, hist):
            return np.mean(hist, axis=-1) + gain * x - leak * hist[..., 0]

        upd = markovian_embed_history(NonMarkovianRule(depth, filtered, name="moving_average"))
        step = gain * spacing / 8 if lattice_step is None else lattice_step
        top = np.floor(span / step) * step
        m_top = np.ceil(2 * span / step) * step
        lattice = SignalLattice([-top] + [-m_top] * depth, [top] + [m_top] * depth, [step] * (depth + 1))
        y0 = np.array([s0] + [0.0] * depth)

    channels = ParametricChannels(np.zeros((2, 2)), [omega * SIGMA_Y], dt)
    return ModelSpec(
        name="qubit_gaussian_feedback",
        params=dict(n_steps=n, lam=lam, n_bins=n_bins, x_range=x_range, omega=omega, dt=dt, gain=gain, leak=leak,
                    rule=rule, beta=beta, depth=depth, rho0=rho0, s0=s0, m0=m0, lattice_step=lattice_step,
                    lattice_span=lattice_span),
        kraus=kraus,
        channels=channels,
        rule=upd,
        lattice=lattice,
        rho0=_qubit_state(rho0),
        y0=y0,
        n_steps=n,
        dt=dt,
        info={"completeness_deficit": deficit},
    )


def model_momentum_vs_markov_pair(beta, n_steps=20, **kw):
    """Counting models that differ only in the signal rule (plain vs momentum)."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    markov = model_qubit_counting(n_steps=n_steps, rule="markovian", **kw)
    momentum = model_qubit_counting(n_steps=n_steps, rule="momentum", beta=beta, **kw)
    return markov, momentum


MODELS = {
    "identity": model_identity,
    "qubit_counting": model_qubit_counting,
    "qubit_gaussian_feedback": model_qubit_gaussian_feedback,
}


def model_parameters(name):
    return [p for p in inspect.signature(MODELS[name]).parameters if p != "n_steps"]


def build_model(name, params=None, n_steps=None):
    """Build a registered model from a flat parameter table."""
    if name not in MODELS:
        raise KeyError(f"unknown model {name!r}; available: {sorted(MODELS)}")
    params = dict(params or {})
    allowed = set(model_parameters(name))
    unknown = sorted(set(params) - allowed)
    if unknown:
        raise KeyError(f"unknown parameter {unknown[0]!r} for model {name!r}")
    if n_steps is not None:
        params["n_steps"] = n_steps
    return MODELS[name](**params)
