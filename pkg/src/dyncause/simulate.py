"""Benchmark time-series generators with known ground-truth causal graphs.

Series are returned as (S, N, T, d) float64 arrays with S = 1 sample and a
single scalar feature per node. Truth adjacency follows the convention
``adjacency[i, j] == 1`` iff node j causes node i.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VAR_COEFF = 0.1
VAR_NOISE_STD = 0.1
VAR_CAUSES_PER_NODE = 2  # random parents in addition to the self loop
VAR_SPECTRAL_CAP = 0.95
VAR_BURN_IN = 200
LORENZ_DT = 0.05
LORENZ_BURN_IN = 100
LORENZ_INIT_STD = 0.01
LORENZ_DIVERGENCE_LIMIT = 1e6


class SimulationError(ValueError):
    """Invalid generator parameters."""


class IntegrationError(ArithmeticError):
    """The ODE integration left the stable region."""


@dataclass
class GroundTruthGraph:
    """Binary causal adjacency, optionally switching between regimes.

    ``regimes`` lists (start_t, adjacency) with strictly increasing start
    times, the first at 0; a static graph has a single regime.
    """

    adjacency: np.ndarray
    regimes: list = field(default_factory=list)

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency)
        if self.adjacency.ndim != 2 or self.adjacency.shape[0] != self.adjacency.shape[1]:
            raise SimulationError("adjacency must be square")
        if not np.isin(self.adjacency, (0, 1)).all():
            raise SimulationError("adjacency entries must be 0 or 1")
        if not self.regimes:
            self.regimes = [(0, self.adjacency)]
        starts = [s for s, _ in self.regimes]
        if starts[0] != 0 or any(b <= a for a, b in zip(starts, starts[1:])):
            raise SimulationError("regime starts must be strictly increasing from 0")

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def is_switching(self) -> bool:
        return len(self.regimes) > 1

    def regime_at(self, t: int) -> np.ndarray:
        """Adjacency generating the value at time step ``t``."""
        current = self.regimes[0][1]
        for start, adj in self.regimes:
            if t >= start:
                current = adj
        return current


@dataclass
class VarSystem:
    """Sparse vector autoregression of order p with Gaussian innovations."""

    transition: list  # one (N, N) matrix per lag
    noise_std: float
    truth: GroundTruthGraph

    @property
    def num_nodes(self) -> int:
        return self.transition[0].shape[0]

    @property
    def lag(self) -> int:
        return len(self.transition)


@dataclass
class Lorenz96System:
    num_nodes: int
    forcing: float
    dt: float
    truth: GroundTruthGraph


def companion_spectral_radius(transition: list) -> float:
    n = transition[0].shape[0]
    p = len(transition)
    comp = np.zeros((n * p, n * p))
    for k, a in enumerate(transition):
        comp[:n, k * n : (k + 1) * n] = a
    if p > 1:
        comp[n:, : n * (p - 1)] = np.eye(n * (p - 1))
    return float(np.max(np.abs(np.linalg.eigvals(comp))))


def _draw_var_system(n: int, p: int, rng: np.random.Generator,
                     identical_lag_supports: bool = True) -> VarSystem:
    adjacency = np.zeros((n, n), dtype=np.int64)
    supports = []
    for i in range(n):
        others = [j for j in range(n) if j != i]
        chosen = rng.choice(others, size=VAR_CAUSES_PER_NODE, replace=False)
        supports.append(np.array([i, *chosen]))
    transition = []
    for lag in range(p):
        if lag > 0 and not identical_lag_supports:
            supports = []
            for i in range(n):
                others = [j for j in range(n) if j != i]
                chosen = rng.choice(others, size=VAR_CAUSES_PER_NODE, replace=False)
                supports.append(np.array([i, *chosen]))
        a = np.zeros((n, n))
        for i, supp in enumerate(supports):
            signs = rng.choice([-1.0, 1.0], size=supp.size)
            a[i, supp] = VAR_COEFF * signs
            adjacency[i, supp] = 1
        transition.append(a)
    radius = companion_spectral_radius(transition)
    if radius >= VAR_SPECTRAL_CAP:
        c = VAR_SPECTRAL_CAP / radius
        transition = [a * c ** (k + 1) for k, a in enumerate(transition)]
    return VarSystem(transition=transition, noise_std=VAR_NOISE_STD,
                     truth=GroundTruthGraph(adjacency=adjacency))


def _simulate_var(system: VarSystem, t_steps: int, rng: np.random.Generator,
                  burn_in: int, init: np.ndarray | None = None) -> np.ndarray:
    n, p = system.num_nodes, system.lag
    total = burn_in + t_steps
    x = np.zeros((total + p, n))
    if init is not None:
        x[:p] = init
    noise = rng.normal(0.0, system.noise_std, size=(total, n))
    for t in range(total):
        acc = noise[t].copy()
        for k, a in enumerate(system.transition):
            acc += a @ x[p + t - 1 - k]
        x[p + t] = acc
    return x[p + burn_in :]


def gen_var(n: int, p: int, t_steps: int, seed: int,
            identical_lag_supports: bool = True):
    """Sparse VAR(p) series; returns ((1, N, T, 1) array, GroundTruthGraph)."""
    if p not in (1, 2):
        raise SimulationError(f"lag order must be 1 or 2, got {p}")
    if n < 3:
        raise SimulationError("need at least 3 nodes to draw 2 non-self causes")
    if t_steps < 10:
        raise SimulationError("series length must be at least 10")
    rng = np.random.default_rng(seed)
    system = _draw_var_system(n, p, rng, identical_lag_supports)
    series = _simulate_var(system, t_steps, rng, VAR_BURN_IN)
    return series.T[None, :, :, None], system.truth


def gen_switching_var(n: int, t_steps: int, switch_t: int, seed: int):
    """Two lag-1 VAR regimes spliced at ``switch_t`` with a continuous state."""
    if not 0 < switch_t < t_steps:
        raise SimulationError(f"switch time must lie strictly inside (0, {t_steps})")
    if n < 3:
        raise SimulationError("need at least 3 nodes to draw 2 non-self causes")
    if t_steps < 10:
        raise SimulationError("series length must be at least 10")
    rng = np.random.default_rng(seed)
    sys_a = _draw_var_system(n, 1, rng)
    sys_b = _draw_var_system(n, 1, rng)
    first = _simulate_var(sys_a, switch_t, rng, VAR_BURN_IN)
    second = _simulate_var(sys_b, t_steps - switch_t, rng, burn_in=0,
                           init=first[-1:])
    series = np.concatenate([first, second], axis=0)
    truth = GroundTruthGraph(
        adjacency=sys_a.truth.adjacency,
        regimes=[(0, sys_a.truth.adjacency), (switch_t, sys_b.truth.adjacency)],
    )
    return series.T[None, :, :, None], truth


def lorenz96_deriv(x: np.ndarray, forcing: float) -> np.ndarray:
    return (np.roll(x, -1) - np.roll(x, 2)) * np.roll(x, 1) - x + forcing


def lorenz96_truth(n: int) -> GroundTruthGraph:
    adjacency = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        for offset in (-2, -1, 0, 1):
            adjacency[i, (i + offset) % n] = 1
    return GroundTruthGraph(adjacency=adjacency)


def gen_lorenz96(n: int, forcing: float, t_steps: int, dt: float = LORENZ_DT,
                 seed: int = 0):
    """Lorenz-96 series via RK4; returns ((1, N, T, 1) array, GroundTruthGraph)."""
    if n < 4:
        raise SimulationError("Lorenz-96 needs at least 4 variables")
    if forcing <= 0:
        raise SimulationError("forcing must be positive")
    if dt <= 0:
        raise SimulationError("integrator step must be positive")
    rng = np.random.default_rng(seed)
    x = forcing + rng.normal(0.0, LORENZ_INIT_STD, size=n)
    samples = np.empty((t_steps, n))
    total = LORENZ_BURN_IN + t_steps
    for t in range(total):
        k1 = lorenz96_deriv(x, forcing)
        k2 = lorenz96_deriv(x + 0.5 * dt * k1, forcing)
        k3 = lorenz96_deriv(x + 0.5 * dt * k2, forcing)
        k4 = lorenz96_deriv(x + dt * k3, forcing)
        x = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if np.max(np.abs(x)) > LORENZ_DIVERGENCE_LIMIT:
            raise IntegrationError(f"state diverged at step {t}")
        if t >= LORENZ_BURN_IN:
            samples[t - LORENZ_BURN_IN] = x
    return samples.T[None, :, :, None], lorenz96_truth(n)


def standardize(x: np.ndarray) -> np.ndarray:
    """Z-score every (sample, node, feature) channel over time; constants -> 0."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise SimulationError(f"expected (S, N, T, d) series, got shape {x.shape}")
    if x.shape[2] < 2:
        raise SimulationError("need at least 2 time steps to standardize")
    mean = x.mean(axis=2, keepdims=True)
    std = x.std(axis=2, keepdims=True)
    out = np.where(std > 0, (x - mean) / np.where(std > 0, std, 1.0), 0.0)
    return out
