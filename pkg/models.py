"""
Data model for the vortexlab numerical laboratory.

This module defines the value types shared by every solver: discrete
domains, gauge-field configurations, vortex divisors and solutions,
moduli-space points and metrics, dynamic phase-space states, and the
experiment configuration and report records.

Lattice layout (see CONVENTIONS.md): Phi lives on nodes, ``a1[i, j]`` on
the x-link leaving node (i, j), ``a2[i, j]`` on the y-link leaving node
(i, j), curvature on the plaquette whose lower-left corner is (i, j).
Axis 0 of every array is x1, axis 1 is x2.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

DOMAIN_KINDS = ('torus', 'disk')


@dataclass(frozen=True)
class Grid2D:
    """Square lattice on the flat torus [0, L)^2 or the plane surrogate [-R, R]^2."""

    domain_kind: str
    extent: float  # side L for the torus, radius R for the disk
    n: int

    def __post_init__(self):
        if self.domain_kind not in DOMAIN_KINDS:
            raise ValueError(f"unknown domain kind {self.domain_kind!r}")
        if int(self.n) != self.n or self.n < 16 or self.n % 2:
            raise ValueError(f"resolution must be an even integer >= 16, got {self.n}")
        if not self.extent > 0:
            raise ValueError(f"domain extent must be positive, got {self.extent}")

    @property
    def is_torus(self) -> bool:
        return self.domain_kind == 'torus'

    @property
    def side(self) -> float:
        """Side length of the computational square."""
        return self.extent if self.is_torus else 2.0 * self.extent

    @property
    def h(self) -> float:
        return self.side / self.n

    @property
    def area_element(self) -> float:
        return self.h ** 2

    @property
    def volume(self) -> float:
        return self.side ** 2

    @property
    def origin(self) -> float:
        return 0.0 if self.is_torus else -self.extent

    @property
    def coords(self) -> np.ndarray:
        """Cell-centred node coordinates along one axis."""
        return self.origin + (np.arange(self.n) + 0.5) * self.h

    def mesh(self, shift: Tuple[float, float] = (0.0, 0.0)) -> Tuple[np.ndarray, np.ndarray]:
        """Node coordinates, optionally shifted by fractions of h (links, plaquettes)."""
        x = self.coords + shift[0] * self.h
        y = self.coords + shift[1] * self.h
        return np.meshgrid(x, y, indexing='ij')

    def link_mask(self, axis: int) -> np.ndarray:
        """Links that exist: all on the torus, none leaving the last row/column on the disk."""
        mask = np.ones((self.n, self.n), dtype=bool)
        if not self.is_torus:
            if axis == 0:
                mask[-1, :] = False
            else:
                mask[:, -1] = False
        return mask

    def plaquette_mask(self) -> np.ndarray:
        mask = np.ones((self.n, self.n), dtype=bool)
        if not self.is_torus:
            mask[-1, :] = False
            mask[:, -1] = False
        return mask

    def interior_mask(self) -> np.ndarray:
        """Nodes that evolve; on the disk the outer ring is clamped."""
        mask = np.ones((self.n, self.n), dtype=bool)
        if not self.is_torus:
            mask[0, :] = mask[-1, :] = False
            mask[:, 0] = mask[:, -1] = False
        return mask

    def dynamic_link_mask(self, axis: int) -> np.ndarray:
        """Links touching at least one evolving node."""
        mask = self.link_mask(axis)
        if not self.is_torus:
            if axis == 0:
                mask[:, 0] = mask[:, -1] = False
            else:
                mask[0, :] = mask[-1, :] = False
        return mask

    def minimum_image(self, dx: np.ndarray) -> np.ndarray:
        """Wrap displacements into [-L/2, L/2) on the torus."""
        if not self.is_torus:
            return dx
        return dx - self.side * np.floor(dx / self.side + 0.5)

    def to_dict(self) -> Dict[str, Any]:
        return {'domain_kind': self.domain_kind, 'extent': self.extent, 'n': self.n, 'h': self.h}

    def __repr__(self):
        return f'<Grid2D {self.domain_kind} extent={self.extent} n={self.n}>'


@dataclass
class FieldConfig:
    """Gauge potential on links and Higgs field on nodes.

    ``flux_string`` is the periodic flux-tube density that the real-gauge
    torus solutions carry; physical curvature is curl(a) minus this field.
    """

    a1: np.ndarray
    a2: np.ndarray
    phi: np.ndarray
    flux_string: Optional[np.ndarray] = None

    def __post_init__(self):
        self.a1 = np.asarray(self.a1, dtype=float)
        self.a2 = np.asarray(self.a2, dtype=float)
        self.phi = np.asarray(self.phi, dtype=complex)
        if not (self.a1.shape == self.a2.shape == self.phi.shape):
            raise ValueError("a1, a2 and phi must share one grid shape")
        if self.flux_string is not None:
            self.flux_string = np.asarray(self.flux_string, dtype=float)

    @classmethod
    def vacuum(cls, grid: Grid2D, tau: float = 1.0) -> 'FieldConfig':
        zeros = np.zeros((grid.n, grid.n))
        return cls(zeros, zeros.copy(), np.full((grid.n, grid.n), np.sqrt(tau), dtype=complex))

    def copy(self) -> 'FieldConfig':
        string = None if self.flux_string is None else self.flux_string.copy()
        return FieldConfig(self.a1.copy(), self.a2.copy(), self.phi.copy(), string)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.a1)) and np.all(np.isfinite(self.a2))
                    and np.all(np.isfinite(self.phi)))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'shape': list(self.phi.shape),
            'max_abs_phi': float(np.abs(self.phi).max()),
            'min_abs_phi': float(np.abs(self.phi).min()),
            'has_flux_string': self.flux_string is not None,
        }

    def __repr__(self):
        return f'<FieldConfig {self.phi.shape[0]}x{self.phi.shape[1]}>'


@dataclass
class GaugeFunction:
    """Gauge parameter chi on nodes (radians)."""

    chi: np.ndarray

    def __post_init__(self):
        self.chi = np.asarray(self.chi, dtype=float)
        if not np.all(np.isfinite(self.chi)):
            raise ValueError("gauge function must be finite")


@dataclass
class EnergyBreakdown:
    """The three summands of the potential energy."""

    field_term: float
    gradient_term: float
    potential_term: float
    total: float = field(init=False)

    def __post_init__(self):
        self.total = self.field_term + self.gradient_term + self.potential_term

    def to_dict(self) -> Dict[str, float]:
        return {
            'field_term': self.field_term,
            'gradient_term': self.gradient_term,
            'potential_term': self.potential_term,
            'total': self.total,
        }


@dataclass
class ZeroDivisor:
    """Effective divisor: distinct positions with positive multiplicities."""

    points: List[Tuple[complex, int]]

    def __post_init__(self):
        self.points = [(complex(z), int(m)) for z, m in self.points]
        if not self.points:
            raise ValueError("divisor must contain at least one zero")
        for z, m in self.points:
            if m < 1:
                raise ValueError(f"multiplicity must be positive, got {m}")
            if not np.isfinite(z):
                raise ValueError("zero positions must be finite")
        positions = [z for z, _ in self.points]
        for i, z in enumerate(positions):
            for w in positions[i + 1:]:
                if z == w:
                    raise ValueError(f"divisor points must be distinct, {z} repeated")

    @classmethod
    def from_zeros(cls, zeros: Sequence[complex], merge_tol: float = 1e-9) -> 'ZeroDivisor':
        """Group a multiset of zeros into distinct points with multiplicities."""
        points: List[List[Any]] = []
        for z in zeros:
            for entry in points:
                if abs(entry[0] - z) <= merge_tol:
                    # running mean keeps merged clusters centred
                    entry[0] = (entry[0] * entry[1] + z) / (entry[1] + 1)
                    entry[1] += 1
                    break
            else:
                points.append([complex(z), 1])
        return cls([(z, m) for z, m in points])

    @property
    def degree(self) -> int:
        return sum(m for _, m in self.points)

    @property
    def zeros(self) -> List[complex]:
        """The divisor as a multiset of positions."""
        out: List[complex] = []
        for z, m in self.points:
            out.extend([z] * m)
        return out

    def reduced(self, side: float) -> 'ZeroDivisor':
        """Positions reduced mod the torus side."""
        return ZeroDivisor([(complex(z.real % side, z.imag % side), m) for z, m in self.points])

    def to_dict(self) -> Dict[str, Any]:
        return {'points': [[z.real, z.imag, m] for z, m in self.points], 'degree': self.degree}


@dataclass
class SolverParams:
    """Newton settings for the Taubes equation."""

    tol: float = 1e-10
    max_iters: int = 50
    mu: float = 1.0
    tau: float = 1.0
    stagnation_factor: float = 0.0  # > 0 accepts a stalled torus Newton within factor * tol

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not self.stagnation_factor >= 0:
            raise ValueError("stagnation_factor must be non-negative")

    def to_dict(self) -> Dict[str, Any]:
        return {'tol': self.tol, 'max_iters': self.max_iters, 'mu': self.mu, 'tau': self.tau,
                'stagnation_factor': self.stagnation_factor}


@dataclass
class TaubesSolution:
    """Solved vortex: u = log|Phi|^2, reconstructed fields and diagnostics."""

    u: np.ndarray
    cfg: FieldConfig
    residuals: Tuple[float, float]
    newton_iters: int
    newton_residual: float
    divisor: ZeroDivisor
    grid: Grid2D
    tau: float
    energy: Optional[EnergyBreakdown] = None
    mass: Optional[float] = None
    smooth_part: Optional[np.ndarray] = None

    @property
    def modulus_squared(self) -> np.ndarray:
        return np.exp(self.u)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'divisor': self.divisor.to_dict(),
            'tau': self.tau,
            'grid': self.grid.to_dict(),
            'residuals': {'r1': self.residuals[0], 'r2': self.residuals[1]},
            'newton_residual': self.newton_residual,
            'iters': self.newton_iters,
            'energy_breakdown': self.energy.to_dict() if self.energy else None,
            'max_abs_phi_squared': float(np.exp(self.u).max()),
            'mass': self.mass,
        }

    def __repr__(self):
        return f'<TaubesSolution d={self.divisor.degree} iters={self.newton_iters}>'


def _canonical_order(zeros: Sequence[complex]) -> List[complex]:
    return sorted((complex(z) for z in zeros), key=lambda z: (round(z.real, 12), round(z.imag, 12)))


@dataclass
class ModuliPoint:
    """Unordered multiset of zeros; chart = monic polynomial coefficients."""

    zeros: List[complex]

    def __post_init__(self):
        if len(self.zeros) < 1:
            raise ValueError("a moduli point needs at least one zero")
        self.zeros = _canonical_order(self.zeros)

    @property
    def degree(self) -> int:
        return len(self.zeros)

    @property
    def chart(self) -> np.ndarray:
        """(c1, ..., cd) with prod(z - z_j) = z^d + sum c_k z^(d-k)."""
        return np.poly(np.asarray(self.zeros, dtype=complex))[1:].astype(complex)

    @classmethod
    def from_chart(cls, coeffs: Sequence[complex]) -> 'ModuliPoint':
        coeffs = np.asarray(coeffs, dtype=complex)
        roots = np.roots(np.concatenate(([1.0 + 0j], coeffs)))
        return cls(list(roots))

    def chart_coords(self) -> np.ndarray:
        """Chart as 2d reals (Re c1, Im c1, ...)."""
        c = self.chart
        return np.column_stack((c.real, c.imag)).ravel()

    @classmethod
    def from_chart_coords(cls, x: Sequence[float]) -> 'ModuliPoint':
        x = np.asarray(x, dtype=float)
        return cls.from_chart(x[0::2] + 1j * x[1::2])

    def zero_coords(self) -> np.ndarray:
        z = np.asarray(self.zeros)
        return np.column_stack((z.real, z.imag)).ravel()

    @classmethod
    def from_zero_coords(cls, x: Sequence[float]) -> 'ModuliPoint':
        x = np.asarray(x, dtype=float)
        return cls(list(x[0::2] + 1j * x[1::2]))

    def chart_velocity(self, zero_velocities: Sequence[complex],
                       zeros: Optional[Sequence[complex]] = None) -> np.ndarray:
        """Push zero velocities forward to chart coordinates.

        ``zero_velocities`` pair with ``zeros`` when given, else with ``self.zeros``.
        """
        zeros = np.asarray(self.zeros if zeros is None else zeros, dtype=complex)
        cdot = np.zeros(self.degree, dtype=complex)
        for j, zdot in enumerate(zero_velocities):
            others = np.delete(zeros, j)
            # d/dz_j of prod(z - z_i) is -prod_{i != j}(z - z_i)
            partial = -np.poly(others) if others.size else -np.ones(1)
            cdot += zdot * np.asarray(partial, dtype=complex)[-self.degree:]
        return np.column_stack((cdot.real, cdot.imag)).ravel()

    def min_separation(self) -> float:
        if self.degree < 2:
            return np.inf
        z = np.asarray(self.zeros)
        diff = np.abs(z[:, None] - z[None, :])
        return float(diff[np.triu_indices(self.degree, 1)].min())

    def to_dict(self) -> Dict[str, Any]:
        return {'zeros': [[z.real, z.imag] for z in self.zeros],
                'chart': [[c.real, c.imag] for c in self.chart]}

    def __repr__(self):
        return f'<ModuliPoint {self.zeros}>'


@dataclass
class TMetric:
    """Kinetic metric at a moduli point, in zero or chart coordinates."""

    g: np.ndarray
    eval_point: ModuliPoint
    coordinates: str = 'chart'

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(0.5 * (self.g + self.g.T))

    def is_spd(self, floor: float = 1e-8) -> bool:
        dim = self.g.shape[0]
        return bool(np.allclose(self.g, self.g.T)
                     and self.eigenvalues.min() > floor * np.trace(self.g) / dim)

    def to_dict(self) -> Dict[str, Any]:
        return {'coordinates': self.coordinates, 'g': self.g.tolist(),
                'eigenvalues': self.eigenvalues.tolist(), 'point': self.eval_point.to_dict()}


@dataclass
class GeodesicState:
    """Point and chart velocity along an adiabatic trajectory (slow time)."""

    q: ModuliPoint
    qdot: np.ndarray
    slow_time: float = 0.0
    kinetic: Optional[float] = None

    def __post_init__(self):
        self.qdot = np.asarray(self.qdot, dtype=float)
        if self.qdot.shape != (2 * self.q.degree,):
            raise ValueError("qdot must have 2d real components")
        if not np.all(np.isfinite(self.qdot)):
            raise ValueError("qdot must be finite")


@dataclass
class DynamicState:
    """Temporal-gauge phase-space point (A, Phi, A dot, Phi dot) at time t."""

    cfg: FieldConfig
    a1dot: np.ndarray
    a2dot: np.ndarray
    phidot: np.ndarray
    t: float = 0.0
    gauss_residual0: Optional[float] = None

    def __post_init__(self):
        self.a1dot = np.asarray(self.a1dot, dtype=float)
        self.a2dot = np.asarray(self.a2dot, dtype=float)
        self.phidot = np.asarray(self.phidot, dtype=complex)

    @classmethod
    def at_rest(cls, cfg: FieldConfig, t: float = 0.0) -> 'DynamicState':
        shape = cfg.phi.shape
        return cls(cfg.copy(), np.zeros(shape), np.zeros(shape), np.zeros(shape, dtype=complex), t)

    def copy(self) -> 'DynamicState':
        return DynamicState(self.cfg.copy(), self.a1dot.copy(), self.a2dot.copy(),
                            self.phidot.copy(), self.t, self.gauss_residual0)


@dataclass
class EvolutionParams:
    """Leapfrog settings."""

    dt: float
    n_steps: int
    sample_every: int = 1
    tau: float = 1.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_steps < 0 or self.sample_every < 1:
            raise ValueError("n_steps must be >= 0 and sample_every >= 1")

    def cfl(self, grid: Grid2D) -> float:
        return self.dt / grid.h


@dataclass
class ComparisonReport:
    """Outcome of one adiabatic-principle comparison."""

    epsilon: float
    deviation: float
    path_length: float
    samples: List[Dict[str, Any]] = field(default_factory=list)
    energy_drift: float = 0.0
    gauss_growth: float = 0.0

    @property
    def relative_deviation(self) -> float:
        return self.deviation / self.path_length if self.path_length > 0 else self.deviation

    def to_dict(self) -> Dict[str, Any]:
        return {'epsilon': self.epsilon, 'deviation': self.deviation,
                'path_length': self.path_length, 'relative_deviation': self.relative_deviation,
                'energy_drift': self.energy_drift, 'gauss_growth': self.gauss_growth}


@dataclass
class ExperimentConfig:
    """Validated experiment description read from a TOML file."""

    experiment: str
    grid: Dict[str, Any]
    divisor: List[Tuple[complex, int]]
    solver: Dict[str, Any]
    dynamics: Dict[str, Any]
    moduli: Dict[str, Any]
    sweep: Dict[str, Any]
    output_dir: str
    seed: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            'experiment': self.experiment,
            'grid': dict(self.grid),
            'divisor': [[z.real, z.imag, m] for z, m in self.divisor],
            'solver': dict(self.solver),
            'dynamics': dict(self.dynamics),
            'moduli': dict(self.moduli),
            'sweep': dict(self.sweep),
            'output_dir': self.output_dir,
            'seed': self.seed,
        }


@dataclass
class ExperimentReport:
    """Headline metrics, artifact paths and timing of one experiment run."""

    config: ExperimentConfig
    headline: Dict[str, Any] = field(default_factory=dict)
    tables: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    artifacts: List[str] = field(default_factory=list)
    wall_clock: float = 0.0
    iterations: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'config': self.config.to_dict(),
            'headline': self.headline,
            'artifacts': list(self.artifacts),
            'iterations': dict(self.iterations),
            'wall_clock_seconds': self.wall_clock,
        }
