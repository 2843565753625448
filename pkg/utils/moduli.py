"""
Moduli-space dynamics for vortexlab.

The kinetic (T-) metric on the d-vortex moduli space is obtained by
finite-differencing the solved field family along moduli coordinates and
removing the gauge component of each tangent. Geodesics of the metric
(adiabatic trajectories) are integrated in the monic-polynomial chart,
which stays smooth through coincident zeros.
"""

import itertools
import logging
import warnings
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Memory, Parallel, delayed
from scipy import sparse
from scipy.interpolate import CubicSpline
from scipy.optimize import fsolve
from scipy.sparse.linalg import splu

from config import get_config
from models import FieldConfig, GeodesicState, Grid2D, ModuliPoint, SolverParams, TMetric, ZeroDivisor
from utils.errors import NearCoincidence, NearCoincidenceWarning, ScatteringError, SolverFailure
from utils.lattice import LatticeOps
from utils.taubes import TaubesSolver

logger = logging.getLogger(__name__)

Variation = Tuple[np.ndarray, np.ndarray, np.ndarray]
MetricOracle = Callable[[np.ndarray], np.ndarray]

# Roots closer than this are treated as one point of the divisor
ROOT_MERGE_TOL = 1e-7

# |eta| samples tabulated by PairMetric.from_fields when none are given
DEFAULT_PAIR_RADII = (0.0, 0.25, 0.5, 1.0, 2.0, 3.0, 4.0, 6.0, 9.0)


def _difference_matrix(grid: Grid2D, axis: int) -> sparse.csr_matrix:
    """Sparse forward difference node -> link along ``axis``, rows of missing links zeroed."""
    n = grid.n
    index = np.arange(n * n).reshape(n, n)
    neighbour = np.roll(index, -1, axis=axis).ravel()
    rows = np.arange(n * n)
    shift = sparse.csr_matrix((np.ones(n * n), (rows, neighbour)), shape=(n * n, n * n))
    mask = sparse.diags(grid.link_mask(axis).ravel().astype(float))
    return (mask @ (shift - sparse.identity(n * n, format='csr')) / grid.h).tocsr()


def solve_fields(zeros: Sequence[complex], grid: Grid2D, params: SolverParams) -> FieldConfig:
    """Solved field configuration for a multiset of zeros."""
    divisor = ZeroDivisor.from_zeros(zeros, merge_tol=ROOT_MERGE_TOL)
    return TaubesSolver.solve(divisor, grid, params).cfg


class ModuliSpace:
    """Gauge-fixed tangents and the kinetic metric."""

    @staticmethod
    def gauge_projector(cfg: FieldConfig, grid: Grid2D) -> Callable[[Variation], Variation]:
        """
        Factorize (-Laplace + |Phi|^2) once and return the orthogonal projector
        onto the complement of the infinitesimal gauge orbit at cfg.
        """
        d1 = _difference_matrix(grid, 0)
        d2 = _difference_matrix(grid, 1)
        modulus = np.abs(cfg.phi.ravel()) ** 2
        operator = (d1.T @ d1 + d2.T @ d2 + sparse.diags(modulus)).tocsc()
        try:
            factor = splu(operator)
        except RuntimeError as e:
            logger.error(f"Gauge projection matrix is singular: {e}")
            raise SolverFailure(f"gauge projection failed: {e}")
        phi = cfg.phi

        def project(dcfg: Variation) -> Variation:
            da1 = dcfg[0] * grid.link_mask(0)
            da2 = dcfg[1] * grid.link_mask(1)
            dphi = np.asarray(dcfg[2], dtype=complex)
            rhs = -LatticeOps.link_divergence(da1, da2, grid) - np.imag(np.conj(phi) * dphi)
            chi = factor.solve(rhs.ravel()).reshape(grid.n, grid.n)
            g1, g2 = LatticeOps.link_gradient(chi, grid)
            return da1 - g1, da2 - g2, dphi + 1j * chi * phi

        return project

    @staticmethod
    def gauge_fix_variation(cfg: FieldConfig, dcfg: Variation, grid: Grid2D) -> Variation:
        """
        Remove the gauge component of a field variation.

        Args:
            cfg: base configuration (a solver output)
            dcfg: variation (da1, da2, dphi)
            grid: the lattice

        Returns:
            Variation: dcfg - (d chi, -i chi Phi), L2-orthogonal to every gauge direction
        """
        if not all(np.all(np.isfinite(part)) for part in dcfg):
            raise ValueError("variation must be finite")
        return ModuliSpace.gauge_projector(cfg, grid)(dcfg)

    @staticmethod
    def pure_gauge(cfg: FieldConfig, chi: np.ndarray, grid: Grid2D) -> Variation:
        """Infinitesimal gauge direction (d chi, -i chi Phi)."""
        g1, g2 = LatticeOps.link_gradient(chi, grid)
        return g1, g2, -1j * chi * cfg.phi

    @staticmethod
    def field_difference(plus: FieldConfig, minus: FieldConfig, step: float) -> Variation:
        """(plus - minus) / step componentwise."""
        return ((plus.a1 - minus.a1) / step, (plus.a2 - minus.a2) / step,
                (plus.phi - minus.phi) / step)

    @staticmethod
    def _points_along(q: ModuliPoint, coordinates: str, fd_step: float) -> List[List[complex]]:
        base = q.chart_coords() if coordinates == 'chart' else q.zero_coords()
        build = ModuliPoint.from_chart_coords if coordinates == 'chart' else ModuliPoint.from_zero_coords
        points = [list(q.zeros)]
        for mu in range(base.size):
            for sign in (1.0, -1.0):
                shifted = base.copy()
                shifted[mu] += sign * fd_step
                points.append(list(build(shifted).zeros))
        return points

    @staticmethod
    def _metric_matrix(zeros: Tuple[Tuple[float, float], ...], grid: Grid2D, params: SolverParams,
                       fd_step: float, coordinates: str, n_jobs: int) -> np.ndarray:
        q = ModuliPoint([complex(x, y) for x, y in zeros])
        points = ModuliSpace._points_along(q, coordinates, fd_step)
        configs = Parallel(n_jobs=n_jobs)(
            delayed(solve_fields)(point, grid, params) for point in points)
        base = configs[0]
        project = ModuliSpace.gauge_projector(base, grid)
        tangents = []
        for mu in range(2 * q.degree):
            plus, minus = configs[1 + 2 * mu], configs[2 + 2 * mu]
            tangents.append(project(ModuliSpace.field_difference(plus, minus, 2.0 * fd_step)))
        dim = len(tangents)
        g = np.zeros((dim, dim))
        for mu in range(dim):
            for nu in range(mu, dim):
                g[mu, nu] = g[nu, mu] = LatticeOps.inner_product(tangents[mu], tangents[nu], grid)
        return g

    @staticmethod
    def t_metric(q: ModuliPoint, grid: Grid2D, solver_params: SolverParams,
                 fd_step: Optional[float] = None, coordinates: str = 'chart',
                 n_jobs: Optional[int] = None, cache_dir: Optional[str] = None) -> TMetric:
        """
        Kinetic metric at a moduli point.

        g_{mu nu} = <P ds/dx^mu, P ds/dx^nu> with central differences of the
        solved fields and P the gauge projection.

        Args:
            q: moduli point
            grid: disk grid
            solver_params: Taubes solver settings
            fd_step: finite-difference step in the chosen coordinates
            coordinates: 'chart' (monic coefficients) or 'zeros' (Re z1, Im z1, ...)
            n_jobs: joblib workers for the field solves
            cache_dir: joblib cache location, keyed by the quantized point

        Returns:
            TMetric: the symmetric positive-definite metric

        Raises:
            NearCoincidence: zeros closer than 2 * fd_step in zero coordinates
            SolverFailure: metric not positive definite
        """
        settings = get_config()
        fd_step = settings.FD_STEP if fd_step is None else fd_step
        n_jobs = settings.thread_count() if n_jobs is None else n_jobs
        if coordinates not in ('chart', 'zeros'):
            raise ValueError(f"unknown coordinates {coordinates!r}")
        if grid.is_torus:
            raise ValueError("t_metric runs on the disk; torus real-gauge fields are singular at the zeros")

        separation = q.min_separation()
        if coordinates == 'zeros' and separation <= 2.0 * fd_step:
            raise NearCoincidence(f"zeros {separation:.3g} apart cannot be differenced with step {fd_step}")
        if separation < settings.NEAR_COINCIDENCE_FACTOR * fd_step:
            message = f"metric evaluated with zeros {separation:.3g} apart (fd_step {fd_step})"
            logger.warning(message)
            warnings.warn(message, NearCoincidenceWarning)

        key = tuple((round(z.real, 9), round(z.imag, 9)) for z in q.zeros)
        compute = ModuliSpace._metric_matrix
        if cache_dir:
            compute = Memory(cache_dir, verbose=0).cache(compute, ignore=['n_jobs'])
        g = compute(key, grid, solver_params, fd_step, coordinates, n_jobs)
        g = 0.5 * (g + g.T)

        metric = TMetric(g=g, eval_point=q, coordinates=coordinates)
        if not metric.is_spd(settings.SPD_EIGEN_FLOOR):
            logger.error(f"Metric at {q!r} is not positive definite: eigenvalues {metric.eigenvalues}")
            raise SolverFailure("kinetic metric is not positive definite")
        logger.info(f"T-metric at {q.zeros} ({coordinates}): eigenvalues {metric.eigenvalues}")
        return metric

    @staticmethod
    def translational_kinetic_energy(q: ModuliPoint, velocity: complex, grid: Grid2D,
                                     solver_params: SolverParams, step: float = 1e-2) -> float:
        """
        Kinetic energy of the gauge-fixed tangent of the rigidly translated family.

        Every zero moves with the same complex velocity; for d = 1 this is
        close to pi |v|^2 / 2.
        """
        base = solve_fields(q.zeros, grid, solver_params)
        moved = solve_fields([z + step * velocity for z in q.zeros], grid, solver_params)
        tangent = ModuliSpace.gauge_fix_variation(base, ModuliSpace.field_difference(moved, base, step), grid)
        return 0.5 * LatticeOps.inner_product(tangent, tangent, grid)


class PairMetric:
    """
    Metric oracle for d = 2 in chart coordinates.

    With zeros w +- zeta the centre of mass decouples, and the relative
    coordinate eta = zeta^2 = c1^2/4 - c2 carries a conformally flat metric
    F(|eta|) |d eta|^2. F is tabulated from the field-theoretic metric and
    continued by its large-separation form pi / (2 |eta|).
    """

    def __init__(self, radii: Sequence[float], values: Sequence[float]):
        radii = np.asarray(radii, dtype=float)
        values = np.asarray(values, dtype=float)
        order = np.argsort(radii)
        self.radii = radii[order]
        self.values = values[order]
        self.spline = CubicSpline(self.radii ** 2, self.values)
        self.r_max = float(self.radii[-1])

    @classmethod
    def from_fields(cls, radii: Sequence[float], grid: Grid2D, params: SolverParams,
                    fd_step: Optional[float] = None, n_jobs: Optional[int] = None,
                    cache_dir: Optional[str] = None) -> 'PairMetric':
        """Tabulate F(r) = g_{Re c2, Re c2} at c = (0, r) from the field metric."""
        values = []
        for r in radii:
            q = ModuliPoint.from_chart([0.0, -float(r)])
            metric = ModuliSpace.t_metric(q, grid, params, fd_step, 'chart', n_jobs, cache_dir)
            values.append(0.5 * (metric.g[2, 2] + metric.g[3, 3]))
            logger.info(f"Pair metric F({r:.4g}) = {values[-1]:.6g}")
        return cls(radii, values)

    @classmethod
    def asymptotic(cls, r_min: float = 0.5, r_max: float = 50.0, samples: int = 64) -> 'PairMetric':
        """Large-separation form pi / (2 r), flattened below r_min."""
        radii = np.linspace(0.0, r_max, samples)
        values = np.pi / (2.0 * np.maximum(radii, r_min))
        return cls(radii, values)

    def conformal_factor(self, r: float) -> float:
        if r <= self.r_max:
            return float(self.spline(r * r))
        return float(self.values[-1] * self.r_max / r)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        c1 = x[0] + 1j * x[1]
        # real 2x2 blocks of the hermitian form 2 pi |dw|^2 + F |d eta|^2
        # with w = -c1 / 2, eta = c1^2 / 4 - c2
        jac_w = np.array([-0.5, 0.0])
        jac_eta = np.array([0.5 * c1, -1.0])
        factor = self.conformal_factor(abs(0.25 * c1 * c1 - (x[2] + 1j * x[3])))
        hermitian = 2.0 * np.pi * np.outer(np.conj(jac_w), jac_w) + factor * np.outer(np.conj(jac_eta), jac_eta)
        g = np.zeros((4, 4))
        for a in range(2):
            for b in range(2):
                block = hermitian[a, b]
                g[2 * a:2 * a + 2, 2 * b:2 * b + 2] = [[block.real, -block.imag], [block.imag, block.real]]
        return 0.5 * (g + g.T)


def flat_metric(mass: float = np.pi) -> MetricOracle:
    """d = 1 oracle: translation invariance makes the metric mass * identity."""
    return lambda x: mass * np.eye(x.size)


class GeodesicFlow:
    """Geodesic integration in chart coordinates."""

    @staticmethod
    def kinetic_scalar(x: np.ndarray, xdot: np.ndarray, metric_oracle: MetricOracle) -> float:
        return 0.5 * float(xdot @ metric_oracle(x) @ xdot)

    @staticmethod
    def metric_derivatives(x: np.ndarray, metric_oracle: MetricOracle, fd_step: float) -> np.ndarray:
        """dg[l] = d g / d x^l by central differences."""
        dim = x.size
        dg = np.zeros((dim, dim, dim))
        for l in range(dim):
            e = np.zeros(dim)
            e[l] = fd_step
            dg[l] = (metric_oracle(x + e) - metric_oracle(x - e)) / (2.0 * fd_step)
        return dg

    @staticmethod
    def christoffel(x: np.ndarray, metric_oracle: MetricOracle, fd_step: float) -> np.ndarray:
        """Gamma[k, i, j] from finite differences of the metric."""
        g = metric_oracle(x)
        dg = GeodesicFlow.metric_derivatives(x, metric_oracle, fd_step)
        # lowered[l, i, j] = (d_i g_lj + d_j g_li - d_l g_ij) / 2
        lowered = 0.5 * (np.transpose(dg, (1, 0, 2)) + np.transpose(dg, (1, 2, 0)) - dg)
        return np.einsum('kl,lij->kij', np.linalg.inv(g), lowered)

    @staticmethod
    def _acceleration(x: np.ndarray, xdot: np.ndarray, metric_oracle: MetricOracle, fd_step: float) -> np.ndarray:
        gamma = GeodesicFlow.christoffel(x, metric_oracle, fd_step)
        return -np.einsum('kij,i,j->k', gamma, xdot, xdot)

    @staticmethod
    def geodesic_step(state: GeodesicState, h_step: float, metric_oracle: MetricOracle,
                      fd_step: Optional[float] = None) -> GeodesicState:
        """
        One classical Runge-Kutta step of the geodesic equation.

        Args:
            state: current point and chart velocity
            h_step: slow-time step (negative steps integrate backwards)
            metric_oracle: chart coordinates -> metric matrix
            fd_step: step for the Christoffel differences

        Returns:
            GeodesicState: the advanced state
        """
        fd_step = get_config().FD_STEP if fd_step is None else fd_step
        x = state.q.chart_coords()
        v = state.qdot

        def rhs(x_, v_):
            return v_, GeodesicFlow._acceleration(x_, v_, metric_oracle, fd_step)

        k1x, k1v = rhs(x, v)
        k2x, k2v = rhs(x + 0.5 * h_step * k1x, v + 0.5 * h_step * k1v)
        k3x, k3v = rhs(x + 0.5 * h_step * k2x, v + 0.5 * h_step * k2v)
        k4x, k4v = rhs(x + h_step * k3x, v + h_step * k3v)
        x_new = x + h_step / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
        v_new = v + h_step / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
        if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(v_new))):
            raise NearCoincidence("geodesic step produced non-finite values")
        q_new = ModuliPoint.from_chart_coords(x_new)
        return GeodesicState(q_new, v_new, state.slow_time + h_step,
                             GeodesicFlow.kinetic_scalar(x_new, v_new, metric_oracle))

    @staticmethod
    def adiabatic_trajectory(q0: ModuliPoint, qdot0: np.ndarray, t_end: float, h_step: float,
                             metric_oracle: MetricOracle, fd_step: Optional[float] = None) -> List[GeodesicState]:
        """Integrate the geodesic from (q0, qdot0) to slow time t_end, one sample per step."""
        if not h_step > 0:
            raise ValueError("h_step must be positive")
        x0 = q0.chart_coords()
        state = GeodesicState(q0, qdot0, 0.0, GeodesicFlow.kinetic_scalar(x0, np.asarray(qdot0, float), metric_oracle))
        samples = [state]
        n_steps = int(round(t_end / h_step))
        for _ in range(n_steps):
            state = GeodesicFlow.geodesic_step(state, h_step, metric_oracle, fd_step)
            samples.append(state)
        drift = abs(samples[-1].kinetic - samples[0].kinetic) / max(samples[0].kinetic, 1e-300)
        logger.info(f"Geodesic over {n_steps} steps: kinetic drift {drift:.3e}")
        return samples

    @staticmethod
    def variational_trajectory(q0: ModuliPoint, qdot0: np.ndarray, t_end: float, h_step: float,
                               metric_oracle: MetricOracle, fd_step: Optional[float] = None) -> List[GeodesicState]:
        """
        Discrete-Lagrangian (midpoint) integrator, the independent cross-check.

        L_d(x0, x1) = h/2 * v^T g((x0 + x1)/2) v with v = (x1 - x0)/h; the discrete
        Euler-Lagrange equations are solved for each new point with fsolve.
        """
        fd_step = get_config().FD_STEP if fd_step is None else fd_step
        h = h_step

        def slot_derivatives(x0, x1):
            v = (x1 - x0) / h
            mid = 0.5 * (x0 + x1)
            g = metric_oracle(mid)
            dg = GeodesicFlow.metric_derivatives(mid, metric_oracle, fd_step)
            curvature = 0.25 * h * np.einsum('lij,i,j->l', dg, v, v)
            return -g @ v + curvature, g @ v + curvature

        x = q0.chart_coords()
        momentum = metric_oracle(x) @ np.asarray(qdot0, dtype=float)
        states = [GeodesicState(q0, qdot0, 0.0, GeodesicFlow.kinetic_scalar(x, np.asarray(qdot0, float), metric_oracle))]
        n_steps = int(round(t_end / h))
        for k in range(n_steps):
            guess = x + h * np.linalg.solve(metric_oracle(x), momentum)
            x_next = fsolve(lambda y: slot_derivatives(x, y)[0] + momentum, guess, xtol=1e-13)
            momentum = slot_derivatives(x, x_next)[1]
            velocity = np.linalg.solve(metric_oracle(x_next), momentum)
            x = x_next
            states.append(GeodesicState(ModuliPoint.from_chart_coords(x), velocity, (k + 1) * h,
                                        GeodesicFlow.kinetic_scalar(x, velocity, metric_oracle)))
        return states

    @staticmethod
    def relative_discriminant(x: np.ndarray) -> complex:
        """(z1 - z2)^2 = c1^2 - 4 c2 for d = 2, label free."""
        c1 = x[0] + 1j * x[1]
        c2 = x[2] + 1j * x[3]
        return c1 * c1 - 4.0 * c2

    @staticmethod
    def scattering_angle(trajectory: Sequence[GeodesicState], ball_radius: float = 2.0) -> float:
        """
        Angle between incoming and outgoing relative-velocity axes of a d = 2 trajectory.

        Zeros are unordered, so axes are compared through (z1' - z2')^2 and
        the result lies in [0, 90] degrees.

        Raises:
            ScatteringError: the separation never drops below ball_radius
        """
        if not trajectory or trajectory[0].q.degree != 2:
            raise ScatteringError("scattering_angle needs a d = 2 trajectory")
        separations = [abs(GeodesicFlow.relative_discriminant(s.q.chart_coords())) ** 0.5 for s in trajectory]
        if min(separations) > ball_radius:
            raise ScatteringError(f"closest approach {min(separations):.4g} never enters the ball of radius {ball_radius}")

        def axis(state):
            x = state.q.chart_coords()
            disc = GeodesicFlow.relative_discriminant(x)
            c1dot = state.qdot[0] + 1j * state.qdot[1]
            c1 = x[0] + 1j * x[1]
            disc_dot = 2.0 * c1 * c1dot - 4.0 * (state.qdot[2] + 1j * state.qdot[3])
            return np.angle(disc_dot * disc_dot / disc)

        turn = np.angle(np.exp(1j * (axis(trajectory[-1]) - axis(trajectory[0]))))
        return float(np.degrees(abs(turn)) / 2.0)

    @staticmethod
    def deflection_angle(trajectory: Sequence[GeodesicState]) -> float:
        """
        Signed turn of the first zero's direction of motion, in degrees.

        Labels are carried along the trajectory by matching each state's zeros
        to the previous ones, so the result lies in (-180, 180] and keeps the
        sense of rotation that scattering_angle folds away.

        Raises:
            ScatteringError: fewer than three states, or the zero is at rest at an end
        """
        if len(trajectory) < 3:
            raise ScatteringError("deflection_angle needs at least three trajectory states")
        path = [list(trajectory[0].q.zeros)]
        for state in trajectory[1:]:
            previous = path[-1]
            best = min(itertools.permutations(state.q.zeros),
                       key=lambda perm: sum(abs(z - w) for z, w in zip(perm, previous)))
            path.append(list(best))
        v_in = path[1][0] - path[0][0]
        v_out = path[-1][0] - path[-2][0]
        if abs(v_in) < 1e-14 or abs(v_out) < 1e-14:
            raise ScatteringError("the tracked zero is at rest at an end of the trajectory")
        turn = float(np.degrees(np.angle(v_out / v_in)))
        return 180.0 if turn <= -180.0 else turn

    @staticmethod
    def match_zeros(tracked: Sequence[complex], predicted: Sequence[complex]) -> float:
        """Largest zero displacement under the best labelling (Hausdorff distance if counts differ)."""
        tracked = list(tracked)
        predicted = list(predicted)
        if not tracked or not predicted:
            return 0.0 if len(tracked) == len(predicted) else np.inf
        if len(tracked) != len(predicted):
            forward = max(min(abs(z - w) for w in predicted) for z in tracked)
            backward = max(min(abs(z - w) for w in tracked) for z in predicted)
            return float(max(forward, backward))
        best = np.inf
        for perm in itertools.permutations(range(len(tracked))):
            worst = max(abs(tracked[i] - predicted[j]) for i, j in enumerate(perm))
            best = min(best, worst)
        return float(best)
