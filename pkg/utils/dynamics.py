"""
Hyperbolic Ginzburg-Landau evolution for vortexlab.

Temporal gauge (A_0 = 0) on the staggered lattice. The accelerations are
the exact gradient of the lattice potential energy, so kick-drift-kick
leapfrog conserves the Gauss constraint to rounding and keeps the total
energy within an O(dt^2) band. On the disk the outer ring of nodes and the
links joining ring nodes are clamped to their initial values.
"""

import logging
import math
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import get_config
from models import (ComparisonReport, DynamicState, EvolutionParams, FieldConfig, GeodesicState,
                    Grid2D, ModuliPoint, SolverParams)
from utils.errors import CFLViolation, DynamicsBlowUp
from utils.lattice import LatticeOps, _backward
from utils.moduli import (DEFAULT_PAIR_RADII, GeodesicFlow, ModuliSpace, MetricOracle, PairMetric,
                          flat_metric, solve_fields)

logger = logging.getLogger(__name__)

# Sign of the supercurrent in the a-equations for D = d + i a, fixed by energy conservation
CURRENT_SIGN = -1.0


class GLEvolution:
    """Leapfrog integration of the hyperbolic equations and its diagnostics."""

    @staticmethod
    def clamp(state: DynamicState, grid: Grid2D) -> DynamicState:
        """Zero the velocities of clamped degrees of freedom (disk ring)."""
        state.a1dot = state.a1dot * grid.dynamic_link_mask(0)
        state.a2dot = state.a2dot * grid.dynamic_link_mask(1)
        state.phidot = state.phidot * grid.interior_mask()
        return state

    @staticmethod
    def accelerations(state: DynamicState, grid: Grid2D, tau: float = 1.0,
                      current_sign: float = CURRENT_SIGN) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Right-hand sides of the temporal-gauge equations.

        a1'' = -(b(x) - b(x - e2)) / h + sigma Im(conj Phi psi_1)
        a2'' = +(b(x) - b(x - e1)) / h + sigma Im(conj Phi psi_2)
        Phi'' = covariant Laplacian of Phi + Phi (tau - |Phi|^2) / 2

        Args:
            state: phase-space point
            grid: the lattice
            tau: scale parameter
            current_sign: sigma; only the default conserves energy

        Returns:
            Tuple[np.ndarray, np.ndarray, np.ndarray]: (a1'', a2'', Phi'')
        """
        cfg = state.cfg
        h = grid.h
        b = LatticeOps.field_curvature(cfg, grid)
        psi1, psi2 = LatticeOps.covariant_derivative(cfg.a1, cfg.a2, cfg.phi, grid)
        conj_phi = np.conj(cfg.phi)
        acc1 = -(b - _backward(b, 1)) / h + current_sign * np.imag(conj_phi * psi1)
        acc2 = (b - _backward(b, 0)) / h + current_sign * np.imag(conj_phi * psi2)
        acc_phi = (LatticeOps.covariant_laplacian(cfg, grid)
                   + 0.5 * cfg.phi * (tau - np.abs(cfg.phi) ** 2))
        return (acc1 * grid.dynamic_link_mask(0), acc2 * grid.dynamic_link_mask(1),
                acc_phi * grid.interior_mask())

    @staticmethod
    def gauss_field(state: DynamicState, grid: Grid2D) -> np.ndarray:
        """Constraint defect div(a') + Im(conj Phi Phi') on evolving nodes."""
        div = LatticeOps.link_divergence(state.a1dot, state.a2dot, grid)
        defect = div + np.imag(np.conj(state.cfg.phi) * state.phidot)
        return defect * grid.interior_mask()

    @staticmethod
    def gauss_residual(state: DynamicState, grid: Grid2D) -> float:
        """L2 norm of the Gauss-law defect."""
        defect = GLEvolution.gauss_field(state, grid)
        return float(np.sqrt(grid.area_element * np.sum(defect ** 2)))

    @staticmethod
    def energies(state: DynamicState, grid: Grid2D, tau: float = 1.0) -> Tuple[float, float, float]:
        """(E, T, U) with E = T + U."""
        kinetic = LatticeOps.kinetic_energy(state.a1dot, state.a2dot, state.phidot, grid)
        potential = LatticeOps.potential_energy(state.cfg, tau, grid).total
        return kinetic + potential, kinetic, potential

    @staticmethod
    def make_state(cfg: FieldConfig, grid: Grid2D, velocity: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = None,
                   t: float = 0.0) -> DynamicState:
        """Dynamic initial data with clamped velocities and its Gauss residual recorded."""
        if velocity is None:
            state = DynamicState.at_rest(cfg, t)
        else:
            state = DynamicState(cfg.copy(), velocity[0], velocity[1], velocity[2], t)
        GLEvolution.clamp(state, grid)
        state.gauss_residual0 = GLEvolution.gauss_residual(state, grid)
        return state

    @staticmethod
    def leapfrog_evolve(state0: DynamicState, params: EvolutionParams, grid: Grid2D,
                        current_sign: float = CURRENT_SIGN,
                        on_sample: Optional[Callable[[int, DynamicState], None]] = None) -> List[DynamicState]:
        """
        Kick-drift-kick leapfrog.

        Args:
            state0: initial data satisfying the Gauss law
            params: time step, step count, sampling cadence and tau
            grid: the lattice
            current_sign: supercurrent sign (calibration only)
            on_sample: called with (step, state) at every sample

        Returns:
            List[DynamicState]: sampled states, starting with a copy of state0

        Raises:
            CFLViolation: dt / h above the CFL limit
            DynamicsBlowUp: relative energy jump above the blow-up threshold
        """
        settings = get_config()
        cfl = params.cfl(grid)
        if cfl > settings.CFL_LIMIT:
            raise CFLViolation(f"dt/h = {cfl:.4g} exceeds the CFL limit {settings.CFL_LIMIT}")
        if grid.is_torus and state0.cfg.flux_string is not None:
            raise ValueError("torus evolution needs fields without a flux string")

        state = GLEvolution.clamp(state0.copy(), grid)
        gauss0 = GLEvolution.gauss_residual(state, grid)
        if gauss0 > 1e-8:
            logger.warning(f"initial Gauss residual {gauss0:.3e} exceeds 1e-8")
        energy0, _, _ = GLEvolution.energies(state, grid, params.tau)
        scale = max(abs(energy0), 1e-12)
        dt = params.dt

        samples = [state.copy()]
        if on_sample:
            on_sample(0, samples[0])
        acc = GLEvolution.accelerations(state, grid, params.tau, current_sign)
        for step in range(1, params.n_steps + 1):
            state.a1dot = state.a1dot + 0.5 * dt * acc[0]
            state.a2dot = state.a2dot + 0.5 * dt * acc[1]
            state.phidot = state.phidot + 0.5 * dt * acc[2]
            cfg = state.cfg
            cfg.a1 = cfg.a1 + dt * state.a1dot
            cfg.a2 = cfg.a2 + dt * state.a2dot
            cfg.phi = cfg.phi + dt * state.phidot
            acc = GLEvolution.accelerations(state, grid, params.tau, current_sign)
            state.a1dot = state.a1dot + 0.5 * dt * acc[0]
            state.a2dot = state.a2dot + 0.5 * dt * acc[1]
            state.phidot = state.phidot + 0.5 * dt * acc[2]
            state.t = state0.t + step * dt

            if step % params.sample_every == 0 or step == params.n_steps:
                energy, _, _ = GLEvolution.energies(state, grid, params.tau)
                if not np.isfinite(energy) or abs(energy - energy0) > settings.BLOWUP_THRESHOLD * scale:
                    logger.error(f"Energy jumped from {energy0:.8g} to {energy:.8g} at t={state.t:.4g}")
                    raise DynamicsBlowUp(f"energy jump at t={state.t:.4g}: E0={energy0:.8g}, E={energy:.8g}")
                sample = state.copy()
                samples.append(sample)
                if on_sample:
                    on_sample(step, sample)

        logger.info(f"Evolved {params.n_steps} steps to t={state.t:.6g}")
        return samples

    @staticmethod
    def diagnostics(samples: Sequence[DynamicState], grid: Grid2D, tau: float = 1.0) -> List[Dict[str, Any]]:
        """Per-sample t, E, T, U, Gauss residual and tracked zeros."""
        rows = []
        for state in samples:
            energy, kinetic, potential = GLEvolution.energies(state, grid, tau)
            rows.append({
                't': state.t,
                'E_total': energy,
                'T': kinetic,
                'U': potential,
                'gauss_residual': GLEvolution.gauss_residual(state, grid),
                'zeros': GLEvolution.track_zeros(state.cfg, grid),
            })
        return rows

    @staticmethod
    def _bilinear_root(corners: Tuple[complex, complex, complex, complex]) -> Tuple[float, float]:
        """Zero of the bilinear interpolant on the unit cell, clipped to it."""
        p00, p10, p01, p11 = corners
        s, t = 0.5, 0.5
        for _ in range(20):
            value = p00 * (1 - s) * (1 - t) + p10 * s * (1 - t) + p01 * (1 - s) * t + p11 * s * t
            ds = (p10 - p00) * (1 - t) + (p11 - p01) * t
            dt = (p01 - p00) * (1 - s) + (p11 - p10) * s
            jac = np.array([[ds.real, dt.real], [ds.imag, dt.imag]])
            if abs(np.linalg.det(jac)) < 1e-300:
                break
            step = np.linalg.solve(jac, [-value.real, -value.imag])
            s, t = s + step[0], t + step[1]
            if abs(step[0]) + abs(step[1]) < 1e-12:
                break
        if not (np.isfinite(s) and np.isfinite(t)):
            return 0.5, 0.5
        return float(np.clip(s, 0.0, 1.0)), float(np.clip(t, 0.0, 1.0))

    @staticmethod
    def track_zeros(phi, grid: Grid2D) -> List[complex]:
        """
        Locate zeros of Phi from plaquette windings.

        Accepts a Phi array or a FieldConfig; with a FieldConfig the winding
        and the corner values are taken in the local gauge fixed by the link
        phases, which is what real-gauge torus fields need.

        Returns:
            List[complex]: one position per unit of |winding|, sorted
        """
        cfg = phi if isinstance(phi, FieldConfig) else None
        values = cfg.phi if cfg is not None else np.asarray(phi, dtype=complex)
        windings = LatticeOps.plaquette_windings(values, grid, cfg)
        n, h = grid.n, grid.h
        coords = grid.coords
        zeros: List[complex] = []
        for i, j in zip(*np.nonzero(windings)):
            ip, jp = (i + 1) % n, (j + 1) % n
            p00, p10, p01, p11 = values[i, j], values[ip, j], values[i, jp], values[ip, jp]
            if cfg is not None:
                u1 = LatticeOps.link_phase(cfg.a1[i, j], grid)
                u2 = LatticeOps.link_phase(cfg.a2[i, j], grid)
                p10 = u1 * p10
                p01 = u2 * p01
                p11 = u1 * LatticeOps.link_phase(cfg.a2[ip, j], grid) * p11
            s, t = GLEvolution._bilinear_root((p00, p10, p01, p11))
            x, y = coords[i] + s * h, coords[j] + t * h
            if grid.is_torus:
                x, y = x % grid.side, y % grid.side
            zeros.extend([complex(x, y)] * abs(int(windings[i, j])))
        return sorted(zeros, key=lambda z: (z.real, z.imag))

    @staticmethod
    def moduli_tangent(q0: ModuliPoint, qdot0: np.ndarray, grid: Grid2D, params: SolverParams,
                       fd_step: Optional[float] = None) -> Tuple[FieldConfig, Tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """Base fields at q0 and the gauge-fixed field tangent along chart velocity qdot0."""
        fd_step = get_config().FD_STEP if fd_step is None else fd_step
        base = solve_fields(q0.zeros, grid, params)
        qdot0 = np.asarray(qdot0, dtype=float)
        if not np.any(qdot0):
            shape = base.phi.shape
            return base, (np.zeros(shape), np.zeros(shape), np.zeros(shape, dtype=complex))
        x0 = q0.chart_coords()
        plus = solve_fields(ModuliPoint.from_chart_coords(x0 + fd_step * qdot0).zeros, grid, params)
        minus = solve_fields(ModuliPoint.from_chart_coords(x0 - fd_step * qdot0).zeros, grid, params)
        tangent = ModuliSpace.gauge_fix_variation(
            base, ModuliSpace.field_difference(plus, minus, 2.0 * fd_step), grid)
        return base, tangent

    @staticmethod
    def default_oracle(degree: int, grid: Grid2D, solver_params: SolverParams,
                       fd_step: Optional[float] = None) -> MetricOracle:
        """
        Field-theoretic metric oracle for a comparison run.

        d = 1 is pi * I by translation invariance. d = 2 tabulates the pair
        factor from solved fields at the default radii that fit the disk.
        """
        if degree == 1:
            return flat_metric()
        if degree != 2:
            raise ValueError(f"no default metric oracle for d = {degree}; pass metric_oracle")
        reach = (grid.extent - get_config().BOUNDARY_CLEARANCE) ** 2
        radii = [r for r in DEFAULT_PAIR_RADII if r < reach]
        if len(radii) < 2:
            raise ValueError(f"disk of radius {grid.extent} is too small to tabulate the pair metric")
        return PairMetric.from_fields(radii, grid, solver_params, fd_step)

    @staticmethod
    def adiabatic_compare(q0: ModuliPoint, qdot0: np.ndarray, epsilon: float, slow_time_end: float,
                          grid: Grid2D, solver_params: SolverParams, evolution: EvolutionParams,
                          metric_oracle: Optional[MetricOracle] = None,
                          fd_step: Optional[float] = None) -> ComparisonReport:
        """
        Compare slow hyperbolic motion with the geodesic of the kinetic metric.

        The vortex at q0 is given the velocity epsilon * (gauge-fixed tangent
        along qdot0), evolved to t = slow_time_end / epsilon, and its tracked
        zeros compared with the geodesic at slow time epsilon * t.

        Args:
            q0: initial moduli point
            qdot0: chart velocity in slow time
            epsilon: speed scale
            slow_time_end: end of the comparison window in slow time
            grid: disk grid
            solver_params: Taubes settings
            evolution: dt, sampling cadence and tau (n_steps is derived)
            metric_oracle: chart metric for the geodesic; see default_oracle
            fd_step: tangent and Christoffel difference step

        Returns:
            ComparisonReport: dev(epsilon) = max sample deviation, path length, drifts
        """
        if not epsilon > 0:
            raise ValueError("epsilon must be positive")
        if metric_oracle is None:
            metric_oracle = GLEvolution.default_oracle(q0.degree, grid, solver_params, fd_step)
        base, tangent = GLEvolution.moduli_tangent(q0, qdot0, grid, solver_params, fd_step)
        state0 = GLEvolution.make_state(base, grid, tuple(epsilon * part for part in tangent))

        t_end = slow_time_end / epsilon
        n_steps = int(math.ceil(t_end / evolution.dt - 1e-9))
        run = EvolutionParams(dt=evolution.dt, n_steps=n_steps, sample_every=evolution.sample_every,
                              tau=evolution.tau)
        samples = GLEvolution.leapfrog_evolve(state0, run, grid)

        slow_times = [epsilon * s.t for s in samples]
        predicted = GLEvolution._geodesic_at(q0, np.asarray(qdot0, float), slow_times, metric_oracle, fd_step)

        rows = []
        deviation = 0.0
        path_length = 0.0
        energy0, _, _ = GLEvolution.energies(samples[0], grid, evolution.tau)
        energy_drift = 0.0
        gauss_growth = 0.0
        gauss0 = GLEvolution.gauss_residual(samples[0], grid)
        for k, (state, expected) in enumerate(zip(samples, predicted)):
            tracked = GLEvolution.track_zeros(state.cfg, grid)
            dev = GeodesicFlow.match_zeros(tracked, expected)
            deviation = max(deviation, dev)
            if k:
                path_length += GeodesicFlow.match_zeros(predicted[k - 1], expected)
            energy, _, _ = GLEvolution.energies(state, grid, evolution.tau)
            energy_drift = max(energy_drift, abs(energy - energy0) / max(abs(energy0), 1e-12))
            gauss_growth = max(gauss_growth, GLEvolution.gauss_residual(state, grid) - gauss0)
            rows.append({'t': state.t, 'slow_time': epsilon * state.t, 'tracked': tracked,
                         'predicted': list(expected), 'deviation': dev})

        logger.info(f"adiabatic comparison eps={epsilon}: dev={deviation:.4g}, path={path_length:.4g}")
        return ComparisonReport(epsilon=epsilon, deviation=deviation, path_length=path_length,
                                samples=rows, energy_drift=energy_drift, gauss_growth=gauss_growth)

    @staticmethod
    def _geodesic_at(q0: ModuliPoint, qdot0: np.ndarray, slow_times: Sequence[float],
                     metric_oracle: MetricOracle, fd_step: Optional[float]) -> List[List[complex]]:
        """Zeros of the geodesic at the requested slow times (ascending)."""
        x0 = q0.chart_coords()
        state = GeodesicState(q0, qdot0, 0.0, GeodesicFlow.kinetic_scalar(x0, qdot0, metric_oracle))
        out = []
        for target in slow_times:
            while state.slow_time < target - 1e-12:
                step = min(target - state.slow_time, 0.05)
                state = GeodesicFlow.geodesic_step(state, step, metric_oracle, fd_step)
            out.append(list(state.q.zeros))
        return out
