"""
Experiment orchestration for vortexlab.

Reads a TOML experiment file, validates every parameter before any compute
starts, runs one of the experiments and writes its artifacts (CSV tables,
field snapshots, report.json) atomically into the output directory.
"""

import dataclasses
import logging
import os
import time
import tomllib
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from config import get_config
from models import (EvolutionParams, ExperimentConfig, ExperimentReport, Grid2D, ModuliPoint,
                    SolverParams, ZeroDivisor)
from utils.dynamics import GLEvolution
from utils.errors import BradlowViolation, CFLViolation, ConfigValidationError, ScatteringError
from utils.lattice import LatticeOps
from utils.moduli import DEFAULT_PAIR_RADII, GeodesicFlow, ModuliSpace, PairMetric, flat_metric
from utils.reporting import ReportWriter
from utils.snapshot import SnapshotIO
from utils.taubes import TaubesSolver

logger = logging.getLogger(__name__)

EXPERIMENTS = ('solve-disk', 'solve-torus', 'bradlow-sweep', 'metric', 'geodesic',
               'scatter', 'evolve', 'adiabatic-compare')

SECTION_DEFAULTS: Dict[str, Dict[str, Any]] = {
    'grid': {'domain': 'disk', 'extent': 10.0, 'n': 128},
    'divisor': {'points': [[0.0, 0.0, 1]]},
    'solver': {'tol': None, 'max_iters': None, 'mu': None, 'tau': 1.0, 'stagnation_factor': 0.0},
    'dynamics': {'dt': None, 'cfl': 0.25, 'n_steps': 1000, 'sample_every': 10,
                 'velocities': None, 'perturbation': 0.0, 'snapshot_every': 0,
                 'epsilons': [0.2, 0.1, 0.05], 'slow_time_end': 1.0},
    'moduli': {'fd_step': None, 'coordinates': 'chart', 'points': None, 'velocities': None,
               'h_step': 0.005, 't_end': None, 'metric': None, 'pair_radii': None,
               'impact_parameters': [0.0, 4.0, 8.0, 16.0], 'separation': 6.0, 'speed': 0.5,
               'ball_radius': None},
    'sweep': {'taus': [0.05, 0.1, 0.2, 0.5, 1.0, 2.0]},
}
TOP_LEVEL_KEYS = {'experiment', 'output_dir', 'seed'} | set(SECTION_DEFAULTS)

DISK_ONLY = {'solve-disk', 'metric', 'evolve', 'adiabatic-compare'}
TORUS_ONLY = {'solve-torus', 'bradlow-sweep'}
METRIC_CHOICES = ('flat', 'pair-asymptotic', 'pair-fields')


def _fail(message: str):
    raise ConfigValidationError(message)


def _number(section: str, key: str, value: Any, positive: bool = False, integer: bool = False) -> Any:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        _fail(f"[{section}] {key} must be a number, got {value!r}")
    if integer and int(value) != value:
        _fail(f"[{section}] {key} must be an integer, got {value!r}")
    if not np.isfinite(value):
        _fail(f"[{section}] {key} must be finite")
    if positive and not value > 0:
        _fail(f"[{section}] {key} must be positive, got {value!r}")
    return int(value) if integer else float(value)


def _number_list(section: str, key: str, values: Any, positive: bool = False) -> List[float]:
    if not isinstance(values, list) or not values:
        _fail(f"[{section}] {key} must be a non-empty list")
    return [_number(section, key, v, positive=positive) for v in values]


def _complex_list(section: str, key: str, values: Any) -> List[complex]:
    if not isinstance(values, list):
        _fail(f"[{section}] {key} must be a list of [x, y] pairs")
    out = []
    for pair in values:
        if not isinstance(pair, list) or len(pair) != 2:
            _fail(f"[{section}] {key} entries must be [x, y] pairs, got {pair!r}")
        out.append(complex(_number(section, key, pair[0]), _number(section, key, pair[1])))
    return out


def _merge_section(name: str, raw: Any) -> Dict[str, Any]:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        _fail(f"[{name}] must be a table")
    unknown = sorted(set(raw) - set(SECTION_DEFAULTS[name]))
    if unknown:
        _fail(f"unknown keys in [{name}]: {', '.join(unknown)}")
    merged = dict(SECTION_DEFAULTS[name])
    merged.update(raw)
    return merged


def validate_config(raw: Dict[str, Any], experiment: Optional[str] = None,
                    output_dir: Optional[str] = None) -> ExperimentConfig:
    """
    Validate a parsed experiment file.

    Args:
        raw: parsed TOML document
        experiment: subcommand from the command line, if any
        output_dir: --out override

    Returns:
        ExperimentConfig: validated configuration with defaults filled in

    Raises:
        ConfigValidationError: unknown keys, bad types or out-of-range values
        CFLViolation: the requested time step breaks the CFL limit
    """
    settings = get_config()
    unknown = sorted(set(raw) - TOP_LEVEL_KEYS)
    if unknown:
        _fail(f"unknown top-level keys: {', '.join(unknown)}")

    name = raw.get('experiment', experiment)
    if experiment and name != experiment:
        _fail(f"subcommand {experiment!r} does not match experiment {name!r} in the config")
    if name not in EXPERIMENTS:
        _fail(f"experiment must be one of {', '.join(EXPERIMENTS)}, got {name!r}")

    out = output_dir or raw.get('output_dir')
    if not isinstance(out, str) or not out:
        _fail("output_dir must be given in the config or with --out")
    seed = _number('top', 'seed', raw.get('seed', 0), integer=True)

    sections = {key: _merge_section(key, raw.get(key)) for key in SECTION_DEFAULTS}

    grid_section = sections['grid']
    if grid_section['domain'] not in ('torus', 'disk'):
        _fail(f"[grid] domain must be 'torus' or 'disk', got {grid_section['domain']!r}")
    grid_section['extent'] = _number('grid', 'extent', grid_section['extent'], positive=True)
    grid_section['n'] = _number('grid', 'n', grid_section['n'], integer=True)
    try:
        grid = Grid2D(grid_section['domain'], grid_section['extent'], grid_section['n'])
    except ValueError as e:
        _fail(f"[grid] {e}")
    if name in DISK_ONLY and grid.is_torus:
        _fail(f"{name} runs on the disk")
    if name in TORUS_ONLY and not grid.is_torus:
        _fail(f"{name} runs on the torus")

    points = sections['divisor']['points']
    if not isinstance(points, list) or not points:
        _fail("[divisor] points must be a non-empty list of [x, y, multiplicity]")
    divisor = []
    for entry in points:
        if not isinstance(entry, list) or len(entry) not in (2, 3):
            _fail(f"[divisor] entries must be [x, y] or [x, y, m], got {entry!r}")
        m = _number('divisor', 'multiplicity', entry[2], integer=True) if len(entry) == 3 else 1
        if m < 1:
            _fail("[divisor] multiplicities must be positive")
        divisor.append((complex(_number('divisor', 'x', entry[0]), _number('divisor', 'y', entry[1])), m))
    try:
        ZeroDivisor(divisor)
    except ValueError as e:
        _fail(f"[divisor] {e}")

    solver = sections['solver']
    solver['tol'] = settings.SOLVER_TOL if solver['tol'] is None else solver['tol']
    solver['max_iters'] = settings.SOLVER_MAX_ITERS if solver['max_iters'] is None else solver['max_iters']
    solver['mu'] = settings.SOLVER_MU if solver['mu'] is None else solver['mu']
    solver['tol'] = _number('solver', 'tol', solver['tol'], positive=True)
    solver['max_iters'] = _number('solver', 'max_iters', solver['max_iters'], positive=True, integer=True)
    solver['mu'] = _number('solver', 'mu', solver['mu'], positive=True)
    solver['tau'] = _number('solver', 'tau', solver['tau'], positive=True)
    solver['stagnation_factor'] = _number('solver', 'stagnation_factor', solver['stagnation_factor'])
    if solver['stagnation_factor'] < 0:
        _fail("[solver] stagnation_factor must be non-negative")
    if not grid.is_torus and solver['tau'] != 1.0:
        _fail("[solver] the plane surrogate uses tau = 1")

    dynamics = sections['dynamics']
    if dynamics['dt'] is not None:
        dynamics['dt'] = _number('dynamics', 'dt', dynamics['dt'], positive=True)
    else:
        dynamics['dt'] = _number('dynamics', 'cfl', dynamics['cfl'], positive=True) * grid.h
    dynamics['cfl'] = dynamics['dt'] / grid.h
    dynamics['n_steps'] = _number('dynamics', 'n_steps', dynamics['n_steps'], integer=True)
    dynamics['sample_every'] = _number('dynamics', 'sample_every', dynamics['sample_every'],
                                       positive=True, integer=True)
    dynamics['snapshot_every'] = _number('dynamics', 'snapshot_every', dynamics['snapshot_every'], integer=True)
    dynamics['perturbation'] = _number('dynamics', 'perturbation', dynamics['perturbation'])
    dynamics['epsilons'] = _number_list('dynamics', 'epsilons', dynamics['epsilons'], positive=True)
    dynamics['slow_time_end'] = _number('dynamics', 'slow_time_end', dynamics['slow_time_end'], positive=True)
    if dynamics['n_steps'] < 0 or dynamics['snapshot_every'] < 0 or dynamics['perturbation'] < 0:
        _fail("[dynamics] n_steps, snapshot_every and perturbation must be non-negative")
    if dynamics['snapshot_every'] and dynamics['snapshot_every'] % dynamics['sample_every']:
        _fail("[dynamics] snapshot_every must be a multiple of sample_every")
    degree = sum(m for _, m in divisor)
    if dynamics['velocities'] is not None:
        dynamics['velocities'] = _complex_list('dynamics', 'velocities', dynamics['velocities'])
        if len(dynamics['velocities']) != len(divisor):
            _fail("[dynamics] velocities needs one [vx, vy] per divisor point")
    if name in ('evolve', 'adiabatic-compare') and dynamics['cfl'] > settings.CFL_LIMIT:
        raise CFLViolation(f"dt/h = {dynamics['cfl']:.4g} exceeds the CFL limit {settings.CFL_LIMIT}")

    moduli = sections['moduli']
    moduli['fd_step'] = _number('moduli', 'fd_step',
                                settings.FD_STEP if moduli['fd_step'] is None else moduli['fd_step'], positive=True)
    if moduli['coordinates'] not in ('chart', 'zeros'):
        _fail("[moduli] coordinates must be 'chart' or 'zeros'")
    moduli['h_step'] = _number('moduli', 'h_step', moduli['h_step'], positive=True)
    if moduli['t_end'] is not None:
        moduli['t_end'] = _number('moduli', 't_end', moduli['t_end'], positive=True)
    if moduli['points'] is not None:
        if not isinstance(moduli['points'], list) or not moduli['points']:
            _fail("[moduli] points must be a non-empty list of zero lists")
        moduli['points'] = [_complex_list('moduli', 'points', p) for p in moduli['points']]
    if moduli['velocities'] is not None:
        moduli['velocities'] = _complex_list('moduli', 'velocities', moduli['velocities'])
        if len(moduli['velocities']) != degree:
            _fail("[moduli] velocities needs one [vx, vy] per zero (multiplicities expanded)")
    if moduli['metric'] is None:
        moduli['metric'] = 'flat' if degree == 1 else 'pair-fields'
    if moduli['metric'] not in METRIC_CHOICES:
        _fail(f"[moduli] metric must be one of {', '.join(METRIC_CHOICES)}")
    if moduli['metric'] == 'flat' and degree != 1 and name in ('geodesic', 'adiabatic-compare'):
        _fail("[moduli] the flat metric describes d = 1 only")
    if moduli['metric'].startswith('pair') and degree != 2 and name in ('geodesic', 'adiabatic-compare'):
        _fail("[moduli] pair metrics describe d = 2 only")
    if name == 'scatter' and moduli['metric'] == 'flat':
        _fail("[moduli] scatter needs a pair metric")
    if moduli['metric'] == 'pair-fields' and grid.is_torus and name in ('geodesic', 'scatter', 'adiabatic-compare'):
        _fail("[moduli] pair-fields needs a disk grid")
    moduli['pair_radii'] = _number_list('moduli', 'pair_radii', moduli['pair_radii'] or list(DEFAULT_PAIR_RADII))
    moduli['impact_parameters'] = _number_list('moduli', 'impact_parameters', moduli['impact_parameters'])
    moduli['separation'] = _number('moduli', 'separation', moduli['separation'], positive=True)
    moduli['speed'] = _number('moduli', 'speed', moduli['speed'], positive=True)
    if moduli['ball_radius'] is not None:
        moduli['ball_radius'] = _number('moduli', 'ball_radius', moduli['ball_radius'], positive=True)

    sweep = sections['sweep']
    sweep['taus'] = _number_list('sweep', 'taus', sweep['taus'], positive=True)
    if sweep['taus'] != sorted(sweep['taus']):
        _fail("[sweep] taus must be sorted ascending")

    return ExperimentConfig(experiment=name, grid=grid_section, divisor=divisor, solver=solver,
                            dynamics=dynamics, moduli=moduli, sweep=sweep, output_dir=out, seed=seed)


def load_config(path: str, experiment: Optional[str] = None,
                output_dir: Optional[str] = None) -> ExperimentConfig:
    """Parse and validate a TOML experiment file."""
    try:
        with open(path, 'rb') as handle:
            raw = tomllib.load(handle)
    except FileNotFoundError:
        _fail(f"config file {path} not found")
    except tomllib.TOMLDecodeError as e:
        _fail(f"config file {path} is not valid TOML: {e}")
    return validate_config(raw, experiment, output_dir)


# ----------------------------------------------------------------------
# Helpers

def _grid(ec: ExperimentConfig) -> Grid2D:
    return LatticeOps.make_grid(ec.grid['domain'], ec.grid['extent'], ec.grid['n'])


def _solver_params(ec: ExperimentConfig) -> SolverParams:
    return SolverParams(**ec.solver)


def _zeros(ec: ExperimentConfig) -> List[complex]:
    return ZeroDivisor(ec.divisor).zeros


def _flatten(zeros: Sequence[complex], count: int) -> List[float]:
    """Re/Im pairs of up to ``count`` zeros, padded with NaN."""
    values = []
    for k in range(count):
        z = zeros[k] if k < len(zeros) else complex(np.nan, np.nan)
        values.extend([z.real, z.imag])
    return values


def _zero_columns(count: int) -> List[str]:
    return [c for k in range(1, count + 1) for c in (f're_z{k}', f'im_z{k}')]


def _chart_state(zeros: Sequence[complex], velocities: Optional[Sequence[complex]]) -> Tuple[ModuliPoint, np.ndarray]:
    q0 = ModuliPoint(list(zeros))
    if velocities is None:
        return q0, np.zeros(2 * q0.degree)
    return q0, q0.chart_velocity(velocities, zeros=zeros)


def _metric_oracle(ec: ExperimentConfig, degree: int, n_jobs: int):
    choice = ec.moduli['metric']
    if choice == 'flat':
        return flat_metric()
    if choice == 'pair-asymptotic':
        return PairMetric.asymptotic()
    return PairMetric.from_fields(ec.moduli['pair_radii'], _grid(ec), _solver_params(ec),
                                  ec.moduli['fd_step'], n_jobs, get_config().CACHE_DIR)


def _solution_tables(solution, grid: Grid2D) -> Dict[str, Dict[str, Any]]:
    energy = solution.energy
    d = solution.divisor.degree
    target = np.pi * solution.tau * d
    tables = {
        'energy': {
            'columns': ['degree', 'U', 'target', 'rel_error', 'field_term', 'gradient_term',
                        'potential_term', 'r1', 'r2', 'newton_iters', 'newton_residual'],
            'rows': [[d, energy.total, target, (energy.total - target) / target, energy.field_term,
                      energy.gradient_term, energy.potential_term, solution.residuals[0],
                      solution.residuals[1], solution.newton_iters, solution.newton_residual]],
        },
    }
    j = grid.n // 2
    b = LatticeOps.field_curvature(solution.cfg, grid)
    tables['slice'] = {
        'columns': ['x', 'abs_phi_squared', 'b'],
        'rows': [[grid.coords[i], float(np.abs(solution.cfg.phi[i, j]) ** 2), float(b[i, j])]
                 for i in range(grid.n)],
    }
    tracked = GLEvolution.track_zeros(solution.cfg, grid)
    tables['zeros'] = {'columns': ['x', 'y'], 'rows': [[z.real, z.imag] for z in tracked]}
    return tables


# ----------------------------------------------------------------------
# Experiments

def run_solve(ec: ExperimentConfig, n_jobs: int) -> Tuple[ExperimentReport, Dict[str, bytes]]:
    """solve-disk and solve-torus."""
    grid = _grid(ec)
    params = _solver_params(ec)
    divisor = ZeroDivisor(ec.divisor)
    if grid.is_torus:
        solution = TaubesSolver.solve_taubes_torus(divisor, grid, params)
    else:
        solution = TaubesSolver.solve_taubes_disk(divisor, grid, params)
    d = divisor.degree
    target = np.pi * params.tau * d
    tracked = GLEvolution.track_zeros(solution.cfg, grid)
    expected = solution.divisor.zeros
    if grid.is_torus:
        expected = [complex(z.real % grid.side, z.imag % grid.side) for z in expected]
    headline = {
        'energy': solution.energy.total,
        'energy_target': target,
        'energy_rel_error': (solution.energy.total - target) / target,
        'r1': solution.residuals[0],
        'r2': solution.residuals[1],
        'newton_iters': solution.newton_iters,
        'newton_residual': solution.newton_residual,
        'vortex_number': LatticeOps.vortex_number(solution.cfg, grid, allow_flux_fallback=True),
        'zero_placement_error': GeodesicFlow.match_zeros(tracked, expected),
        'grid_spacing': grid.h,
        'max_abs_phi_squared': float(np.exp(solution.u).max()),
    }
    if grid.is_torus:
        margin = TaubesSolver.bradlow_margin(d, params.tau, grid.volume)
        headline['bradlow_margin'] = margin
        headline['mass'] = solution.mass
        headline['mass_rel_error'] = (solution.mass - margin) / margin
    report = ExperimentReport(config=ec, headline=headline, tables=_solution_tables(solution, grid),
                              iterations={'newton': solution.newton_iters})
    return report, {'solution.glf1': SnapshotIO.encode(solution.cfg, grid)}


def _sweep_point(divisor: ZeroDivisor, tau: float, grid: Grid2D, params: SolverParams) -> List[float]:
    point_params = dataclasses.replace(params, tau=tau)
    margin = TaubesSolver.bradlow_margin(divisor.degree, tau, grid.volume)
    try:
        solution = TaubesSolver.solve_taubes_torus(divisor, grid, point_params)
    except BradlowViolation:
        logger.info(f"tau={tau}: infeasible (margin {margin:.6g})")
        return [tau, margin, 0.0, np.nan, np.nan, np.nan, np.nan, np.nan]
    mass_error = (solution.mass - margin) / margin
    return [tau, margin, 1.0, float(np.exp(solution.u).max()), float(solution.newton_iters),
            solution.mass, mass_error, solution.energy.total]


def bradlow_sweep(divisor: ZeroDivisor, tau_list: Sequence[float], grid: Grid2D, params: SolverParams,
                  n_jobs: int = 1) -> Dict[str, Any]:
    """
    Solve the torus divisor for each tau and tabulate feasibility.

    Args:
        divisor: zeros on the torus
        tau_list: ascending scale parameters
        grid: torus grid
        params: solver settings (tau is overridden per row)
        n_jobs: joblib workers

    Returns:
        Dict: 'columns', 'rows' and 'monotone' (max |Phi|^2 increasing over feasible rows)
    """
    if list(tau_list) != sorted(tau_list):
        raise ConfigValidationError("tau_list must be sorted ascending")
    rows = Parallel(n_jobs=n_jobs)(delayed(_sweep_point)(divisor, tau, grid, params) for tau in tau_list)
    peaks = [row[3] for row in rows if row[2]]
    monotone = all(b > a for a, b in zip(peaks, peaks[1:]))
    if not monotone:
        logger.warning("max |Phi|^2 is not monotone in the Bradlow margin")
    return {
        'columns': ['tau', 'margin', 'feasible', 'max_abs_phi_squared', 'newton_iters', 'mass',
                    'mass_rel_error', 'energy'],
        'rows': rows,
        'monotone': monotone,
    }


def run_bradlow_sweep(ec: ExperimentConfig, n_jobs: int) -> Tuple[ExperimentReport, Dict[str, bytes]]:
    grid = _grid(ec)
    divisor = ZeroDivisor(ec.divisor)
    table = bradlow_sweep(divisor, ec.sweep['taus'], grid, _solver_params(ec), n_jobs)
    feasible = [row for row in table['rows'] if row[2]]
    headline = {
        'degree': divisor.degree,
        'critical_tau': TaubesSolver.critical_tau(divisor.degree, grid.volume),
        'feasible_rows': len(feasible),
        'infeasible_rows': len(table['rows']) - len(feasible),
        'monotone_max_abs_phi_squared': table['monotone'],
        'max_mass_rel_error': max((abs(row[6]) for row in feasible), default=None),
        'max_newton_iters': max((int(row[4]) for row in feasible), default=None),
    }
    report = ExperimentReport(config=ec, headline=headline,
                              tables={'bradlow_sweep': {'columns': table['columns'], 'rows': table['rows']}},
                              iterations={'newton_max': headline['max_newton_iters'] or 0})
    return report, {}


def run_metric(ec: ExperimentConfig, n_jobs: int) -> Tuple[ExperimentReport, Dict[str, bytes]]:
    grid = _grid(ec)
    params = _solver_params(ec)
    fd_step = ec.moduli['fd_step']
    cache_dir = get_config().CACHE_DIR
    points = ec.moduli['points'] or [_zeros(ec)]
    dim = 2 * len(points[0])
    if any(len(p) != len(points[0]) for p in points):
        raise ConfigValidationError("[moduli] points must share one degree")

    rows = []
    metrics = []
    for index, zeros in enumerate(points):
        metric = ModuliSpace.t_metric(ModuliPoint(zeros), grid, params, fd_step,
                                      ec.moduli['coordinates'], n_jobs, cache_dir)
        metrics.append(metric)
        eigenvalues = metric.eigenvalues
        for r in range(dim):
            rows.append([index, r] + list(metric.g[r]) + [eigenvalues[r]])

    headline: Dict[str, Any] = {
        'points': len(points),
        'eigenvalues': [m.eigenvalues.tolist() for m in metrics],
    }
    if dim == 2:
        deviations = [float(np.abs(m.g - np.pi * np.eye(2)).max() / np.pi) for m in metrics]
        headline['max_rel_dev_from_pi'] = max(deviations)
        q = ModuliPoint(points[0])
        oracle = [ModuliSpace.translational_kinetic_energy(q, v, grid, params, fd_step) / (0.5 * np.pi)
                  for v in (1.0, 1j)]
        headline['translational_oracle_ratio'] = oracle
    # sensitivity to halving the difference step at the first point
    half = ModuliSpace.t_metric(ModuliPoint(points[0]), grid, params, 0.5 * fd_step,
                                ec.moduli['coordinates'], n_jobs, cache_dir)
    headline['fd_step_sensitivity'] = float(np.abs(half.g - metrics[0].g).max() / np.abs(metrics[0].g).max())

    columns = ['point', 'row'] + [f'g{c}' for c in range(dim)] + ['eigenvalue']
    report = ExperimentReport(config=ec, headline=headline, tables={'metric': {'columns': columns, 'rows': rows}})
    return report, {}


def _trajectory_rows(trajectory, degree: int) -> List[List[float]]:
    return [[s.slow_time] + _flatten(s.q.zeros, degree) + [s.kinetic] for s in trajectory]


def run_geodesic(ec: ExperimentConfig, n_jobs: int) -> Tuple[ExperimentReport, Dict[str, bytes]]:
    zeros = _zeros(ec)
    degree = len(zeros)
    q0, qdot0 = _chart_state(zeros, ec.moduli['velocities'])
    oracle = _metric_oracle(ec, degree, n_jobs)
    h_step = ec.moduli['h_step']
    t_end = ec.moduli['t_end'] or 1.0
    fd_step = ec.moduli['fd_step']
    trajectory = GeodesicFlow.adiabatic_trajectory(q0, qdot0, t_end, h_step, oracle, fd_step)
    check = GeodesicFlow.variational_trajectory(q0, qdot0, t_end, h_step, oracle, fd_step)
    agreement = max(float(np.abs(a.q.chart_coords() - b.q.chart_coords()).max())
                    for a, b in zip(trajectory, check))
    kinetic0 = trajectory[0].kinetic
    drift = max(abs(s.kinetic - kinetic0) for s in trajectory) / kinetic0 if kinetic0 > 0 else 0.0
    headline: Dict[str, Any] = {
        'degree': degree,
        'kinetic_drift': drift,
        'integrator_agreement': agreement,
        'final_zeros': [[z.real, z.imag] for z in trajectory[-1].q.zeros],
    }
    if degree == 2:
        try:
            headline['scattering_angle'] = GeodesicFlow.scattering_angle(
                trajectory, ec.moduli['ball_radius'] or 2.0)
        except ScatteringError as e:
            logger.info(f"No scattering angle: {e}")
            headline['scattering_angle'] = None
        try:
            headline['deflection_deg'] = GeodesicFlow.deflection_angle(trajectory)
        except ScatteringError as e:
            logger.info(f"No deflection angle: {e}")
            headline['deflection_deg'] = None
    columns = ['t'] + _zero_columns(degree) + ['kinetic_scalar']
    report = ExperimentReport(config=ec, headline=headline,
                              tables={'trajectory': {'columns': columns, 'rows': _trajectory_rows(trajectory, degree)}},
                              iterations={'geodesic_steps': len(trajectory) - 1})
    return report, {}


def _scatter_point(impact: float, separation: float, speed: float, t_end: float, h_step: float,
                   oracle, fd_step: float, ball_radius: float) -> List[float]:
    z1 = complex(-separation, 0.5 * impact)
    zeros = [z1, -z1]
    q0, qdot0 = _chart_state(zeros, [speed, -speed])
    trajectory = GeodesicFlow.adiabatic_trajectory(q0, qdot0, t_end, h_step, oracle, fd_step)
    closest = min(abs(GeodesicFlow.relative_discriminant(s.q.chart_coords())) ** 0.5 for s in trajectory)
    angle = GeodesicFlow.scattering_angle(trajectory, ball_radius)
    deflection = GeodesicFlow.deflection_angle(trajectory)
    kinetic0 = trajectory[0].kinetic
    drift = max(abs(s.kinetic - kinetic0) for s in trajectory) / kinetic0
    return [impact, angle, deflection, closest, drift]


def run_scatter(ec: ExperimentConfig, n_jobs: int) -> Tuple[ExperimentReport, Dict[str, bytes]]:
    moduli = ec.moduli
    oracle = _metric_oracle(ec, 2, n_jobs)
    separation, speed = moduli['separation'], moduli['speed']
    t_end = moduli['t_end'] or 2.0 * separation / speed
    ball = moduli['ball_radius'] or 2.0 * max([separation] + [abs(b) for b in moduli['impact_parameters']])
    rows = Parallel(n_jobs=n_jobs)(
        delayed(_scatter_point)(b, separation, speed, t_end, moduli['h_step'], oracle, moduli['fd_step'], ball)
        for b in moduli['impact_parameters'])

    headline: Dict[str, Any] = {'angles': {str(row[0]): row[1] for row in rows}}
    if 0.0 in moduli['impact_parameters']:
        q0, qdot0 = _chart_state([complex(-separation, 0.0), complex(separation, 0.0)], [speed, -speed])
        rk4 = GeodesicFlow.adiabatic_trajectory(q0, qdot0, t_end, moduli['h_step'], oracle, moduli['fd_step'])
        var = GeodesicFlow.variational_trajectory(q0, qdot0, t_end, moduli['h_step'], oracle, moduli['fd_step'])
        headline['head_on_angle'] = GeodesicFlow.scattering_angle(rk4, ball)
        headline['head_on_deflection'] = GeodesicFlow.deflection_angle(rk4)
        headline['integrator_agreement'] = max(float(np.abs(a.q.chart_coords() - b.q.chart_coords()).max())
                                               for a, b in zip(rk4, var))
    report = ExperimentReport(config=ec, headline=headline, tables={
        'angle_vs_impact': {'columns': ['impact_parameter', 'angle_deg', 'deflection_deg',
                                        'closest_approach', 'kinetic_drift'],
                            'rows': rows}})
    return report, {}


def _perturbation(base, grid: Grid2D, amplitude: float, seed: int):
    """Smooth random velocity, localized away from the boundary and gauge-fixed."""
    rng = np.random.default_rng(seed)
    x, y = grid.mesh()
    envelope = np.exp(-(x ** 2 + y ** 2) / (0.1 * grid.extent ** 2))
    parts = [amplitude * envelope * LatticeOps.random_smooth_gauge(grid, rng).chi for _ in range(4)]
    variation = (parts[0], parts[1], parts[2] + 1j * parts[3])
    return ModuliSpace.gauge_fix_variation(base, variation, grid)


def run_evolve(ec: ExperimentConfig, n_jobs: int) -> Tuple[ExperimentReport, Dict[str, bytes]]:
    grid = _grid(ec)
    params = _solver_params(ec)
    dyn = ec.dynamics
    zeros = _zeros(ec)
    degree = len(zeros)
    velocities = None
    if dyn['velocities'] is not None:
        velocities = [v for (_, m), v in zip(ec.divisor, dyn['velocities']) for _ in range(m)]
    q0, qdot0 = _chart_state(zeros, velocities)
    base, tangent = GLEvolution.moduli_tangent(q0, qdot0, grid, params, ec.moduli['fd_step'])
    velocity = list(tangent)
    if dyn['perturbation'] > 0:
        kick = _perturbation(base, grid, dyn['perturbation'], ec.seed)
        velocity = [v + k for v, k in zip(velocity, kick)]
    state0 = GLEvolution.make_state(base, grid, tuple(velocity))

    snapshots: Dict[str, bytes] = {}

    def keep_snapshot(step, state):
        if dyn['snapshot_every'] and step % dyn['snapshot_every'] == 0:
            snapshots[f'state_{step:08d}.gld1'] = SnapshotIO.encode(state.cfg, grid, state)

    run = EvolutionParams(dt=dyn['dt'], n_steps=dyn['n_steps'], sample_every=dyn['sample_every'], tau=params.tau)
    samples = GLEvolution.leapfrog_evolve(state0, run, grid, on_sample=keep_snapshot)
    rows = GLEvolution.diagnostics(samples, grid, params.tau)

    energy0 = rows[0]['E_total']
    headline = {
        'degree': degree,
        'steps': dyn['n_steps'],
        'dt': dyn['dt'],
        'cfl': dyn['cfl'],
        'energy_drift': max(abs(r['E_total'] - energy0) for r in rows) / energy0,
        'gauss_residual_initial': rows[0]['gauss_residual'],
        'gauss_growth': max(r['gauss_residual'] for r in rows) - rows[0]['gauss_residual'],
        'final_zeros': [[z.real, z.imag] for z in rows[-1]['zeros']],
    }
    columns = ['t'] + _zero_columns(degree) + ['E_total', 'T', 'U', 'gauss_residual']
    table_rows = [[r['t']] + _flatten(r['zeros'], degree) + [r['E_total'], r['T'], r['U'], r['gauss_residual']]
                  for r in rows]
    report = ExperimentReport(config=ec, headline=headline,
                              tables={'trajectory': {'columns': columns, 'rows': table_rows}},
                              iterations={'leapfrog_steps': dyn['n_steps']})
    return report, snapshots


def run_adiabatic_compare(ec: ExperimentConfig, n_jobs: int) -> Tuple[ExperimentReport, Dict[str, bytes]]:
    grid = _grid(ec)
    params = _solver_params(ec)
    dyn = ec.dynamics
    zeros = _zeros(ec)
    q0, qdot0 = _chart_state(zeros, ec.moduli['velocities'])
    oracle = _metric_oracle(ec, len(zeros), n_jobs)
    evolution = EvolutionParams(dt=dyn['dt'], n_steps=0, sample_every=dyn['sample_every'], tau=params.tau)
    reports = Parallel(n_jobs=n_jobs)(
        delayed(GLEvolution.adiabatic_compare)(q0, qdot0, eps, dyn['slow_time_end'], grid, params,
                                               evolution, oracle, ec.moduli['fd_step'])
        for eps in dyn['epsilons'])

    ordered = sorted(reports, key=lambda r: -r.epsilon)
    devs = [r.deviation for r in ordered]
    headline = {
        'deviations': {str(r.epsilon): r.deviation for r in ordered},
        'strictly_decreasing': all(b < a for a, b in zip(devs, devs[1:])),
        'smallest_epsilon_relative_deviation': ordered[-1].relative_deviation,
        'max_energy_drift': max(r.energy_drift for r in ordered),
        'max_gauss_growth': max(r.gauss_growth for r in ordered),
    }
    rows = [[r.epsilon, r.deviation, r.path_length, r.relative_deviation, r.energy_drift, r.gauss_growth]
            for r in ordered]
    report = ExperimentReport(config=ec, headline=headline, tables={
        'dev_vs_epsilon': {'columns': ['epsilon', 'deviation', 'path_length', 'relative_deviation',
                                       'energy_drift', 'gauss_growth'], 'rows': rows}})
    return report, {}


RUNNERS: Dict[str, Callable[[ExperimentConfig, int], Tuple[ExperimentReport, Dict[str, bytes]]]] = {
    'solve-disk': run_solve,
    'solve-torus': run_solve,
    'bradlow-sweep': run_bradlow_sweep,
    'metric': run_metric,
    'geodesic': run_geodesic,
    'scatter': run_scatter,
    'evolve': run_evolve,
    'adiabatic-compare': run_adiabatic_compare,
}


def run(config_path: str, experiment: Optional[str] = None, output_dir: Optional[str] = None,
        threads: Optional[int] = None) -> ExperimentReport:
    """
    Validate, run one experiment and write its artifacts.

    Args:
        config_path: TOML experiment file
        experiment: subcommand, checked against the file
        output_dir: overrides output_dir from the file
        threads: joblib workers (falls back to VORTEXLAB_THREADS)

    Returns:
        ExperimentReport: the report that was written to report.json
    """
    ec = load_config(config_path, experiment, output_dir)
    n_jobs = threads or get_config().thread_count()
    logger.info(f"Running {ec.experiment} with {n_jobs} worker(s) into {ec.output_dir}")

    start = time.perf_counter()
    report, binaries = RUNNERS[ec.experiment](ec, n_jobs)
    report.wall_clock = time.perf_counter() - start

    for name in sorted(binaries):
        ReportWriter.atomic_write_bytes(os.path.join(ec.output_dir, name), binaries[name])
        report.artifacts.append(name)
    ReportWriter.emit_plotdata(report, ec.output_dir)
    logger.info(f"{ec.experiment} finished in {report.wall_clock:.2f} s")
    return report
