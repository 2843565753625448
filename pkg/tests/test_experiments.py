"""
Unit tests for experiment orchestration and the command line.

This module tests:
- Experiment file validation
- End-to-end runs of every experiment and the artifacts they write
- Exit codes of the command-line runner
- CSV and JSON artifact writing
"""

import unittest
import sys
import os
import json
import shutil
import tempfile
from unittest.mock import patch

import numpy as np

# Add the parent directory to the path so we can import our modules
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import vortexlab
from config import get_config
from experiments import bradlow_sweep, load_config, run, validate_config
from models import SolverParams, ZeroDivisor
from utils.errors import CFLViolation, ConfigValidationError
from utils.lattice import LatticeOps
from utils.reporting import ReportWriter

SOLVE_DISK = """
experiment = "solve-disk"
output_dir = "{out}"

[grid]
domain = "disk"
extent = 6.0
n = 128

[divisor]
points = [[0.3, 0.1, 1]]

[solver]
tol = 1e-9
"""

SWEEP = """
experiment = "bradlow-sweep"
output_dir = "{out}"

[grid]
domain = "torus"
extent = 8.0
n = 32

[divisor]
points = [[4.05, 3.95, 1]]

[sweep]
taus = [0.1, 0.5, 1.0]
"""

METRIC = """
experiment = "metric"
output_dir = "{out}"

[grid]
domain = "disk"
extent = 6.0
n = 48

[divisor]
points = [[0.2, 0.1, 1]]

[solver]
tol = 1e-9

[moduli]
fd_step = 0.01
"""

GEODESIC = """
experiment = "geodesic"
output_dir = "{out}"

[grid]
domain = "disk"
extent = 6.0
n = 32

[divisor]
points = [[-2.0, 0.0, 1], [2.0, 0.0, 1]]

[moduli]
metric = "pair-asymptotic"
velocities = [[0.5, 0.0], [-0.5, 0.0]]
t_end = 6.0
h_step = 0.01
"""

SCATTER = """
experiment = "scatter"
output_dir = "{out}"

[grid]
domain = "disk"
extent = 6.0
n = 32

[moduli]
metric = "pair-asymptotic"
impact_parameters = [0.0, 8.0]
separation = 3.0
speed = 0.5
h_step = 0.01
"""

EVOLVE = """
experiment = "evolve"
output_dir = "{out}"

[grid]
domain = "disk"
extent = 6.0
n = 48

[divisor]
points = [[0.3, 0.1, 1]]

[solver]
tol = 1e-9

[dynamics]
velocities = [[0.2, 0.0]]
n_steps = 40
sample_every = 10
snapshot_every = 20
"""

ADIABATIC = """
experiment = "adiabatic-compare"
output_dir = "{out}"

[grid]
domain = "disk"
extent = 6.0
n = 64

[divisor]
points = [[0.3, 0.1, 1]]

[solver]
tol = 1e-9

[dynamics]
epsilons = [0.4, 0.2]
slow_time_end = 0.4
sample_every = 8

[moduli]
velocities = [[1.0, 0.0]]
"""


class ExperimentTestCase(unittest.TestCase):
    """Shared temporary directory handling."""

    def setUp(self):
        """Set up a scratch directory."""
        self.workdir = tempfile.mkdtemp()
        self.out = os.path.join(self.workdir, 'out')

    def tearDown(self):
        """Clean up the scratch directory."""
        shutil.rmtree(self.workdir, ignore_errors=True)

    def write_config(self, text):
        path = os.path.join(self.workdir, 'experiment.toml')
        with open(path, 'w') as handle:
            handle.write(text.format(out=self.out))
        return path


class TestValidation(ExperimentTestCase):
    """Test experiment file validation."""

    def base(self):
        return {'experiment': 'solve-disk', 'output_dir': self.out,
                'grid': {'domain': 'disk', 'extent': 6.0, 'n': 64},
                'divisor': {'points': [[0.3, 0.1, 1]]}}

    def test_defaults_filled(self):
        """Test that omitted settings take the configured defaults."""
        ec = validate_config(self.base())
        self.assertEqual(ec.solver['max_iters'], get_config().SOLVER_MAX_ITERS)
        self.assertEqual(ec.solver['tol'], get_config().SOLVER_TOL)
        self.assertEqual(ec.divisor, [(0.3 + 0.1j, 1)])
        self.assertAlmostEqual(ec.dynamics['dt'], 0.25 * 12.0 / 64)

    def test_negative_tau(self):
        """Test rejection of a negative tau."""
        raw = self.base()
        raw['solver'] = {'tau': -1.0}
        with self.assertRaises(ConfigValidationError):
            validate_config(raw)

    def test_unknown_keys(self):
        """Test rejection of unknown keys at both levels."""
        raw = self.base()
        raw['colour'] = 'red'
        with self.assertRaises(ConfigValidationError):
            validate_config(raw)
        raw = self.base()
        raw['grid']['spacing'] = 0.1
        with self.assertRaises(ConfigValidationError):
            validate_config(raw)

    def test_odd_resolution(self):
        """Test rejection of an odd n."""
        raw = self.base()
        raw['grid']['n'] = 63
        with self.assertRaises(ConfigValidationError):
            validate_config(raw)

    def test_domain_mismatch(self):
        """Test that torus-only experiments refuse a disk."""
        raw = self.base()
        raw['experiment'] = 'bradlow-sweep'
        with self.assertRaises(ConfigValidationError):
            validate_config(raw)

    def test_subcommand_mismatch(self):
        """Test that the subcommand must match the file."""
        with self.assertRaises(ConfigValidationError):
            validate_config(self.base(), experiment='evolve')

    def test_unsorted_taus(self):
        """Test that sweep values must ascend."""
        raw = self.base()
        raw['sweep'] = {'taus': [1.0, 0.5]}
        with self.assertRaises(ConfigValidationError):
            validate_config(raw)

    def test_cfl_violation(self):
        """Test that an oversized time step is refused before compute."""
        raw = self.base()
        raw['experiment'] = 'evolve'
        raw['dynamics'] = {'cfl': 0.9}
        with self.assertRaises(CFLViolation):
            validate_config(raw)

    def test_disk_needs_unit_tau(self):
        """Test that the plane surrogate runs at tau = 1."""
        raw = self.base()
        raw['solver'] = {'tau': 2.0}
        with self.assertRaises(ConfigValidationError):
            validate_config(raw)

    def test_missing_file(self):
        """Test a missing config path."""
        with self.assertRaises(ConfigValidationError):
            load_config(os.path.join(self.workdir, 'missing.toml'))

    def test_invalid_toml(self):
        """Test a malformed config file."""
        path = os.path.join(self.workdir, 'bad.toml')
        with open(path, 'w') as handle:
            handle.write('experiment = = "solve-disk"\n')
        with self.assertRaises(ConfigValidationError):
            load_config(path)


class TestRuns(ExperimentTestCase):
    """Test complete experiment runs."""

    def test_solve_disk(self):
        """Test a minimal d = 1 run: U within a percent of pi."""
        report = run(self.write_config(SOLVE_DISK))
        self.assertAlmostEqual(report.headline['energy'], np.pi, delta=0.01 * np.pi)
        self.assertEqual(report.headline['vortex_number'], 1)
        for name in ('report.json', 'energy.csv', 'slice.csv', 'zeros.csv', 'solution.glf1'):
            self.assertTrue(os.path.exists(os.path.join(self.out, name)), name)
        with open(os.path.join(self.out, 'report.json')) as handle:
            payload = json.load(handle)
        self.assertEqual(payload['config']['experiment'], 'solve-disk')
        self.assertIn('wall_clock_seconds', payload)
        self.assertIn('solution.glf1', payload['artifacts'])

    def test_solve_disk_deterministic(self):
        """Test that CSV output is byte-identical across runs."""
        path = self.write_config(SOLVE_DISK)
        run(path)
        with open(os.path.join(self.out, 'energy.csv'), 'rb') as handle:
            first = handle.read()
        run(path)
        with open(os.path.join(self.out, 'energy.csv'), 'rb') as handle:
            self.assertEqual(handle.read(), first)

    def test_bradlow_sweep(self):
        """Test that rows below the critical tau are marked infeasible."""
        report = run(self.write_config(SWEEP))
        rows = report.tables['bradlow_sweep']['rows']
        self.assertEqual([row[2] for row in rows], [0.0, 1.0, 1.0])
        self.assertTrue(report.headline['monotone_max_abs_phi_squared'])
        self.assertLess(report.headline['max_mass_rel_error'], 1e-3)

    def test_metric(self):
        """Test that the d = 1 metric run finds g = pi I and writes its table."""
        report = run(self.write_config(METRIC))
        self.assertLess(report.headline['max_rel_dev_from_pi'], 0.05)
        for ratio in report.headline['translational_oracle_ratio']:
            self.assertAlmostEqual(ratio, 1.0, delta=0.1)
        self.assertLess(report.headline['fd_step_sensitivity'], 0.01)
        with open(os.path.join(self.out, 'metric.csv')) as handle:
            lines = handle.read().splitlines()
        self.assertEqual(lines[0], 'point,row,g0,g1,eigenvalue')
        self.assertEqual(len(lines), 3)

    def test_geodesic(self):
        """Test a head-on geodesic run: right-angle scattering with conserved kinetic scalar."""
        report = run(self.write_config(GEODESIC))
        self.assertAlmostEqual(report.headline['scattering_angle'], 90.0, delta=1.0)
        self.assertAlmostEqual(abs(report.headline['deflection_deg']), 90.0, delta=1.0)
        self.assertLess(report.headline['kinetic_drift'], 1e-3)
        self.assertGreater(report.iterations['geodesic_steps'], 0)
        self.assertTrue(os.path.exists(os.path.join(self.out, 'trajectory.csv')))
        with open(os.path.join(self.out, 'report.json')) as handle:
            payload = json.load(handle)
        self.assertIn('trajectory.csv', payload['artifacts'])

    def test_scatter(self):
        """Test that the angle falls from 90 degrees head-on to nearly zero at a wide pass."""
        report = run(self.write_config(SCATTER))
        table = report.tables['angle_vs_impact']
        self.assertEqual(table['columns'][:3], ['impact_parameter', 'angle_deg', 'deflection_deg'])
        head_on, wide = table['rows']
        self.assertAlmostEqual(head_on[1], 90.0, delta=1.0)
        self.assertLess(wide[1], 1.0)
        self.assertLess(abs(wide[2]), 1.0)
        self.assertAlmostEqual(report.headline['head_on_angle'], 90.0, delta=1.0)
        self.assertTrue(os.path.exists(os.path.join(self.out, 'angle_vs_impact.csv')))

    def test_evolve(self):
        """Test an evolution run: conservation headlines and one snapshot per 20 steps."""
        report = run(self.write_config(EVOLVE))
        self.assertLess(report.headline['energy_drift'], 1e-3)
        self.assertLess(report.headline['gauss_residual_initial'], 1e-8)
        self.assertLess(report.headline['gauss_growth'], 1e-8)
        for name in ('state_00000000.gld1', 'state_00000020.gld1', 'state_00000040.gld1',
                     'trajectory.csv', 'report.json'):
            self.assertTrue(os.path.exists(os.path.join(self.out, name)), name)
        with open(os.path.join(self.out, 'state_00000020.gld1'), 'rb') as handle:
            self.assertEqual(handle.read(4), b'GLD1')
        with open(os.path.join(self.out, 'trajectory.csv')) as handle:
            self.assertEqual(len(handle.read().splitlines()), 1 + 5)

    def test_adiabatic_compare(self):
        """Test one row per epsilon, fastest first, with small deviations for one vortex."""
        report = run(self.write_config(ADIABATIC))
        rows = report.tables['dev_vs_epsilon']['rows']
        self.assertEqual([row[0] for row in rows], [0.4, 0.2])
        for row in rows:
            self.assertLess(row[1], 0.1)
        self.assertLess(report.headline['max_energy_drift'], 1e-3)
        self.assertEqual(set(report.headline['deviations']), {'0.4', '0.2'})
        self.assertTrue(os.path.exists(os.path.join(self.out, 'dev_vs_epsilon.csv')))


class TestBradlowSweep(unittest.TestCase):
    """Test the sweep function directly."""

    def test_requires_ascending(self):
        """Test that tau_list must be sorted."""
        grid = LatticeOps.make_grid('torus', 8.0, 32)
        with self.assertRaises(ConfigValidationError):
            bradlow_sweep(ZeroDivisor([(4.05 + 3.95j, 1)]), [1.0, 0.5], grid, SolverParams())

    def test_newton_iterations_bounded(self):
        """Test that every feasible sweep point converges within 25 Newton steps."""
        grid = LatticeOps.make_grid('torus', 8.0, 64)
        table = bradlow_sweep(ZeroDivisor([(4.05 + 3.95j, 1)]), [0.3, 0.5, 1.0], grid, SolverParams(tol=1e-9))
        self.assertTrue(all(row[2] for row in table['rows']))
        for row in table['rows']:
            self.assertLessEqual(row[4], 25)
        self.assertTrue(table['monotone'])


class TestCommandLine(ExperimentTestCase):
    """Test exit codes."""

    def test_success(self):
        """Test exit 0 for a valid run."""
        self.assertEqual(vortexlab.main(['solve-disk', '--config', self.write_config(SOLVE_DISK)]), 0)

    def test_out_override(self):
        """Test that --out redirects artifacts."""
        other = os.path.join(self.workdir, 'elsewhere')
        path = self.write_config(SOLVE_DISK)
        self.assertEqual(vortexlab.main(['solve-disk', '--config', path, '--out', other]), 0)
        self.assertTrue(os.path.exists(os.path.join(other, 'report.json')))
        self.assertFalse(os.path.exists(self.out))

    def test_validation_exit_code(self):
        """Test exit 2 with no output directory for a negative tau."""
        text = SOLVE_DISK.replace('tol = 1e-9', 'tol = 1e-9\ntau = -1.0')
        self.assertEqual(vortexlab.main(['solve-disk', '--config', self.write_config(text)]), 2)
        self.assertFalse(os.path.exists(self.out))

    def test_solver_exit_code(self):
        """Test exit 3 when Newton runs out of iterations."""
        text = SOLVE_DISK.replace('tol = 1e-9', 'tol = 1e-14\nmax_iters = 1')
        self.assertEqual(vortexlab.main(['solve-disk', '--config', self.write_config(text)]), 3)

    def test_cfl_exit_code(self):
        """Test exit 4 for an oversized time step."""
        text = SOLVE_DISK.replace('"solve-disk"', '"evolve"') + '\n[dynamics]\ncfl = 0.9\n'
        self.assertEqual(vortexlab.main(['evolve', '--config', self.write_config(text)]), 4)

    def test_bad_threads(self):
        """Test exit 2 for a non-positive thread count."""
        path = self.write_config(SOLVE_DISK)
        self.assertEqual(vortexlab.main(['solve-disk', '--config', path, '--threads', '0']), 2)

    def test_bad_thread_environment(self):
        """Test exit 2 when VORTEXLAB_THREADS is not an integer."""
        path = self.write_config(SOLVE_DISK)
        with patch.object(get_config(), 'THREADS', 'many'):
            self.assertEqual(vortexlab.main(['solve-disk', '--config', path]), 2)
        self.assertFalse(os.path.exists(self.out))

    def test_stagnation_factor_validated(self):
        """Test exit 2 for a negative stagnation factor."""
        text = SOLVE_DISK.replace('tol = 1e-9', 'tol = 1e-9\nstagnation_factor = -1.0')
        self.assertEqual(vortexlab.main(['solve-disk', '--config', self.write_config(text)]), 2)


class TestReportWriter(ExperimentTestCase):
    """Test artifact formatting."""

    def test_csv_format(self):
        """Test header and fixed float format."""
        data = ReportWriter.format_csv(['a', 'b'], [[1.0, 0.5]])
        self.assertEqual(data.decode().splitlines(), ['a,b', '1.000000000000e+00,5.000000000000e-01'])

    def test_atomic_write_leaves_no_temp_files(self):
        """Test that only the target file remains."""
        path = os.path.join(self.workdir, 'nested', 'x.json')
        ReportWriter.write_json(path, {'value': np.float64(1.5), 'z': 1 + 2j})
        self.assertEqual(os.listdir(os.path.dirname(path)), ['x.json'])
        with open(path) as handle:
            self.assertEqual(json.load(handle), {'value': 1.5, 'z': [1.0, 2.0]})


if __name__ == '__main__':
    unittest.main()
