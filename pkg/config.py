"""
Configuration settings for the vortexlab numerical laboratory.

This module contains the environment-driven settings (threads, logging,
cache location) and the numerical defaults shared by the solvers, the
moduli-space integrators and the hyperbolic evolution.
"""

import os

from dotenv import load_dotenv

load_dotenv()


class Config:
    """Base configuration class with common settings."""

    # Runtime
    THREADS = os.environ.get('VORTEXLAB_THREADS') or '1'
    CACHE_DIR = os.environ.get('VORTEXLAB_CACHE_DIR') or None

    # Logging Configuration
    LOG_LEVEL = os.environ.get('LOG_LEVEL') or 'INFO'
    LOG_FILE = os.environ.get('LOG_FILE') or None

    # Taubes solver defaults
    SOLVER_TOL = 1e-10
    SOLVER_MAX_ITERS = 50
    SOLVER_MU = 1.0
    CG_RTOL = 1e-12
    CG_MAXITER = 500

    # Lattice observables
    VORTEX_NUMBER_THRESHOLD = 0.1  # |Phi| below this makes arg(Phi) unreliable
    BOUNDARY_CLEARANCE = 3.0       # zeros must sit inside R - 3 on the disk

    # Moduli space
    FD_STEP = 1e-2
    NEAR_COINCIDENCE_FACTOR = 4.0
    SPD_EIGEN_FLOOR = 1e-8

    # Hyperbolic evolution
    CFL_LIMIT = 0.5
    BLOWUP_THRESHOLD = 0.1  # relative energy jump that aborts a run

    # Report emission
    CSV_FLOAT_FORMAT = '%.12e'

    @classmethod
    def thread_count(cls) -> int:
        """Parsed VORTEXLAB_THREADS.

        Raises:
            ValueError: not a positive integer
        """
        try:
            threads = int(cls.THREADS)
        except (TypeError, ValueError):
            raise ValueError(f"VORTEXLAB_THREADS must be a positive integer, got {cls.THREADS!r}")
        if threads < 1:
            raise ValueError(f"VORTEXLAB_THREADS must be a positive integer, got {threads}")
        return threads

    @classmethod
    def validate(cls):
        """Check settings that can be wrong in the environment."""
        cls.thread_count()


class DevelopmentConfig(Config):
    """Development configuration with verbose logging."""
    LOG_LEVEL = os.environ.get('LOG_LEVEL') or 'DEBUG'


class ProductionConfig(Config):
    """Production configuration for long experiment sweeps."""
    LOG_LEVEL = os.environ.get('LOG_LEVEL') or 'INFO'
    LOG_FILE = os.environ.get('LOG_FILE') or 'vortexlab.log'


class TestingConfig(Config):
    """Testing configuration with relaxed tolerances and no cache."""
    THREADS = 1
    CACHE_DIR = None
    LOG_LEVEL = 'WARNING'
    SOLVER_TOL = 1e-9


# Configuration mapping
config = {
    'development': DevelopmentConfig,
    'production': ProductionConfig,
    'testing': TestingConfig,
    'default': ProductionConfig
}


def get_config(name=None):
    """Return the configuration class selected by name or VORTEXLAB_ENV."""
    name = name or os.environ.get('VORTEXLAB_ENV') or 'default'
    return config.get(name, config['default'])
