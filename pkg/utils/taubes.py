"""
Vortex solver for vortexlab.

Builds d-vortex solutions with a prescribed zero divisor by Newton
iteration on the scalar Taubes equation for u = log|Phi|^2,

    Laplace(u) = e^u - tau + 4 pi sum_j d_j delta_{z_j},

on the plane surrogate [-R, R]^2 (Dirichlet data |Phi| = 1 on the outer
ring, sparse 5-point Laplacian) and on the flat torus (spectral Laplacian,
conjugate gradients with an FFT preconditioner). The fields (a, Phi) are
then reconstructed from u so that the first vortex equation holds in the
continuum.
"""

import logging
from typing import Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import LinearOperator, cg, spsolve

from config import get_config
from models import FieldConfig, Grid2D, SolverParams, TaubesSolution, ZeroDivisor
from utils.errors import BradlowViolation, NonConvergence, ZeroTooCloseToBoundary
from utils.lattice import LatticeOps, _forward, _wrap_angle

logger = logging.getLogger(__name__)

# Cutoff radii of the torus singular profile, as fractions of L
CUTOFF_INNER = 0.25
CUTOFF_OUTER = 0.45

LOG_FLOOR = -700.0


def _bump(t: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """exp(-1/t) for t > 0 (else 0) with its first two derivatives."""
    with np.errstate(divide='ignore', over='ignore', invalid='ignore'):
        safe = np.where(t > 0, t, 1.0)
        f = np.where(t > 0, np.exp(-1.0 / safe), 0.0)
        df = np.where(t > 0, f / safe ** 2, 0.0)
        d2f = np.where(t > 0, f * (1.0 / safe ** 4 - 2.0 / safe ** 3), 0.0)
    return f, df, d2f


def _cutoff(r: np.ndarray, r_inner: float, r_outer: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """C-infinity radial cutoff: 1 for r <= r_inner, 0 for r >= r_outer, with d/dr and d2/dr2."""
    width = r_outer - r_inner
    s = (r - r_inner) / width
    a, da, d2a = _bump(1.0 - s)
    b, db, d2b = _bump(s)
    da, d2a = -da, d2a
    total = a + b
    chi = a / total
    d_total = da + db
    dchi = (da * total - a * d_total) / total ** 2
    d2chi = ((d2a * total - a * (d2a + d2b)) / total ** 2
             - 2.0 * d_total * (da * total - a * d_total) / total ** 3)
    return chi, dchi / width, d2chi / width ** 2


def _spectral_wavenumbers(grid: Grid2D) -> Tuple[np.ndarray, np.ndarray]:
    k = 2.0 * np.pi * np.fft.fftfreq(grid.n, d=grid.h)
    return np.meshgrid(k, k, indexing='ij')


def _spectral_laplacian(v: np.ndarray, k2: np.ndarray) -> np.ndarray:
    return np.fft.ifft2(-k2 * np.fft.fft2(v)).real


def _spectral_shift(v: np.ndarray, grid: Grid2D, shift: Tuple[float, float],
                    derivative: Optional[int] = None) -> np.ndarray:
    """Trigonometric interpolation of v (or d v / d x_axis) at nodes shifted by shift * h."""
    kx, ky = _spectral_wavenumbers(grid)
    nyquist = grid.n // 2
    kx[nyquist, :] = 0.0
    ky[:, nyquist] = 0.0
    factor = np.exp(1j * grid.h * (kx * shift[0] + ky * shift[1]))
    if derivative is not None:
        factor = factor * 1j * (kx if derivative == 0 else ky)
    return np.fft.ifft2(factor * np.fft.fft2(v)).real


class TaubesSolver:
    """Newton solvers for the Taubes equation and field reconstruction."""

    @staticmethod
    def bradlow_margin(d: int, tau: float, vol: float, scale: float = 1.0) -> float:
        """
        Solvability margin tau * vol - 4 pi d on a compact surface.

        Args:
            d: vortex number
            tau: scale parameter
            vol: surface area
            scale: metric scale t (g -> t^2 g multiplies vol by t^2)

        Returns:
            float: the margin; solutions exist iff it is positive
        """
        if d < 1 or not tau > 0 or not vol > 0 or not scale > 0:
            raise ValueError("bradlow_margin needs d >= 1 and positive tau, vol, scale")
        return tau * scale ** 2 * vol - 4.0 * np.pi * d

    @staticmethod
    def critical_scale(d: int, tau: float, vol: float) -> float:
        """Smallest metric scale t at which a degree-d divisor becomes solvable."""
        if d < 1 or not tau > 0 or not vol > 0:
            raise ValueError("critical_scale needs d >= 1 and positive tau, vol")
        return float(np.sqrt(4.0 * np.pi * d / (tau * vol)))

    @staticmethod
    def critical_tau(d: int, vol: float) -> float:
        return 4.0 * np.pi * d / vol

    # ------------------------------------------------------------------
    # Singular profiles

    @staticmethod
    def disk_profile(divisor: ZeroDivisor, grid: Grid2D, mu: float,
                     shift: Tuple[float, float] = (0.0, 0.0)) -> Tuple[np.ndarray, np.ndarray]:
        """
        log g = sum d_j log(r_j^2 / (1 + mu r_j^2)) and the smooth source
        s = sum 4 mu d_j / (1 + mu r_j^2)^2 on (shifted) nodes.
        """
        x, y = grid.mesh(shift)
        log_g = np.zeros_like(x)
        source = np.zeros_like(x)
        for z, d in divisor.points:
            r2 = (x - z.real) ** 2 + (y - z.imag) ** 2
            with np.errstate(divide='ignore'):
                log_g += d * (np.log(r2) - np.log1p(mu * r2))
            source += 4.0 * mu * d / (1.0 + mu * r2) ** 2
        return log_g, source

    @staticmethod
    def torus_profile(divisor: ZeroDivisor, grid: Grid2D, mu: float,
                      shift: Tuple[float, float] = (0.0, 0.0)) -> Tuple[np.ndarray, np.ndarray]:
        """
        Periodic singular profile sum d_j chi(r_j) log(mu r_j^2 / (1 + mu r_j^2))
        on minimum-image distances, and its Laplacian away from the zeros.

        Each zero's source is rescaled so that h^2 sum(source_j) = -4 pi d_j
        on the grid; the discrete mass identity then holds to Newton precision.
        """
        x, y = grid.mesh(shift)
        r_in, r_out = CUTOFF_INNER * grid.side, CUTOFF_OUTER * grid.side
        log_g = np.zeros_like(x)
        source = np.zeros_like(x)
        for z, d in divisor.points:
            dx = grid.minimum_image(x - z.real)
            dy = grid.minimum_image(y - z.imag)
            r2 = dx ** 2 + dy ** 2
            r = np.sqrt(r2)
            chi, dchi, d2chi = _cutoff(r, r_in, r_out)
            with np.errstate(divide='ignore', invalid='ignore'):
                ell = np.log(mu * r2) - np.log1p(mu * r2)
                log_g += d * np.where(chi > 0, chi * ell, 0.0)
                dell = 2.0 / (r * (1.0 + mu * r2))
                ring = np.where(r > r_in, 2.0 * dchi * dell + ell * (d2chi + dchi / r), 0.0)
            part = chi * (-4.0 * mu / (1.0 + mu * r2) ** 2) + ring
            total = grid.area_element * float(np.sum(part))
            if total < 0:
                part = part * (-4.0 * np.pi / total)
            source += d * part
        return log_g, source

    # ------------------------------------------------------------------
    # Validation

    @staticmethod
    def check_disk_divisor(divisor: ZeroDivisor, grid: Grid2D, clearance: Optional[float] = None):
        """Reject zeros within ``clearance`` of the disk boundary."""
        settings = get_config()
        clearance = settings.BOUNDARY_CLEARANCE if clearance is None else clearance
        limit = grid.extent - clearance
        for z, _ in divisor.points:
            if abs(z) > limit:
                raise ZeroTooCloseToBoundary(
                    f"zero {z} lies outside radius {limit:.4g} (R={grid.extent}, clearance {clearance})")

    # ------------------------------------------------------------------
    # Newton iterations

    @staticmethod
    def _newton_disk(divisor: ZeroDivisor, grid: Grid2D, params: SolverParams) -> Tuple[np.ndarray, float, int]:
        n, h, tau = grid.n, grid.h, params.tau
        m = n - 2
        log_g, source = TaubesSolver.disk_profile(divisor, grid, params.mu)
        interior = grid.interior_mask()

        v = np.zeros((n, n))
        v[~interior] = -log_g[~interior]

        tri = sparse.diags([1.0, -2.0, 1.0], [-1, 0, 1], shape=(m, m))
        eye = sparse.identity(m)
        lap = ((sparse.kron(tri, eye) + sparse.kron(eye, tri)) / h ** 2).tocsc()

        boundary = np.zeros((m, m))
        boundary[0, :] += v[0, 1:-1]
        boundary[-1, :] += v[-1, 1:-1]
        boundary[:, 0] += v[1:-1, 0]
        boundary[:, -1] += v[1:-1, -1]
        boundary = boundary.ravel() / h ** 2

        g = np.exp(log_g[1:-1, 1:-1]).ravel()
        rhs_const = tau - source[1:-1, 1:-1].ravel()
        vi = v[1:-1, 1:-1].ravel().copy()

        residual = np.inf
        for iteration in range(params.max_iters + 1):
            nonlinear = g * np.exp(vi)
            defect = lap @ vi + boundary - nonlinear + rhs_const
            residual = float(np.sqrt(h ** 2 * np.sum(defect ** 2)))
            logger.debug(f"disk Newton iteration {iteration}: residual {residual:.3e}")
            if residual < params.tol:
                break
            if iteration == params.max_iters:
                raise NonConvergence(params.max_iters, residual)
            jac = (lap - sparse.diags(nonlinear)).tocsc()
            vi = vi + spsolve(jac, -defect)

        v[1:-1, 1:-1] = vi.reshape(m, m)
        return v, residual, iteration

    @staticmethod
    def _newton_torus(divisor: ZeroDivisor, grid: Grid2D, params: SolverParams,
                      initial_v: Optional[np.ndarray] = None) -> Tuple[np.ndarray, float, int]:
        settings = get_config()
        n, h, tau = grid.n, grid.h, params.tau
        log_g, source = TaubesSolver.torus_profile(divisor, grid, params.mu)
        g = np.exp(log_g)
        kx, ky = _spectral_wavenumbers(grid)
        k2 = kx ** 2 + ky ** 2

        if initial_v is not None:
            v = np.array(initial_v, dtype=float)
        else:
            margin = TaubesSolver.bradlow_margin(divisor.degree, tau, grid.volume)
            v = np.full((n, n), np.log(margin / (grid.area_element * np.sum(g))))

        residual = np.inf
        history = []
        warned = False
        for iteration in range(params.max_iters + 1):
            nonlinear = g * np.exp(v)
            defect = _spectral_laplacian(v, k2) - nonlinear + tau + source
            residual = float(np.sqrt(h ** 2 * np.sum(defect ** 2)))
            logger.debug(f"torus Newton iteration {iteration}: residual {residual:.3e}")
            if residual < params.tol:
                break
            stalled = len(history) >= 2 and residual > 0.5 * history[-2]
            if stalled and not warned:
                logger.warning(f"torus Newton stagnated at residual {residual:.3e} (tol {params.tol:.1e})")
                warned = True
            if stalled and residual < params.stagnation_factor * params.tol:
                logger.warning(f"accepting stalled iterate within {params.stagnation_factor:g} * tol")
                break
            if iteration == params.max_iters:
                raise NonConvergence(params.max_iters, residual)
            history.append(residual)

            weight = nonlinear
            weight_mean = float(np.mean(weight))

            def matvec(x, weight=weight):
                field = x.reshape(n, n)
                return (weight * field - _spectral_laplacian(field, k2)).ravel()

            def precondition(x, weight_mean=weight_mean):
                return np.fft.ifft2(np.fft.fft2(x.reshape(n, n)) / (k2 + weight_mean)).real.ravel()

            operator = LinearOperator((n * n, n * n), matvec=matvec, dtype=float)
            preconditioner = LinearOperator((n * n, n * n), matvec=precondition, dtype=float)
            step, info = cg(operator, defect.ravel(), rtol=settings.CG_RTOL,
                            maxiter=settings.CG_MAXITER, M=preconditioner)
            if info != 0:
                logger.warning(f"conjugate gradients stopped early (info={info}) in Newton step {iteration}")
            v = v + step.reshape(n, n)

        return v, residual, iteration

    # ------------------------------------------------------------------
    # Field reconstruction

    @staticmethod
    def _reconstruct_disk(v: np.ndarray, divisor: ZeroDivisor, grid: Grid2D, mu: float) -> FieldConfig:
        x, y = grid.mesh()
        h = grid.h
        phi = np.exp(0.5 * v).astype(complex)
        for z, d in divisor.points:
            w = (x - z.real) + 1j * (y - z.imag)
            phi *= (w / np.sqrt(1.0 + mu * np.abs(w) ** 2)) ** d

        dv1, dv2 = np.gradient(v, h, edge_order=2)
        a1 = -0.25 * (dv2 + _forward(dv2, 0))
        a2 = 0.25 * (dv1 + _forward(dv1, 1))
        x1, y1 = grid.mesh((0.5, 0.0))
        x2, y2 = grid.mesh((0.0, 0.5))
        for z, d in divisor.points:
            dx1, dy1 = x1 - z.real, y1 - z.imag
            a1 += d * mu * dy1 / (1.0 + mu * (dx1 ** 2 + dy1 ** 2))
            dx2, dy2 = x2 - z.real, y2 - z.imag
            a2 -= d * mu * dx2 / (1.0 + mu * (dx2 ** 2 + dy2 ** 2))
        return FieldConfig(a1 * grid.link_mask(0), a2 * grid.link_mask(1), phi)

    @staticmethod
    def _torus_swirl(divisor: ZeroDivisor, grid: Grid2D, mu: float,
                     shift: Tuple[float, float], axis: int) -> np.ndarray:
        """Smooth part of (1/2) * d(singular profile) at link midpoints, component ``axis``."""
        x, y = grid.mesh(shift)
        r_in, r_out = CUTOFF_INNER * grid.side, CUTOFF_OUTER * grid.side
        out = np.zeros_like(x)
        for z, d in divisor.points:
            dx = grid.minimum_image(x - z.real)
            dy = grid.minimum_image(y - z.imag)
            r2 = dx ** 2 + dy ** 2
            r = np.sqrt(r2)
            chi, dchi, _ = _cutoff(r, r_in, r_out)
            with np.errstate(divide='ignore', invalid='ignore'):
                ell = np.log(mu * r2) - np.log1p(mu * r2)
                coeff = -chi * mu / (1.0 + mu * r2) + np.where(r > r_in, 0.5 * ell * dchi / r, 0.0)
            out += d * (-dy if axis == 0 else dx) * coeff
        return out

    @staticmethod
    def _reconstruct_torus(v: np.ndarray, divisor: ZeroDivisor, grid: Grid2D,
                           mu: float, tau: float) -> FieldConfig:
        """
        Real gauge: Phi = e^{u/2}, a = (1/2) * du with the winding part taken as
        exact link integrals of d(arg w). The flux string is curl(a) minus the
        physical curvature -(tau - e^u)/2.
        """
        h = grid.h
        log_g, _ = TaubesSolver.torus_profile(divisor, grid, mu)
        u = np.maximum(log_g + v, LOG_FLOOR)
        phi = np.exp(0.5 * u).astype(complex)

        a1 = -0.5 * _spectral_shift(v, grid, (0.5, 0.0), derivative=1)
        a2 = 0.5 * _spectral_shift(v, grid, (0.0, 0.5), derivative=0)
        a1 += TaubesSolver._torus_swirl(divisor, grid, mu, (0.5, 0.0), 0)
        a2 += TaubesSolver._torus_swirl(divisor, grid, mu, (0.0, 0.5), 1)

        x, y = grid.mesh()
        r_in, r_out = CUTOFF_INNER * grid.side, CUTOFF_OUTER * grid.side
        for z, d in divisor.points:
            theta = np.angle(grid.minimum_image(x - z.real) + 1j * grid.minimum_image(y - z.imag))
            for axis, (shift, target) in enumerate((((0.5, 0.0), a1), ((0.0, 0.5), a2))):
                xm, ym = grid.mesh(shift)
                rm = np.hypot(grid.minimum_image(xm - z.real), grid.minimum_image(ym - z.imag))
                chi_mid, _, _ = _cutoff(rm, r_in, r_out)
                target += d * chi_mid * _wrap_angle(_forward(theta, axis) - theta) / h

        log_gp, _ = TaubesSolver.torus_profile(divisor, grid, mu, (0.5, 0.5))
        vp = _spectral_shift(v, grid, (0.5, 0.5))
        b_phys = -0.5 * (tau - np.exp(log_gp + vp))
        flux_string = LatticeOps.curl(a1, a2, grid) - b_phys
        return FieldConfig(a1, a2, phi, flux_string)

    @staticmethod
    def reconstruct_fields(u: np.ndarray, divisor: ZeroDivisor, grid: Grid2D,
                           tau: float = 1.0, mu: float = 1.0) -> FieldConfig:
        """
        Rebuild (a, Phi) from u = log|Phi|^2 and the zero divisor.

        Disk: Phi = e^{v/2} prod (w_j / sqrt(1 + mu |w_j|^2))^{d_j}, where
        v = u - log g is smooth, and a is chosen so (D1 + i D2) Phi = 0.
        Torus: real gauge with a periodic flux string (see CONVENTIONS.md).
        """
        mu = float(mu)
        profile = TaubesSolver.torus_profile if grid.is_torus else TaubesSolver.disk_profile
        log_g, _ = profile(divisor, grid, mu)
        with np.errstate(invalid='ignore'):
            v = np.asarray(u, dtype=float) - log_g
        bad = ~np.isfinite(v)
        if np.any(bad):
            # zeros sitting exactly on a node: fill from the neighbours
            neighbours = sum(np.roll(np.where(bad, 0.0, v), s, axis=a) for s in (1, -1) for a in (0, 1))
            count = sum(np.roll((~bad).astype(float), s, axis=a) for s in (1, -1) for a in (0, 1))
            v = np.where(bad, neighbours / np.maximum(count, 1.0), v)
        if grid.is_torus:
            return TaubesSolver._reconstruct_torus(v, divisor, grid, mu, tau)
        return TaubesSolver._reconstruct_disk(v, divisor, grid, mu)

    # ------------------------------------------------------------------
    # Public solvers

    @staticmethod
    def _package(v: np.ndarray, divisor: ZeroDivisor, grid: Grid2D, params: SolverParams,
                 residual: float, iterations: int) -> TaubesSolution:
        profile = TaubesSolver.torus_profile if grid.is_torus else TaubesSolver.disk_profile
        log_g, _ = profile(divisor, grid, params.mu)
        u = np.maximum(log_g + v, LOG_FLOOR)
        if grid.is_torus:
            cfg = TaubesSolver._reconstruct_torus(v, divisor, grid, params.mu, params.tau)
        else:
            cfg = TaubesSolver._reconstruct_disk(v, divisor, grid, params.mu)
        residuals = LatticeOps.vortex_residual(cfg, params.tau, grid)
        energy = LatticeOps.potential_energy(cfg, params.tau, grid)
        mass = grid.area_element * float(np.sum(np.exp(u)))

        peak = float(np.exp(u).max())
        if peak > params.tau + 10.0 * grid.area_element:
            logger.warning(f"max |Phi|^2 = {peak:.6g} exceeds tau = {params.tau}")
        logger.info(f"Solved d={divisor.degree} on {grid!r} in {iterations} Newton steps: "
                    f"U={energy.total:.8g}, r1={residuals[0]:.3e}, r2={residuals[1]:.3e}")
        return TaubesSolution(u=u, cfg=cfg, residuals=residuals, newton_iters=iterations,
                              newton_residual=residual, divisor=divisor, grid=grid,
                              tau=params.tau, energy=energy, mass=mass, smooth_part=v)

    @staticmethod
    def solve_taubes_disk(divisor: ZeroDivisor, grid: Grid2D, params: SolverParams) -> TaubesSolution:
        """
        Solve for the d-vortex on the plane surrogate.

        Args:
            divisor: prescribed zeros with multiplicities
            grid: disk grid
            params: Newton settings (tau is 1 on the plane)

        Returns:
            TaubesSolution: u, reconstructed fields and diagnostics

        Raises:
            ZeroTooCloseToBoundary: a zero lies outside radius R - clearance
            NonConvergence: Newton exhausted max_iters
        """
        if grid.is_torus:
            raise ValueError("solve_taubes_disk needs a disk grid")
        TaubesSolver.check_disk_divisor(divisor, grid)
        v, residual, iterations = TaubesSolver._newton_disk(divisor, grid, params)
        return TaubesSolver._package(v, divisor, grid, params, residual, iterations)

    @staticmethod
    def solve_taubes_torus(divisor: ZeroDivisor, grid: Grid2D, params: SolverParams,
                           initial_v: Optional[np.ndarray] = None) -> TaubesSolution:
        """
        Solve for the d-vortex on the flat torus of side L.

        Args:
            divisor: prescribed zeros (reduced mod L)
            grid: torus grid
            params: Newton settings
            initial_v: optional starting guess for the smooth part of u

        Returns:
            TaubesSolution: u, real-gauge fields and diagnostics

        Raises:
            BradlowViolation: tau * L^2 <= 4 pi d
            NonConvergence: Newton exhausted max_iters
        """
        if not grid.is_torus:
            raise ValueError("solve_taubes_torus needs a torus grid")
        divisor = divisor.reduced(grid.side)
        margin = TaubesSolver.bradlow_margin(divisor.degree, params.tau, grid.volume)
        if margin <= 0:
            raise BradlowViolation(divisor.degree, params.tau, grid.volume, margin)
        v, residual, iterations = TaubesSolver._newton_torus(divisor, grid, params, initial_v)
        solution = TaubesSolver._package(v, divisor, grid, params, residual, iterations)
        logger.info(f"Mass identity: integral e^u = {solution.mass:.10g}, margin = {margin:.10g}")
        return solution

    @staticmethod
    def solve(divisor: ZeroDivisor, grid: Grid2D, params: SolverParams) -> TaubesSolution:
        """Dispatch on the domain kind."""
        if grid.is_torus:
            return TaubesSolver.solve_taubes_torus(divisor, grid, params)
        return TaubesSolver.solve_taubes_disk(divisor, grid, params)
