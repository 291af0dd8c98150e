"""Forward divergence-form transport-diffusion solver with the adjoint kernel.

The equation marched here is

    d(rho)/dt = L* rho + div(b rho + c),    rho(t0) = rho0,

for the adjoint L* of the generator held by a KernelCache, a vector drift b
and an optional vector source c.  One step smooths both the state and the
flux with the adjoint kernel and adds the spectral divergence of the flux:

    rho_{k+1} = S*_dt rho_k + dt * div( S*_dt (b_k rho_k + c_k) ).

The divergence carries no mean, so total mass is conserved for every input;
negative undershoots are reported but never clipped inside the march.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from .errors import (
    BudgetError,
    GridMismatchError,
    InstabilityError,
    QuadratureError,
    SpectralResidueError,
)
from .grid import Field, Grid, gradient
from .hjb import Trajectory, _gradient_multipliers, _solver_order, step_budget
from .kernels import KernelCache
from .measures import Measure, TightnessFn

_MASS_DRIFT_TOL = 1e-6
_BLOWUP_SUP = 1e6
_RENORM_BUDGET = 1e-8
_RESIDUE_TOL = 1e-10


# --------------------------------------------------------------------------
# solver


def _divergence(grid: Grid, vec_values: np.ndarray) -> np.ndarray:
    """Spectral divergence of a (d, *grid.shape) vector sample."""
    axes = tuple(range(1, 1 + grid.dims))
    spec = np.fft.rfftn(vec_values, axes=axes)
    mults = _gradient_multipliers(grid)
    acc = mults[0] * spec[0]
    for i in range(1, grid.dims):
        acc = acc + mults[i] * spec[i]
    return np.fft.irfftn(acc, s=grid.shape, axes=tuple(range(grid.dims)))


def _check_vector_trajectory(name: str, tr: Trajectory, grid: Grid,
                             t0: float, T: float, n_steps: int) -> None:
    if tr.grid != grid:
        raise GridMismatchError(f"{name} grid != kernel grid")
    if not tr.is_vector:
        raise ValueError(f"{name} must be a vector trajectory")
    if tr.n_steps != n_steps or abs(tr.t0 - t0) > 1e-12 or \
            abs(tr.T - T) > 1e-12:
        raise ValueError(f"{name} trajectory must share the time slab")


def solve_fp(kernel: KernelCache, drift: Trajectory | None, rho0: Field,
             source: Trajectory | None, t0: float, T: float,
             n_steps: int) -> Trajectory:
    """March the forward equation; returns the scalar density trajectory.

    Probability inputs with zero source keep unit mass to 1e-10 and stay
    above -1e-7 of their peak.  Raises InstabilityError when the running
    mass drifts past 1e-6, a slice stops being finite, or its sup-norm
    passes 1e6 (all symptoms of an oversized step).
    """
    grid = kernel.grid
    if rho0.grid != grid:
        raise GridMismatchError("initial data grid != kernel grid")
    if not T > t0:
        raise ValueError("need T > t0")
    if n_steps < 1:
        raise ValueError("need at least one step")
    alpha = _solver_order(kernel)
    dt = (T - t0) / n_steps
    budget = step_budget(alpha, grid)
    if dt > budget * (1.0 + 1e-12):
        need = int(np.ceil((T - t0) / budget))
        raise BudgetError(
            f"dt={dt:.3e} exceeds the stepping budget {budget:.3e} "
            f"(0.5*dx^alpha, alpha={alpha:g}); use n_steps >= {need}")
    if drift is not None:
        _check_vector_trajectory("drift", drift, grid, t0, T, n_steps)
    if source is not None:
        _check_vector_trajectory("source", source, grid, t0, T, n_steps)

    vol = grid.cell_volume
    w = np.empty((n_steps + 1,) + grid.shape)
    w[0] = rho0.values
    mass0 = vol * float(np.sum(w[0]))
    scale = max(1.0, abs(mass0))
    for k in range(n_steps):
        if drift is None and source is None:
            w[k + 1] = kernel.apply_array(dt, w[k], adjoint=True)
        else:
            if drift is not None:
                flux = drift.values[k] * w[k]
                if source is not None:
                    flux = flux + source.values[k]
            else:
                flux = source.values[k]
            stack = np.concatenate([w[k][None], flux], axis=0)
            smooth = kernel.apply_array(dt, stack, adjoint=True)
            w[k + 1] = smooth[0] + dt * _divergence(grid, smooth[1:])
        sup = float(np.max(np.abs(w[k + 1])))
        mass = vol * float(np.sum(w[k + 1]))
        if not np.isfinite(sup) or sup > _BLOWUP_SUP or \
                not np.isfinite(mass) or abs(mass - mass0) > _MASS_DRIFT_TOL * scale:
            raise InstabilityError(
                f"forward march destabilized at step {k + 1}/{n_steps} "
                f"(sup {sup:.3e}, mass drift {mass - mass0:.3e}); "
                "use a smaller dt")
    return Trajectory(grid, t0, T, w)


def mass_series(rho: Trajectory) -> np.ndarray:
    """Grid mass of every slice (scalar trajectories only)."""
    if rho.is_vector:
        raise ValueError("mass series is for scalar trajectories")
    axes = tuple(range(1, 1 + rho.grid.dims))
    return rho.grid.cell_volume * np.sum(rho.values, axis=axes)


def slice_measure(rho: Trajectory, k: int,
                  budget: float = _RENORM_BUDGET) -> tuple[Measure, float]:
    """Clamp one slice to a probability measure; returns (measure, defect).

    The defect records how much mass the clamp-and-renormalize step moved;
    it must stay within ``budget`` or the slice is rejected as corrupted.
    """
    vals = np.maximum(rho.values[k], 0.0)
    mass = rho.grid.cell_volume * float(np.sum(vals))
    defect = abs(mass - 1.0)
    if defect > budget:
        raise InstabilityError(
            f"slice {k} clamps to mass {mass!r}; renormalization defect "
            f"{defect:.3e} exceeds the {budget:g} budget")
    return Measure.from_values(rho.grid, vals / mass), defect


# --------------------------------------------------------------------------
# distributional identity


def _apply_symbol(kernel: KernelCache, f: Field) -> np.ndarray:
    """L f through the generator's Fourier symbol (real output checked)."""
    spec = np.fft.fftn(f.values)
    out = np.fft.ifftn(-kernel.symbol * spec)
    scale = max(1.0, float(np.max(np.abs(out.real))))
    residue = float(np.max(np.abs(out.imag)))
    if residue > _RESIDUE_TOL * scale:
        raise SpectralResidueError(
            f"imaginary residue {residue:.3e} applying the symbol")
    return out.real


def weak_residual(kernel: KernelCache, rho: Trajectory,
                  drift: Trajectory | None, source: Trajectory | None,
                  phi: Field, t: float) -> float:
    """Defect of the time-integrated pairing identity against a static phi.

    Computes | <phi, rho(t)> - <phi, rho(t0)>
              - int_{t0}^t [ <L phi, rho> - <D phi, b rho + c> ] ds |
    with trapezoidal time quadrature; the exact solution makes it vanish,
    the march leaves O(dt + dx^2).
    """
    if rho.is_vector:
        raise ValueError("weak residual needs a scalar trajectory")
    grid = rho.grid
    if phi.grid != grid:
        raise GridMismatchError("test function grid != trajectory grid")
    k_end = rho.index_of(t)
    if k_end == 0:
        return 0.0
    lphi = _apply_symbol(kernel, phi)
    dphi = [g.values for g in gradient(phi)]
    vol = grid.cell_volume
    axes = tuple(range(1, 1 + grid.dims))

    hist = rho.values[: k_end + 1]
    pair = vol * np.sum(lphi * hist, axis=axes)
    for i in range(grid.dims):
        adv = np.zeros_like(pair)
        if drift is not None:
            adv = adv + vol * np.sum(
                dphi[i] * drift.values[: k_end + 1, i] * hist, axis=axes)
        if source is not None:
            adv = adv + vol * np.sum(
                dphi[i] * source.values[: k_end + 1, i], axis=axes)
        pair = pair - adv
    integral = float(np.trapezoid(pair, dx=rho.dt))
    lhs = vol * float(np.sum(phi.values * (hist[k_end] - hist[0])))
    return abs(lhs - integral)


# --------------------------------------------------------------------------
# tightness along the flow


@dataclass(frozen=True)
class TightnessSeriesReport:
    """Tightness-weight moments along a trajectory vs. an affine budget.

    ``slope_budget`` bounds d/dt of the moment through the generator and
    drift magnitudes; ``excess`` is the worst overshoot of slice moments
    above the line  series[0] + slope_budget * (t - t0).
    """

    times: np.ndarray
    series: np.ndarray
    slope_budget: float
    excess: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "times": [float(v) for v in self.times],
            "series": [float(v) for v in self.series],
            "slope_budget": self.slope_budget,
            "excess": self.excess,
            "pass": self.passed,
        }


def small_jump_second_moment(triplet) -> float:
    """Quadrature of |z|^2 over |z| <= 1 against each jump density.

    Symbol-only stable families fall back to the unnormalized density
    |z|^{-1-alpha}, which overestimates the true constant and keeps the
    resulting budgets on the safe side.
    """
    total = 0.0
    for jump in triplet.jumps:
        densities = []
        if hasattr(jump, "density"):
            densities.append(jump.density)
        else:
            alphas = getattr(jump, "alphas", None) or (jump.alpha,)
            for a in alphas:
                densities.append(lambda z, a=a: np.abs(z) ** (-1.0 - a))
        for dens in densities:
            for sign in (1.0, -1.0):
                val, err = quad(
                    lambda z: z * z * float(dens(sign * z)),
                    0.0, 1.0, epsabs=1e-10, epsrel=1e-8, limit=200)
                if not np.isfinite(val) or err > 1e-6 * max(1.0, abs(val)):
                    raise QuadratureError(
                        "small-jump second moment failed to converge")
                total += val
    return total


def tightness_report(rho: Trajectory, psi: TightnessFn, nu_tail: float,
                     *, triplet=None, drift_sup: float = 0.0,
                     tol: float = 1e-9) -> TightnessSeriesReport:
    """Moment series t -> int psi d(rho(t)) with an affine growth budget.

    ``nu_tail`` is the caller's allowance for the big jumps (the psi tail
    moment plus subadditivity slack times the tail mass); the drift,
    diffusion and small-jump pieces are assembled from ``triplet`` and
    ``drift_sup``.  The flagged bound is

        series(t) <= series(t0) + slope_budget * (t - t0) + tol.
    """
    if rho.is_vector:
        raise ValueError("tightness series needs a scalar trajectory")
    if psi.psi.grid != rho.grid:
        raise GridMismatchError("tightness weight sampled on another grid")
    axes = tuple(range(1, 1 + rho.grid.dims))
    series = rho.grid.cell_volume * np.sum(psi.psi.values * rho.values,
                                           axis=axes)
    slope = psi.grad_bound * drift_sup + float(nu_tail)
    if triplet is not None:
        B = triplet.drift_vector
        A = triplet.diffusion_matrix
        slope += psi.grad_bound * float(np.linalg.norm(B))
        slope += psi.hess_bound * triplet.dims * float(
            np.linalg.norm(A, ord=2))
        slope += 0.5 * psi.hess_bound * small_jump_second_moment(triplet)
    times = rho.times
    line = series[0] + slope * (times - times[0])
    excess = float(np.max(series - line))
    return TightnessSeriesReport(
        times=times, series=series, slope_budget=float(slope),
        excess=excess, passed=bool(excess <= tol))
