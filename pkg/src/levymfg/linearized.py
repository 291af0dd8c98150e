"""Linear forward-backward systems and the measure derivative of the value.

The system pairs a backward transport equation for a scalar z,

    -dz/dt - L z + V . Dz = <dF/dm(x, m(t)), rho(t)> + b(t, x),
    z(T, x) = <dG/dm(x, m(T)), rho(T)> + z_T(x),

with the forward divergence-form equation its duality pairing singles out,

    d(rho)/dt = L* rho + div(rho V) + div(m Gamma Dz + c),
    rho(t0, x) = rho0(x),

and resolves the two-way coupling by damped alternation: freeze rho, solve
z backward; freeze z, rebuild rho forward; blend.  Around a converged MFG
solution (V the optimal drift, Gamma the momentum curvature of the
Hamiltonian, the couplings the measure derivatives of the running and
terminal costs) the solution map rho0 -> z(t0, .) is the derivative of the
equilibrium value in its initial measure; with rho0 a mollified grid delta
at y, z(t0, x) is the derivative kernel J(t0, x, m0, y).

The y-batch assembling the full kernel is embarrassingly parallel in y but
runs sequentially here; each (z, rho) alternation is inherently ordered.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .coupling import Conv, LocalComposite, Zero, apply_dmF
from .errors import (
    BudgetError,
    DivergenceError,
    GridMismatchError,
    InstabilityError,
)
from .grid import Field, Grid
from .hjb import (
    Trajectory,
    _batch_gradient,
    _gradient_multipliers,
    _guard,
    _nyquist_fraction,
    _solver_order,
    step_budget,
)
from .kernels import KernelCache
from .measures import Measure, mollifier_field, signed_dual_norm
from .mfg import MfgSolution, optimal_drift

_SYMMETRY_TOL = 1e-12
_ELLIPTICITY_TOL = 1e-9
_DENSITY_NEG_TOL = 1e-12
_DENSITY_MASS_TOL = 1e-9
_TERMINAL_TAIL_TOL = 1e-6
_BATCH_NODE_CAP = 128
_JKERNEL_FORMAT = "levymfg-jkernel"
_COUPLING_TYPES = (Zero, Conv, LocalComposite)


# --------------------------------------------------------------------------
# the system container


@dataclass(frozen=True)
class LinSystem:
    """Data of one linear forward-backward system on a shared time slab.

    ``curvature`` holds the matrix weight of the forward flux (the momentum
    Hessian along the base trajectory in applications) with one (d, d)
    matrix per slice and node, axes (time, row, column, *grid); it must be
    symmetric and have eigenvalues inside [1/ellipticity, ellipticity].
    ``forcing``/``flux_forcing`` are the inhomogeneities b and c (None means
    zero); ``rho0`` may carry a grid delta.  ``density`` is the base
    probability path the coupling derivatives are evaluated along.
    """

    kernel: KernelCache
    drift: Trajectory
    curvature: np.ndarray = dc_field(repr=False)
    ellipticity: float
    forcing: Trajectory | None
    flux_forcing: Trajectory | None
    terminal: Field
    rho0: Field
    density: Trajectory
    running_coupling: object
    terminal_coupling: object

    def __post_init__(self):
        grid = self.kernel.grid
        if self.drift.grid != grid:
            raise GridMismatchError("drift grid != kernel grid")
        if not self.drift.is_vector:
            raise ValueError("drift must be a vector trajectory")
        t0, T, n = self.drift.t0, self.drift.T, self.drift.n_steps

        def on_slab(name, tr):
            if tr.grid != grid:
                raise GridMismatchError(f"{name} grid != kernel grid")
            if tr.n_steps != n or abs(tr.t0 - t0) > 1e-12 or \
                    abs(tr.T - T) > 1e-12:
                raise ValueError(f"{name} trajectory must share the time slab")

        on_slab("density", self.density)
        if self.density.is_vector:
            raise ValueError("density must be a scalar trajectory")
        dens = self.density.values
        if float(np.min(dens)) < -_DENSITY_NEG_TOL:
            raise ValueError("density path has negative slices")
        masses = grid.cell_volume * np.sum(
            dens, axis=tuple(range(1, 1 + grid.dims)))
        worst = float(np.max(np.abs(masses - 1.0)))
        if worst > _DENSITY_MASS_TOL:
            raise ValueError(
                f"density slice mass off by {worst:.3e}; not a measure path")

        gamma = np.ascontiguousarray(np.asarray(self.curvature, dtype=float))
        d = grid.dims
        want = (n + 1, d, d) + grid.shape
        if gamma.shape != want:
            raise ValueError(
                f"curvature shape {gamma.shape} != expected {want}")
        if not np.all(np.isfinite(gamma)):
            raise ValueError("curvature contains NaN/Inf entries")
        skew = float(np.max(np.abs(gamma - np.swapaxes(gamma, 1, 2))))
        if skew > _SYMMETRY_TOL:
            raise ValueError(f"curvature slices asymmetric by {skew:.3e}")
        c = float(self.ellipticity)
        if not c >= 1.0:
            raise ValueError("ellipticity constant must be >= 1")
        eigs = np.linalg.eigvalsh(np.moveaxis(gamma, (1, 2), (-2, -1)))
        lo, hi = float(np.min(eigs)), float(np.max(eigs))
        if lo < 1.0 / c - _ELLIPTICITY_TOL or hi > c + _ELLIPTICITY_TOL:
            raise ValueError(
                f"curvature eigenvalues [{lo:.6g}, {hi:.6g}] violate the "
                f"declared ellipticity band [{1.0 / c:.6g}, {c:.6g}]")
        gamma.setflags(write=False)
        object.__setattr__(self, "curvature", gamma)
        object.__setattr__(self, "ellipticity", c)

        if self.forcing is not None:
            on_slab("forcing", self.forcing)
            if self.forcing.is_vector:
                raise ValueError("forcing must be a scalar trajectory")
        if self.flux_forcing is not None:
            on_slab("flux_forcing", self.flux_forcing)
            if not self.flux_forcing.is_vector:
                raise ValueError("flux_forcing must be a vector trajectory")
        if self.terminal.grid != grid:
            raise GridMismatchError("terminal data grid != kernel grid")
        if self.rho0.grid != grid:
            raise GridMismatchError("initial data grid != kernel grid")
        for name, coupling in (("running", self.running_coupling),
                               ("terminal", self.terminal_coupling)):
            if not isinstance(coupling, _COUPLING_TYPES):
                raise TypeError(
                    f"{name} coupling {type(coupling).__name__} has no "
                    "measure-derivative action")
            kern = getattr(coupling, "phi", None) or \
                getattr(coupling, "phi2", None)
            if kern is not None and kern.grid != grid:
                raise GridMismatchError(f"{name} coupling kernel grid "
                                        "!= system grid")

    @property
    def grid(self) -> Grid:
        return self.kernel.grid

    @property
    def t0(self) -> float:
        return self.drift.t0

    @property
    def T(self) -> float:
        return self.drift.T

    @property
    def n_steps(self) -> int:
        return self.drift.n_steps

    @property
    def rho0_mass(self) -> float:
        return self.rho0.integral()

    @property
    def one_way(self) -> bool:
        """True when z never sees rho: both coupling derivatives vanish."""
        return isinstance(self.running_coupling, Zero) and \
            isinstance(self.terminal_coupling, Zero)


# --------------------------------------------------------------------------
# backward leg: linear transport with a time-dependent drift


def _linear_backward(kernel: KernelCache, drift: Trajectory,
                     source: np.ndarray | None, terminal: Field,
                     picard_sweeps: int = 2) -> Trajectory:
    """Solve -dz/dt - Lz + V(t,x) . Dz = f(t,x), z(T) = terminal.

    Same mild discipline as the nonlinear backward solver (exponential
    Euler in the reversed clock, then whole-interval trapezoid Picard
    sweeps); this variant exists because the drift varies per slice, which
    the time-independent Hamiltonian interface cannot express.
    """
    grid = kernel.grid
    t0, T, n_steps = drift.t0, drift.T, drift.n_steps
    alpha = _solver_order(kernel)
    dt = (T - t0) / n_steps
    budget = step_budget(alpha, grid)
    if dt > budget * (1.0 + 1e-12):
        need = int(np.ceil((T - t0) / budget))
        raise BudgetError(
            f"dt={dt:.3e} exceeds the stepping budget {budget:.3e} "
            f"(0.5*dx^alpha, alpha={alpha:g}); use n_steps >= {need}")
    if _nyquist_fraction(terminal) > _TERMINAL_TAIL_TOL:
        warnings.warn(
            "terminal data is marginally resolved: Nyquist spectral "
            "fraction exceeds 1e-6; expect degraded accuracy", stacklevel=2)

    mults = _gradient_multipliers(grid)
    V = drift.values

    # exponential Euler in the reversed clock (w[j] sits at T - j*dt)
    w = np.empty((n_steps + 1,) + grid.shape)
    w[0] = terminal.values
    for j in range(n_steps):
        phys = n_steps - j
        grads = _batch_gradient(grid, w[j], mults)
        adv = V[phys, 0] * grads[0]
        for i in range(1, grid.dims):
            adv = adv + V[phys, i] * grads[i]
        drive = -adv if source is None else source[phys] - adv
        rhs = w[j] + dt * drive
        w[j + 1] = kernel.apply_array(dt, rhs)
        _guard(w[j + 1], j + 1, n_steps, T, dt)

    # whole-interval corrections with the trapezoid integrand
    half = 0.5 * dt
    rev = slice(None, None, -1)
    for _ in range(picard_sweeps):
        grads = _batch_gradient(grid, w, mults)
        adv = V[rev, 0] * grads[0]
        for i in range(1, grid.dims):
            adv = adv + V[rev, i] * grads[i]
        n_all = -adv if source is None else source[rev] - adv
        fresh = np.empty_like(w)
        fresh[0] = terminal.values
        for j in range(n_steps):
            propagated = kernel.apply_array(dt, fresh[j] + half * n_all[j])
            fresh[j + 1] = propagated + half * n_all[j + 1]
            _guard(fresh[j + 1], j + 1, n_steps, T, dt)
        w = fresh

    return Trajectory(grid, t0, T, w[::-1])


# --------------------------------------------------------------------------
# forward leg: divergence-form transport with trapezoid corrections


def _batch_divergence(grid: Grid, vec_all: np.ndarray) -> np.ndarray:
    """Spectral divergence of a (slices, d, *grid.shape) vector history."""
    axes = tuple(range(2, 2 + grid.dims))
    spec = np.fft.rfftn(vec_all, axes=axes)
    mults = _gradient_multipliers(grid)
    acc = mults[0] * spec[:, 0]
    for i in range(1, grid.dims):
        acc = acc + mults[i] * spec[:, i]
    return np.fft.irfftn(acc, s=grid.shape,
                         axes=tuple(range(1, 1 + grid.dims)))


def _linear_forward(kernel: KernelCache, drift: Trajectory,
                    flux: Trajectory, rho0: Field,
                    picard_sweeps: int = 2) -> Trajectory:
    """March d(rho)/dt = L* rho + div(rho V + f), rho(t0) = rho0.

    The first pass is the one-step divergence-form march of the
    fokker_planck module; the whole-interval Picard sweeps then upgrade the
    flux quadrature to the composite trapezoid.  The backward leg carries
    the same corrections, and the duality pairing of the two legs only
    closes at O(dt^2) when both sides are integrated at matching order --
    the plain first-order march leaves an O(dt) energy defect that no
    affordable step count brings under the certification tolerances.
    Divergences carry no mean, so every pass conserves mass exactly.
    """
    grid = kernel.grid
    t0, T, n_steps = drift.t0, drift.T, drift.n_steps
    alpha = _solver_order(kernel)
    dt = (T - t0) / n_steps
    budget = step_budget(alpha, grid)
    if dt > budget * (1.0 + 1e-12):
        need = int(np.ceil((T - t0) / budget))
        raise BudgetError(
            f"dt={dt:.3e} exceeds the stepping budget {budget:.3e} "
            f"(0.5*dx^alpha, alpha={alpha:g}); use n_steps >= {need}")
    V = drift.values
    f = flux.values
    vol = grid.cell_volume
    mass0 = vol * float(np.sum(rho0.values))
    scale = max(1.0, abs(mass0))

    def monitor(values: np.ndarray, k: int) -> None:
        sup = float(np.max(np.abs(values)))
        mass = vol * float(np.sum(values))
        if not np.isfinite(sup) or sup > 1e6 or not np.isfinite(mass) or \
                abs(mass - mass0) > 1e-6 * scale:
            raise InstabilityError(
                f"forward march destabilized at step {k}/{n_steps} "
                f"(sup {sup:.3e}, mass drift {mass - mass0:.3e}); "
                "use a smaller dt")

    w = np.empty((n_steps + 1,) + grid.shape)
    w[0] = rho0.values
    for k in range(n_steps):
        stack = np.concatenate([w[k][None], V[k] * w[k] + f[k]], axis=0)
        smooth = kernel.apply_array(dt, stack, adjoint=True)
        w[k + 1] = smooth[0] + dt * _batch_divergence(grid, smooth[1:][None])[0]
        monitor(w[k + 1], k + 1)

    half = 0.5 * dt
    for _ in range(picard_sweeps):
        h_all = _batch_divergence(grid, V * w[:, None] + f)
        fresh = np.empty_like(w)
        fresh[0] = rho0.values
        for k in range(n_steps):
            propagated = kernel.apply_array(
                dt, fresh[k] + half * h_all[k], adjoint=True)
            fresh[k + 1] = propagated + half * h_all[k + 1]
            monitor(fresh[k + 1], k + 1)
        w = fresh

    return Trajectory(grid, t0, T, w)


# --------------------------------------------------------------------------
# assembly helpers


def _coupling_source(coupling, density: Trajectory,
                     rho_values: np.ndarray) -> np.ndarray:
    """Per-slice derivative action <dF/dm(x, m(t)), rho(t)> as an array."""
    grid = density.grid
    out = np.empty_like(rho_values)
    for k in range(rho_values.shape[0]):
        m_k = Measure.from_values(grid, density.values[k])
        out[k] = apply_dmF(coupling, m_k, Field(grid, rho_values[k])).values
    return out


def _backward_data(system: LinSystem, rho_values: np.ndarray
                   ) -> tuple[np.ndarray | None, Field]:
    """Source array and terminal field of the z-equation given rho."""
    grid = system.grid
    source = None if system.forcing is None else system.forcing.values
    if not isinstance(system.running_coupling, Zero):
        acted = _coupling_source(system.running_coupling, system.density,
                                 rho_values)
        source = acted if source is None else source + acted
    terminal = system.terminal
    if not isinstance(system.terminal_coupling, Zero):
        m_T = Measure.from_values(grid, system.density.values[-1])
        acted = apply_dmF(system.terminal_coupling, m_T,
                          Field(grid, rho_values[-1]))
        terminal = Field(grid, terminal.values + acted.values)
    return source, terminal


def _forward_flux(system: LinSystem, z_values: np.ndarray) -> Trajectory:
    """Vector source m Gamma Dz + c of the forward equation."""
    grid = system.grid
    mults = _gradient_multipliers(grid)
    grads = np.stack(_batch_gradient(grid, z_values, mults), axis=1)
    flux = np.einsum("tij...,tj...->ti...", system.curvature, grads)
    flux = system.density.values[:, None] * flux
    if system.flux_forcing is not None:
        flux = flux + system.flux_forcing.values
    return Trajectory(grid, system.t0, system.T, flux)


def _data_norm(system: LinSystem) -> float:
    """Size of the system data: |z_T|_inf + |rho0|_dual + sup|b| + int |c|."""
    total = system.terminal.max_norm + signed_dual_norm(system.rho0)
    if system.forcing is not None:
        total += float(np.max(np.abs(system.forcing.values)))
    if system.flux_forcing is not None:
        mag = np.sqrt(np.sum(system.flux_forcing.values ** 2, axis=1))
        axes = tuple(range(1, 1 + system.grid.dims))
        per_slice = np.max(mag, axis=axes)
        total += float(np.trapezoid(per_slice, dx=system.drift.dt))
    return total


# --------------------------------------------------------------------------
# the damped alternation


@dataclass(frozen=True)
class LinearReport:
    """Record of one alternation run.

    ``data_norm`` is |z_T|_inf + |rho0|_dual + sup_t|b|_inf + int |c|_inf dt
    and ``output_norm`` is sup_t|z|_inf + sup_t|rho|_dual, so
    ``apriori_ratio`` is the constant the linear well-posedness bound would
    need to cover this run.
    """

    converged: bool
    iterations: int
    gap_history: tuple
    damping: float
    data_norm: float
    output_norm: float
    apriori_ratio: float
    one_way: bool

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "gap_history": [float(g) for g in self.gap_history],
            "damping": self.damping,
            "data_norm": self.data_norm,
            "output_norm": self.output_norm,
            "apriori_ratio": self.apriori_ratio,
            "one_way": self.one_way,
        }


def _output_norm(z: Trajectory, rho: Trajectory) -> float:
    grid = rho.grid
    sup_z = float(np.max(np.abs(z.values)))
    sup_rho = max(
        signed_dual_norm(Field(grid, rho.values[k]))
        for k in range(rho.n_steps + 1))
    return sup_z + sup_rho


def _wrap_inner(exc, iteration: int):
    raise type(exc)(f"alternation iteration {iteration}: {exc}") from exc


def solve_linear_system(system: LinSystem, damping: float = 0.5,
                        max_iters: int = 40, tol: float = 1e-9,
                        initial_rho: Trajectory | None = None,
                        picard_sweeps: int = 2
                        ) -> tuple[Trajectory, Trajectory, LinearReport]:
    """Damped alternation between the backward and forward legs.

    Starting from ``initial_rho`` (default: the forward flow of rho0 with
    the z-feedback flux dropped), each pass solves z backward against the
    frozen rho, rebuilds rho forward against that z, and blends with the
    damping weight.  Stops when sup over slices of the bounded-Lipschitz
    dual norm of the iterate difference falls below ``tol``; the blended
    difference is damping times the response difference exactly (the dual
    norm is positively homogeneous), so the response gap is what is
    measured.  On convergence the returned pair is the last raw response
    (a consistent backward/forward pair); a one-way system (both coupling
    derivatives zero) is solved in a single undamped pass.
    """
    if not 0.0 < damping <= 1.0:
        raise ValueError("damping must lie in (0, 1]")
    if max_iters < 1:
        raise ValueError("need at least one alternation")
    if not tol > 0.0:
        raise ValueError("tol must be positive")
    grid = system.grid
    t0, T, n = system.t0, system.T, system.n_steps

    if system.one_way:
        source = None if system.forcing is None else system.forcing.values
        try:
            z = _linear_backward(system.kernel, system.drift, source,
                                 system.terminal, picard_sweeps)
            rho = _linear_forward(system.kernel, system.drift,
                                  _forward_flux(system, z.values),
                                  system.rho0, picard_sweeps)
        except (DivergenceError, InstabilityError) as exc:
            _wrap_inner(exc, 1)
        data = _data_norm(system)
        out = _output_norm(z, rho)
        report = LinearReport(
            converged=True, iterations=1, gap_history=(0.0,),
            damping=1.0, data_norm=data, output_norm=out,
            apriori_ratio=(out / data if data > 0.0 else 0.0), one_way=True)
        return z, rho, report

    if initial_rho is None:
        start_flux = system.flux_forcing
        if start_flux is None:
            start_flux = Trajectory.zero(grid, t0, T, n, vector=True)
        try:
            rho_path = _linear_forward(system.kernel, system.drift,
                                       start_flux, system.rho0,
                                       picard_sweeps).values.copy()
        except (DivergenceError, InstabilityError) as exc:
            _wrap_inner(exc, 0)
    else:
        if initial_rho.grid != grid:
            raise GridMismatchError("warm-start path grid != system grid")
        if initial_rho.is_vector:
            raise ValueError("warm-start path must be scalar")
        if initial_rho.n_steps != n or abs(initial_rho.t0 - t0) > 1e-12 or \
                abs(initial_rho.T - T) > 1e-12:
            raise ValueError("warm-start path must share the time slab")
        rho_path = initial_rho.values.copy()

    gaps: list[float] = []
    z = rho = None
    converged = False
    for it in range(1, max_iters + 1):
        source, terminal = _backward_data(system, rho_path)
        try:
            z = _linear_backward(system.kernel, system.drift, source,
                                 terminal, picard_sweeps)
            rho = _linear_forward(system.kernel, system.drift,
                                  _forward_flux(system, z.values),
                                  system.rho0, picard_sweeps)
        except (DivergenceError, InstabilityError) as exc:
            _wrap_inner(exc, it)
        gap = damping * max(
            signed_dual_norm(Field(grid, rho.values[k] - rho_path[k]))
            for k in range(n + 1))
        gaps.append(gap)
        if gap < tol:
            converged = True
            break
        rho_path = (1.0 - damping) * rho_path + damping * rho.values

    data = _data_norm(system)
    out = _output_norm(z, rho)
    report = LinearReport(
        converged=converged, iterations=len(gaps), gap_history=tuple(gaps),
        damping=damping, data_norm=data, output_norm=out,
        apriori_ratio=(out / data if data > 0.0 else 0.0), one_way=False)
    return z, rho, report


# --------------------------------------------------------------------------
# duality identity


@dataclass(frozen=True)
class DualityReport:
    """Two independent evaluations of the energy identity.

    ``lhs`` is the time quadrature of int Dz . Gamma Dz dm; ``rhs`` pairs
    the data against the outputs:  <z(t0), rho0> - <z_T, rho(T)>
    - int <b, rho> - int <Dz, c> - quad_running - quad_terminal, where the
    two quadratic coupling terms are nonnegative for monotone couplings.
    """

    lhs: float
    rhs: float
    rel_gap: float
    pairing_initial: float
    pairing_terminal: float
    forcing_term: float
    flux_term: float
    quad_running: float
    quad_terminal: float
    tolerance: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "lhs": self.lhs,
            "rhs": self.rhs,
            "rel_gap": self.rel_gap,
            "pairing_initial": self.pairing_initial,
            "pairing_terminal": self.pairing_terminal,
            "forcing_term": self.forcing_term,
            "flux_term": self.flux_term,
            "quad_running": self.quad_running,
            "quad_terminal": self.quad_terminal,
            "tolerance": self.tolerance,
            "pass": self.passed,
        }


def duality_report(system: LinSystem, z: Trajectory, rho: Trajectory,
                   tol: float = 1e-4) -> DualityReport:
    """Evaluate both sides of the energy identity for a solved pair.

    The left side integrates the Gamma quadratic form of Dz against the
    base density; the right side only touches pairings of data and outputs.
    Exact solutions make them equal; the mild discretization leaves a
    relative gap that must stay within ``tol``.
    """
    grid = system.grid
    if z.grid != grid or rho.grid != grid:
        raise GridMismatchError("solution pair lives on a different grid")
    vol = grid.cell_volume
    dt = z.dt
    axes = tuple(range(1, 1 + grid.dims))
    mults = _gradient_multipliers(grid)
    grads = np.stack(_batch_gradient(grid, z.values, mults), axis=1)

    quad_form = np.einsum("ti...,tij...,tj...->t...", grads,
                          system.curvature, grads)
    lhs_series = vol * np.sum(quad_form * system.density.values, axis=axes)
    lhs = float(np.trapezoid(lhs_series, dx=dt))

    pairing_initial = vol * float(np.sum(z.values[0] * system.rho0.values))
    pairing_terminal = vol * float(
        np.sum(system.terminal.values * rho.values[-1]))

    forcing_term = 0.0
    if system.forcing is not None:
        series = vol * np.sum(system.forcing.values * rho.values, axis=axes)
        forcing_term = float(np.trapezoid(series, dx=dt))
    flux_term = 0.0
    if system.flux_forcing is not None:
        series = vol * np.sum(grads * system.flux_forcing.values,
                              axis=(1,) + tuple(a + 1 for a in axes))
        flux_term = float(np.trapezoid(series, dx=dt))

    quad_running = 0.0
    if not isinstance(system.running_coupling, Zero):
        acted = _coupling_source(system.running_coupling, system.density,
                                 rho.values)
        series = vol * np.sum(acted * rho.values, axis=axes)
        quad_running = float(np.trapezoid(series, dx=dt))
    quad_terminal = 0.0
    if not isinstance(system.terminal_coupling, Zero):
        m_T = Measure.from_values(grid, system.density.values[-1])
        acted = apply_dmF(system.terminal_coupling, m_T,
                          Field(grid, rho.values[-1]))
        quad_terminal = vol * float(np.sum(acted.values * rho.values[-1]))

    rhs = (pairing_initial - pairing_terminal - forcing_term - flux_term
           - quad_running - quad_terminal)
    denom = max(abs(lhs), abs(rhs))
    rel_gap = 0.0 if denom == 0.0 else abs(lhs - rhs) / denom
    return DualityReport(
        lhs=lhs, rhs=rhs, rel_gap=rel_gap,
        pairing_initial=pairing_initial, pairing_terminal=pairing_terminal,
        forcing_term=forcing_term, flux_term=flux_term,
        quad_running=quad_running, quad_terminal=quad_terminal,
        tolerance=tol, passed=bool(rel_gap <= tol))


# --------------------------------------------------------------------------
# linearization around a converged MFG solution


def linearize(solution: MfgSolution, rho0: Field, *,
              forcing: Trajectory | None = None,
              flux_forcing: Trajectory | None = None,
              terminal: Field | None = None,
              running_coupling=None, terminal_coupling=None) -> LinSystem:
    """Assemble the linear system around a converged MFG solution.

    The drift is the optimal feedback of the solved value, the curvature its
    momentum Hessian along the trajectory, and the couplings default to the
    measure derivatives of the problem's own costs.  The ellipticity
    constant comes from the Hamiltonian's declared convexity bound; when
    none is declared it is inferred from the realized eigenvalue range.
    """
    if not solution.converged:
        raise ValueError("linearization requires a converged MFG solution")
    problem = solution.problem
    grid = problem.grid
    if rho0.grid != grid:
        raise GridMismatchError("initial perturbation grid != problem grid")
    ham = problem.hamiltonian

    drift = optimal_drift(ham, solution.u)
    mesh = grid.meshgrid()
    mults = _gradient_multipliers(grid)
    grads = _batch_gradient(grid, solution.u.values, mults)
    curv = ham.curvature(mesh, solution.u.values, grads)
    if curv is None:
        raise ValueError(
            "the Hamiltonian supplies no momentum curvature; the forward "
            "flux of the linear system cannot be formed")
    curv = np.asarray(curv, dtype=float)
    curvature = np.ascontiguousarray(np.moveaxis(curv, (-2, -1), (1, 2)))

    c = float(getattr(ham, "convexity_bound", np.inf))
    if not np.isfinite(c):
        eigs = np.linalg.eigvalsh(curv)
        lo, hi = float(np.min(eigs)), float(np.max(eigs))
        if lo <= 0.0:
            raise ValueError(
                f"momentum curvature degenerates (min eigenvalue {lo:.3e}); "
                "no ellipticity constant exists")
        c = max(hi, 1.0 / lo, 1.0)

    return LinSystem(
        kernel=problem.kernel,
        drift=drift,
        curvature=curvature,
        ellipticity=c,
        forcing=forcing,
        flux_forcing=flux_forcing,
        terminal=terminal if terminal is not None
        else Field.constant(grid, 0.0),
        rho0=rho0,
        density=solution.m,
        running_coupling=running_coupling if running_coupling is not None
        else problem.running_cost,
        terminal_coupling=terminal_coupling if terminal_coupling is not None
        else problem.terminal_cost,
    )


# --------------------------------------------------------------------------
# the derivative kernel J


def mollified_delta(grid: Grid, y) -> Field:
    """Unit-mass grid delta at the node nearest y, smoothed to width 2*dx.

    All derivative-kernel claims are stated at this fixed mollification,
    with refinement understood jointly (the width shrinks with the grid).
    """
    eta = mollifier_field(grid, 2.0 * max(grid.dx))
    idx = grid.nearest_index(y)
    shift = tuple(int(idx[i]) - grid.n[i] // 2 for i in range(grid.dims))
    vals = np.roll(eta.values, shift, axis=tuple(range(grid.dims)))
    return Field(grid, vals)


def j_field(solution: MfgSolution, couplings, y, *, damping: float = 0.5,
            max_iters: int = 40, tol: float = 1e-9) -> Field:
    """Derivative of the equilibrium value at t0 in the direction delta_y.

    Solves the linear system around ``solution`` with a mollified grid
    delta at ``y`` as the initial perturbation and returns the backward
    component at t0.  ``couplings`` is a (running, terminal) pair of
    derivative carriers or None to reuse the solution's own costs.
    """
    if couplings is None:
        running = terminal = None
    else:
        running, terminal = couplings
    rho0 = mollified_delta(solution.problem.grid, y)
    system = linearize(solution, rho0, running_coupling=running,
                       terminal_coupling=terminal)
    try:
        z, _, report = solve_linear_system(
            system, damping=damping, max_iters=max_iters, tol=tol)
    except (DivergenceError, InstabilityError) as exc:
        raise type(exc)(f"derivative solve at y={y}: {exc}") from exc
    if not report.converged:
        raise InstabilityError(
            f"derivative solve at y={y}: alternation stalled at gap "
            f"{report.gap_history[-1]:.3e} after {report.iterations} "
            "iterations")
    return z.initial


@dataclass(frozen=True)
class JKernel:
    """Derivative kernel J(t0, x, m0, y) tabulated on grid nodes.

    ``values`` carries the y axes first and the x axes last:
    values[iy][ix] = J(t0, x_ix, m0, y_iy).  The recorded mollifier width
    is the smoothing applied to each delta before it entered the system.
    """

    grid: Grid
    t0: float
    values: np.ndarray = dc_field(repr=False)
    mollifier_width: float

    def __post_init__(self):
        vals = np.ascontiguousarray(np.asarray(self.values, dtype=float))
        if vals.shape != self.grid.shape + self.grid.shape:
            raise ValueError(
                f"kernel shape {vals.shape} != y-then-x grid axes "
                f"{self.grid.shape + self.grid.shape}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def field_at(self, y) -> Field:
        """The x-slice at the node nearest y."""
        return Field(self.grid, self.values[self.grid.nearest_index(y)])

    def y_gradient(self) -> np.ndarray:
        """Central differences along the y axes (spacing dx, periodic).

        Differencing the tabulated kernel is quieter than re-solving with
        derivative-of-delta data; returns shape (d, *y_shape, *x_shape).
        """
        comps = []
        for ax in range(self.grid.dims):
            ahead = np.roll(self.values, -1, axis=ax)
            behind = np.roll(self.values, 1, axis=ax)
            comps.append((ahead - behind) / (2.0 * self.grid.dx[ax]))
        return np.stack(comps, axis=0)


def j_field_batch(solution: MfgSolution, couplings=None, *,
                  damping: float = 0.5, max_iters: int = 40,
                  tol: float = 1e-9) -> JKernel:
    """Tabulate J(t0, x, m0, y) for every grid node y.

    Each y is an independent linear solve (the loop is trivially
    parallelizable; it runs sequentially here).  Refuses grids beyond 128
    nodes per axis, where the batch would run for hours.
    """
    grid = solution.problem.grid
    if any(ni > _BATCH_NODE_CAP for ni in grid.n):
        raise BudgetError(
            f"y-batch over {grid.n} nodes exceeds the "
            f"{_BATCH_NODE_CAP}-per-axis budget")
    width = 2.0 * max(grid.dx)
    out = np.empty(grid.shape + grid.shape)
    axes = grid.meshgrid()
    for iy in np.ndindex(grid.shape):
        y = tuple(float(ax[iy]) for ax in axes)
        out[iy] = j_field(solution, couplings, y, damping=damping,
                          max_iters=max_iters, tol=tol).values
    return JKernel(grid=grid, t0=solution.u.t0, values=out,
                   mollifier_width=width)


def save_j_kernel(path, jk: JKernel) -> None:
    """Raw little-endian float64 matrix plus a JSON sidecar of axes."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(jk.values, dtype="<f8").tobytes())
    sidecar = {
        "format": _JKERNEL_FORMAT,
        "version": 1,
        "axis_roles": ["y"] * jk.grid.dims + ["x"] * jk.grid.dims,
        "shape": list(jk.values.shape),
        "n": list(jk.grid.n),
        "half_width": [float(h) for h in jk.grid.half_width],
        "t0": jk.t0,
        "mollifier_width": jk.mollifier_width,
        "dtype": "<f8",
        "order": "C",
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)


def load_j_kernel(path) -> JKernel:
    path = Path(path)
    with open(str(path) + ".json") as fh:
        sidecar = json.load(fh)
    if sidecar.get("format") != _JKERNEL_FORMAT or sidecar.get("version") != 1:
        raise ValueError("not a derivative-kernel file")
    grid = Grid(tuple(sidecar["n"]), tuple(sidecar["half_width"]))
    raw = np.fromfile(path, dtype="<f8")
    want = grid.node_count ** 2
    if raw.size != want:
        raise ValueError(
            f"kernel payload holds {raw.size} values, expected {want}")
    return JKernel(grid=grid, t0=float(sidecar["t0"]),
                   values=raw.reshape(grid.shape + grid.shape),
                   mollifier_width=float(sidecar["mollifier_width"]))
