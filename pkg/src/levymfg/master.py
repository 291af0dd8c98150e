"""Master value field over (time, measure) and its certification checks.

The field is only ever touched through its defining property: evaluated at
``(t0, m0)`` it is the initial value slice of the converged coupled solve
started there.  Everything in this module is therefore a statement about
families of full solves — the scenario object fixes the data that all of
them share (generator, costs, horizon, step policy) and a memo keeps the
solves reusable across checks.

Four certificates are offered: the difference-quotient check that the
tabulated derivative kernel is the actual measure derivative (superlinear
defect decay), the residual of the full evolution equation in ``(t, x, m)``
assembled from fresh solves and the derivative kernel, the flow-consistency
(restart) gap behind uniqueness, and a terminal identity.  The equation
residual combines five pieces: a centered time quotient, the generator and
the Hamiltonian acting in the state variable, and two measure integrals of
the derivative kernel — its generator in the probe variable and its probe
gradient against the equilibrium drift.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np

from .coupling import Conv, LocalComposite, Zero, eval_F
from .errors import (BudgetError, DivergenceError, GridMismatchError,
                     InstabilityError, SpectralResidueError)
from .grid import Field, Grid
from .hjb import _batch_gradient, _gradient_multipliers, _solver_order, \
    step_budget
from .kernels import KernelCache
from .linearized import JKernel, j_field, j_field_batch, linearize, \
    solve_linear_system
from .measures import Measure, d0_distance
from .mfg import IterationPolicy, MfgProblem, MfgSolution, optimal_drift, \
    solve_mfg

_COUPLING_TYPES = (Zero, Conv, LocalComposite)
_TERMINAL_TIME_TOL = 1e-12
_SLOPE_THRESHOLD = 1.2
_DEFECT_FLOOR = 1e-13   # quotient defects below this are float noise
_CONSTANT_KILL_TOL = 1e-12
_Y_BATCH_CAP = 128
_RESIDUE_TOL = 1e-10


# --------------------------------------------------------------------------
# scenario: the (t0, m0)-independent data of a family of coupled problems


@dataclass(frozen=True, eq=False)
class Scenario:
    """Shared data of every solve the master field is probed with.

    ``dt_cap`` is the largest admissible time step: a solve from t0 uses
    ceil((T - t0)/dt_cap) steps, so slabs whose length is an exact multiple
    of the cap all march with the same dt and their time lattices nest.
    The memo maps (t0, m0-bytes) to the converged solution, so repeated
    evaluations (difference quotients, time probes) reuse solves.
    """

    kernel: KernelCache
    hamiltonian: object
    running_cost: object
    terminal_cost: object
    T: float
    dt_cap: float
    policy: IterationPolicy = dc_field(default_factory=IterationPolicy)
    _memo: dict = dc_field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not (np.isfinite(self.T) and self.T > 0.0):
            raise ValueError("horizon T must be positive and finite")
        order = _solver_order(self.kernel)
        budget = step_budget(order, self.grid)
        if not 0.0 < self.dt_cap <= budget * (1.0 + 1e-12):
            raise BudgetError(
                f"dt_cap={self.dt_cap:.3e} outside the stepping budget "
                f"{budget:.3e} (0.5*dx^alpha, alpha={order:g})")
        for name, coupling in (("running", self.running_cost),
                               ("terminal", self.terminal_cost)):
            if not isinstance(coupling, _COUPLING_TYPES):
                raise TypeError(
                    f"{name} coupling {type(coupling).__name__} has no "
                    "measure-derivative action")
            kern = getattr(coupling, "phi", None) or \
                getattr(coupling, "phi2", None)
            if kern is not None and kern.grid != self.grid:
                raise GridMismatchError(f"{name} coupling kernel grid "
                                        "!= scenario grid")

    @property
    def grid(self) -> Grid:
        return self.kernel.grid

    @property
    def decoupled(self) -> bool:
        return isinstance(self.running_cost, Zero) and isinstance(
            self.terminal_cost, Zero)

    def steps_for(self, t0: float) -> int:
        span = self.T - t0
        if not span > 0.0:
            raise ValueError(f"start time {t0!r} leaves no slab before "
                             f"T={self.T!r}")
        return max(1, int(math.ceil(span / self.dt_cap - 1e-12)))

    def problem(self, t0: float, m0: Measure) -> MfgProblem:
        return MfgProblem(
            kernel=self.kernel, hamiltonian=self.hamiltonian,
            running_cost=self.running_cost, terminal_cost=self.terminal_cost,
            m0=m0, t0=t0, T=self.T, n_steps=self.steps_for(t0),
            policy=self.policy)


def solve_scenario(scenario: Scenario, t0: float, m0: Measure
                   ) -> MfgSolution:
    """Converged coupled solve from (t0, m0), memoized on exact inputs."""
    if m0.grid != scenario.grid:
        raise GridMismatchError("initial measure grid != scenario grid")
    key = (float(t0), m0.values.tobytes())
    hit = scenario._memo.get(key)
    if hit is not None:
        return hit
    solution = solve_mfg(scenario.problem(t0, m0))
    if not solution.converged:
        raise DivergenceError(
            f"coupled solve from t0={t0:g} stalled at gap "
            f"{solution.gap_history[-1]:.3e} after {solution.iterations} "
            "iterations")
    scenario._memo[key] = solution
    return solution


def eval_U(scenario: Scenario, t0: float, m0: Measure) -> Field:
    """The master value field at (t0, ., m0).

    The initial slice of the converged value trajectory; at t0 = T no solve
    is needed — the field IS the terminal cost of the measure.
    """
    if m0.grid != scenario.grid:
        raise GridMismatchError("initial measure grid != scenario grid")
    if abs(scenario.T - t0) <= _TERMINAL_TIME_TOL:
        return eval_F(scenario.terminal_cost, m0)
    return solve_scenario(scenario, t0, m0).u.initial


# --------------------------------------------------------------------------
# difference-quotient certification of the derivative kernel


@dataclass(frozen=True)
class DerivativeCheckReport:
    """Defect table of U((1-h)m + h m') against its linearization in h.

    ``rows`` holds (h, defect) pairs; ``slope`` is the log-log fit over the
    rows whose defect clears the float-noise floor (infinite when fewer
    than two do, i.e. the quotient is exact).  Superlinear decay — slope
    at or above the threshold — certifies the kernel as the derivative.
    """

    rows: tuple[tuple[float, float], ...]
    slope: float
    threshold: float
    pairing_sup: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "rows": [[h, defect] for h, defect in self.rows],
            "slope": self.slope,
            "threshold": self.threshold,
            "pairing_sup": self.pairing_sup,
            "pass": self.passed,
        }


def derivative_check(scenario: Scenario, t0: float, m0: Measure,
                     m0_prime: Measure, h_list,
                     j_kernel: JKernel | None = None
                     ) -> DerivativeCheckReport:
    """Check the measure derivative against finite mixture quotients.

    For each h the base measure is blended toward the probe measure and
    the field re-evaluated by a full solve; the defect is the sup distance
    to the first-order prediction through the derivative pairing.  By
    default the pairing against the signed difference is the linearized
    solve with that difference as initial perturbation — by superposition
    that is exactly the kernel integrated against the difference, computed
    without first tabulating the kernel at mollified point masses (node
    quadrature against such a tabulation smears the pairing by the
    mollifier width, an h-independent bias that caps the observable decay
    rate at one).  ``j_kernel`` may be supplied to force the quadrature
    route against an existing tabulation, e.g. to probe the additive
    normalization freedom: shifting the kernel by a constant cannot move
    the pairing against a zero-mass difference.
    """
    grid = scenario.grid
    if m0.grid != grid or m0_prime.grid != grid:
        raise GridMismatchError("measure grid != scenario grid")
    hs = [float(h) for h in h_list]
    if len(hs) < 2:
        raise ValueError("need at least two quotient sizes to fit a slope")
    if any(not 0.0 < h <= 1.0 for h in hs):
        raise ValueError("quotient sizes must lie in (0, 1]")
    if any(b >= a for a, b in zip(hs, hs[1:])):
        raise ValueError("quotient sizes must decrease strictly")
    if np.array_equal(m0.values, m0_prime.values):
        raise ValueError("probe measure equals the base measure; the "
                         "difference quotient is degenerate")

    base = solve_scenario(scenario, t0, m0)
    diff = m0_prime.values - m0.values
    if j_kernel is None:
        system = linearize(base, Field(grid, diff))
        try:
            z, _, report = solve_linear_system(
                system, damping=scenario.policy.damping,
                max_iters=scenario.policy.max_iters)
        except (DivergenceError, InstabilityError) as exc:
            raise type(exc)(f"derivative pairing solve: {exc}") from exc
        if not report.converged:
            raise DivergenceError(
                "derivative pairing solve stalled at gap "
                f"{report.gap_history[-1]:.3e} after {report.iterations} "
                "iterations")
        paired = z.initial.values
    else:
        if j_kernel.grid != grid:
            raise GridMismatchError(
                "derivative kernel grid != scenario grid")
        d = grid.dims
        paired = grid.cell_volume * np.tensordot(
            diff, j_kernel.values, axes=(tuple(range(d)), tuple(range(d))))
    u0 = base.u.initial.values

    rows = []
    for h in hs:
        mix = Measure.from_values(
            grid, (1.0 - h) * m0.values + h * m0_prime.values)
        u_h = eval_U(scenario, t0, mix).values
        defect = float(np.max(np.abs(u_h - u0 - h * paired)))
        rows.append((h, defect))

    hs_arr = np.array([r[0] for r in rows])
    defects = np.array([r[1] for r in rows])
    live = defects > _DEFECT_FLOOR
    if int(np.sum(live)) < 2:
        slope = float("inf")  # defects are float noise: quotient is exact
    else:
        slope = float(np.polyfit(np.log(hs_arr[live]),
                                 np.log(defects[live]), 1)[0])
    return DerivativeCheckReport(
        rows=tuple(rows), slope=slope, threshold=_SLOPE_THRESHOLD,
        pairing_sup=float(np.max(np.abs(paired))),
        passed=slope >= _SLOPE_THRESHOLD)


# --------------------------------------------------------------------------
# residual of the full evolution equation


def _generator_apply(symbol: np.ndarray, values: np.ndarray,
                     dims: int) -> np.ndarray:
    """Apply the generator spectrally along the leading ``dims`` axes."""
    axes = tuple(range(dims))
    mult = (-symbol).reshape(symbol.shape + (1,) * (values.ndim - dims))
    out = np.fft.ifftn(mult * np.fft.fftn(values, axes=axes), axes=axes)
    scale = max(1.0, float(np.max(np.abs(out.real))))
    residue = float(np.max(np.abs(out.imag)))
    if residue > _RESIDUE_TOL * scale:
        raise SpectralResidueError(
            f"imaginary residue {residue:.3e} applying the symbol")
    return out.real


def _aligned_stride(n: int, cap: int) -> int:
    stride = int(math.ceil(n / cap))
    while n % stride:
        stride += 1
    return stride


def _tabulate_j(scenario: Scenario, solution: MfgSolution, cap: int
                ) -> tuple[np.ndarray, Grid, int]:
    """Derivative-kernel values (y axes first), their y-lattice, stride.

    Beyond ``cap`` nodes per axis the full y-batch is unaffordable; the
    fallback keeps every stride-th node, which is itself a periodic grid
    of the same box, and warns.  The x axes always stay at full resolution.
    """
    grid = scenario.grid
    if all(ni <= cap for ni in grid.n):
        return j_field_batch(solution).values, grid, 1
    stride = max(_aligned_stride(ni, cap) for ni in grid.n)
    coarse = Grid(tuple(ni // stride for ni in grid.n), grid.half_width)
    warnings.warn(
        f"y-batch over {grid.n} nodes exceeds the {cap}-per-axis budget; "
        f"tabulating on every {stride}-th node instead", RuntimeWarning)
    out = np.empty(coarse.shape + grid.shape)
    axes = coarse.meshgrid()
    for iy in np.ndindex(coarse.shape):
        y = tuple(float(ax[iy]) for ax in axes)
        out[iy] = j_field(solution, None, y).values
    return out, coarse, stride


@dataclass(frozen=True)
class MasterResidualReport:
    """Signed sum of the five equation terms on the grid.

    ``mode`` is "interior" for the assembled equation and
    "terminal-identity" at t0 = T, where the equation degenerates to the
    boundary condition and the residual is the field minus the terminal
    cost.  ``term_sups`` records the sup of each assembled piece so a
    large residual can be traced; ``y_stride`` > 1 flags the coarse-batch
    fallback.
    """

    mode: str
    residual: Field
    samples: tuple[tuple[tuple[float, ...], float], ...]
    sup_sampled: float
    sup_grid: float
    delta_t: float
    y_stride: int
    term_sups: dict

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "samples": [[list(pt), val] for pt, val in self.samples],
            "sup_sampled": self.sup_sampled,
            "sup_grid": self.sup_grid,
            "delta_t": self.delta_t,
            "y_stride": self.y_stride,
            "term_sups": dict(self.term_sups),
        }


def _sampled(grid: Grid, values: np.ndarray, sample_points
             ) -> tuple[tuple[tuple[float, ...], float], ...]:
    out = []
    for point in sample_points:
        pt = tuple(float(c) for c in np.atleast_1d(
            np.asarray(point, dtype=float)))
        out.append((pt, float(values[grid.nearest_index(pt)])))
    return tuple(out)


def master_residual(scenario: Scenario, t0: float, m0: Measure,
                    sample_points, time_probe_steps: int = 4,
                    y_batch_cap: int = _Y_BATCH_CAP) -> MasterResidualReport:
    """Residual of the evolution equation in (t, x, m) at one probe point.

    The time slope is a centered quotient over t0 +- time_probe_steps*dt
    via fresh solves with the same m0 (the equation must hold off the flow,
    so interior slices of one solve would prove too little).  The measure
    integrals pair the tabulated derivative kernel — its probe-variable
    generator image and its probe gradient against the equilibrium drift —
    with m0 under the grid quadrature.  The kernel's additive normalization
    is killed by the generator; that the discrete generator annihilates
    constants is asserted before use.
    """
    grid = scenario.grid
    if m0.grid != grid:
        raise GridMismatchError("initial measure grid != scenario grid")
    if time_probe_steps < 1:
        raise ValueError("time probe needs at least one step")

    if abs(scenario.T - t0) <= _TERMINAL_TIME_TOL:
        gap = eval_U(scenario, scenario.T, m0).values - \
            eval_F(scenario.terminal_cost, m0).values
        samples = _sampled(grid, gap, sample_points)
        return MasterResidualReport(
            mode="terminal-identity", residual=Field(grid, gap),
            samples=samples,
            sup_sampled=max((abs(v) for _, v in samples), default=0.0),
            sup_grid=float(np.max(np.abs(gap))), delta_t=0.0, y_stride=1,
            term_sups={})

    base = solve_scenario(scenario, t0, m0)
    dt = base.u.dt
    delta_t = time_probe_steps * dt
    if t0 - delta_t < -1e-12 or not t0 + delta_t < scenario.T:
        raise ValueError(
            f"centered time probe t0 +- {delta_t:g} leaves [0, T); shrink "
            "time_probe_steps or move t0 inward")

    u_plus = eval_U(scenario, t0 + delta_t, m0).values
    u_minus = eval_U(scenario, t0 - delta_t, m0).values
    time_term = (u_plus - u_minus) / (2.0 * delta_t)

    u0 = base.u.initial.values
    gen_term = _generator_apply(scenario.kernel.symbol, u0, grid.dims)
    grads = np.stack(_batch_gradient(grid, u0, _gradient_multipliers(grid)))
    ham_term = np.asarray(
        scenario.hamiltonian.value(grid.meshgrid(), u0, grads), dtype=float)

    j_values, y_grid, stride = _tabulate_j(scenario, base, y_batch_cap)
    y_symbol = scenario.kernel.symbol if stride == 1 else KernelCache(
        scenario.kernel.triplet, y_grid).symbol
    d = grid.dims
    killed = float(np.max(np.abs(_generator_apply(
        y_symbol, np.ones(y_grid.shape), d))))
    if killed > _CONSTANT_KILL_TOL:
        raise SpectralResidueError(
            f"probe-variable generator moves constants by {killed:.3e}; "
            "the kernel's additive normalization would leak into the "
            "residual")

    sub = tuple(slice(None, None, stride) for _ in range(d))
    weights = m0.values[sub] * y_grid.cell_volume
    y_axes = tuple(range(d))
    nonlocal_term = np.tensordot(
        weights, _generator_apply(y_symbol, j_values, d),
        axes=(y_axes, y_axes))

    drift0 = optimal_drift(scenario.hamiltonian, base.u).values[0]
    transport_term = np.zeros(grid.shape)
    for ax in range(d):
        d_y = (np.roll(j_values, -1, axis=ax)
               - np.roll(j_values, 1, axis=ax)) / (2.0 * y_grid.dx[ax])
        transport_term += np.tensordot(
            weights * drift0[ax][sub], d_y, axes=(y_axes, y_axes))

    coupling_term = eval_F(scenario.running_cost, m0).values

    residual = (time_term + gen_term - ham_term + nonlocal_term
                - transport_term + coupling_term)
    samples = _sampled(grid, residual, sample_points)
    return MasterResidualReport(
        mode="interior", residual=Field(grid, residual), samples=samples,
        sup_sampled=max((abs(v) for _, v in samples), default=0.0),
        sup_grid=float(np.max(np.abs(residual))), delta_t=delta_t,
        y_stride=stride,
        term_sups={
            "time": float(np.max(np.abs(time_term))),
            "generator": float(np.max(np.abs(gen_term))),
            "hamiltonian": float(np.max(np.abs(ham_term))),
            "nonlocal_probe": float(np.max(np.abs(nonlocal_term))),
            "transport_probe": float(np.max(np.abs(transport_term))),
            "coupling": float(np.max(np.abs(coupling_term))),
        })


# --------------------------------------------------------------------------
# flow consistency (the uniqueness mechanism)


@dataclass(frozen=True)
class FlowConsistencyReport:
    """Restart gap between the base flow and a fresh solve from inside it.

    ``gap`` is the sup over shared time slices of the value sup-distance
    plus the bounded-Lipschitz distance of the densities; uniqueness of
    the coupled solve makes it a fixed-point-tolerance quantity.
    """

    restart_time: float
    restart_index: int
    value_gap: float
    measure_gap: float
    gap: float
    tolerance: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "restart_time": self.restart_time,
            "restart_index": self.restart_index,
            "value_gap": self.value_gap,
            "measure_gap": self.measure_gap,
            "gap": self.gap,
            "tolerance": self.tolerance,
            "pass": self.passed,
        }


def flow_consistency(scenario: Scenario, t0: float, m0: Measure,
                     s: float) -> FlowConsistencyReport:
    """Restart the scenario from the flow at time s and compare.

    The restart inherits the base solve's time lattice (s snaps to the
    nearest slice), so the two trajectories are compared slice by slice
    with no interpolation.  Passes when the gap stays within twenty times
    the fixed-point stopping tolerance.
    """
    base = solve_scenario(scenario, t0, m0)
    n, dt = base.u.n_steps, base.u.dt
    if not (t0 - 1e-12 <= s < scenario.T):
        raise ValueError(f"restart time {s!r} outside [t0, T)")
    k = min(max(int(round((s - t0) / dt)), 0), n - 1)
    s_snap = t0 + k * dt

    fresh_problem = MfgProblem(
        kernel=scenario.kernel, hamiltonian=scenario.hamiltonian,
        running_cost=scenario.running_cost,
        terminal_cost=scenario.terminal_cost,
        m0=base.measure_at(k), t0=s_snap, T=scenario.T, n_steps=n - k,
        policy=scenario.policy)
    fresh = solve_mfg(fresh_problem)
    if not fresh.converged:
        raise DivergenceError(
            f"restart solve from s={s_snap:g} stalled at gap "
            f"{fresh.gap_history[-1]:.3e}")

    value_gap = measure_gap = gap = 0.0
    for j in range(n - k + 1):
        v = float(np.max(np.abs(fresh.u.values[j] - base.u.values[k + j])))
        m = d0_distance(fresh.measure_at(j), base.measure_at(k + j))
        value_gap = max(value_gap, v)
        measure_gap = max(measure_gap, m)
        gap = max(gap, v + m)
    tolerance = 20.0 * scenario.policy.tol_d0
    return FlowConsistencyReport(
        restart_time=s_snap, restart_index=k, value_gap=value_gap,
        measure_gap=measure_gap, gap=gap, tolerance=tolerance,
        passed=gap <= tolerance)
