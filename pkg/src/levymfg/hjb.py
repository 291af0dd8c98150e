"""Backward Hamilton-Jacobi solver by time reversal and mild stepping.

The equation is posed terminally,

    -du/dt - L u + H(x, u, Du) = f(t, x),   u(T, x) = g(x),

with L the generator held by a KernelCache.  Internally the solver runs
forward in the reversed clock s = T - t, where the mild (Duhamel) form

    v(s) = K_s * g + int_0^s K_{s-r} * [f(T-r) - H(x, v(r), Dv(r))] dr

is discretized by exponential Euler and then corrected by whole-interval
Picard sweeps with a trapezoidal quadrature of the integral.  All public
trajectories are indexed in physical time.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    BudgetError,
    DivergenceError,
    GridMismatchError,
    NonFiniteFieldError,
    UnsupportedOrderError,
)
from .grid import Field, Grid, _derivative_multiplier_half
from .kernels import KernelCache
from .levy import order_alpha

_BLOWUP_SUP = 1e6
_DT_SAFETY = 0.5
_TERMINAL_TAIL_TOL = 1e-6
_PROBE_GRAD_TOL = 1e-6
_PROBE_EIG_TOL = 1e-8
_FD_STEP = 1e-5


# --------------------------------------------------------------------------
# Hamiltonians
#
# All callbacks are numpy-vectorized: ``x`` is a tuple of d coordinate
# arrays, ``u`` an array broadcastable against them, ``p`` a tuple of d
# arrays (one per gradient component).  ``value`` returns H(x, u, p) and
# ``grad_p`` its momentum gradient as a d-tuple.  ``curvature`` (second
# momentum derivative, shape (..., d, d)) and ``u_slope`` (derivative in
# the value argument) are optional and power the probe checks below.


@dataclass(frozen=True)
class QuadraticHamiltonian:
    """H(x, u, p) = weight * |p|^2 (state- and value-independent)."""

    weight: float = 1.0

    def __post_init__(self):
        if not self.weight > 0.0:
            raise ValueError("quadratic weight must be positive")

    uniformly_convex = True
    monotone_rate = None

    @property
    def convexity_bound(self) -> float:
        w = 2.0 * self.weight
        return max(w, 1.0 / w)

    def value(self, x, u, p):
        out = p[0] * p[0]
        for pi in p[1:]:
            out = out + pi * pi
        return self.weight * out

    def grad_p(self, x, u, p):
        return tuple(2.0 * self.weight * pi for pi in p)

    def curvature(self, x, u, p):
        d = len(p)
        batch = np.broadcast(u, *p).shape
        eye = 2.0 * self.weight * np.eye(d)
        return np.broadcast_to(eye, batch + (d, d))

    u_slope = None


@dataclass(frozen=True)
class SeparableHamiltonian:
    """H(x, u, p) = h1(x, p) + h2(x, u): momentum and value parts split.

    ``monotone_rate`` declares a lower bound on d(h2)/du to be certified by
    ``probe_hamiltonian``; leave None for no monotonicity claim.
    """

    h1: Callable
    dp_h1: Callable
    h2: Callable
    du_h2: Callable
    monotone_rate: float | None = None
    uniformly_convex: bool = False
    convexity_bound: float = math.inf
    hess_h1: Callable | None = None

    def value(self, x, u, p):
        return self.h1(x, p) + self.h2(x, u)

    def grad_p(self, x, u, p):
        return tuple(self.dp_h1(x, p))

    def curvature(self, x, u, p):
        if self.hess_h1 is None:
            return None
        return self.hess_h1(x, p)

    def u_slope(self, x, u, p):
        return self.du_h2(x, u)


@dataclass(frozen=True)
class GeneralHamiltonian:
    """Fully general H via callbacks (x, u, p) -> array.

    ``grad`` must return a d-tuple of arrays; ``hess`` (optional) an
    (..., d, d) array of momentum curvatures; ``du`` (optional) dH/du.
    """

    h: Callable
    grad: Callable
    hess: Callable | None = None
    du: Callable | None = None
    uniformly_convex: bool = False
    convexity_bound: float = math.inf
    monotone_rate: float | None = None

    def value(self, x, u, p):
        return self.h(x, u, p)

    def grad_p(self, x, u, p):
        return tuple(self.grad(x, u, p))

    def curvature(self, x, u, p):
        if self.hess is None:
            return None
        return self.hess(x, u, p)

    @property
    def u_slope(self):
        if self.du is None:
            return None
        return lambda x, u, p: self.du(x, u, p)


def zero_hamiltonian() -> GeneralHamiltonian:
    """H identically zero: the solver degenerates to the linear flow."""
    return GeneralHamiltonian(
        h=lambda x, u, p: np.zeros(np.broadcast(u, *p).shape),
        grad=lambda x, u, p: tuple(np.zeros_like(pi) for pi in p),
        hess=None,
        du=None,
    )


def drift_hamiltonian(velocity: Sequence) -> GeneralHamiltonian:
    """H(x, u, p) = b(x) . p for a velocity with constant or callable parts.

    Each entry of ``velocity`` is a float or a callable taking the unpacked
    coordinate arrays (the Field.from_function convention).  The momentum
    gradient of this H is exactly b, which makes the solved equation the
    dual of forward transport with drift b.
    """
    comps = tuple(velocity)

    def b(x, i):
        vi = comps[i]
        return vi(*x) if callable(vi) else float(vi)

    def h(x, u, p):
        out = b(x, 0) * p[0]
        for i in range(1, len(p)):
            out = out + b(x, i) * p[i]
        return out

    def grad(x, u, p):
        return tuple(np.broadcast_to(np.asarray(b(x, i), dtype=float),
                                     np.broadcast(u, *p).shape)
                     for i in range(len(p)))

    def hess(x, u, p):
        d = len(p)
        batch = np.broadcast(u, *p).shape
        return np.broadcast_to(np.zeros((d, d)), batch + (d, d))

    return GeneralHamiltonian(h=h, grad=grad, hess=hess, du=None)


# --------------------------------------------------------------------------
# probe checks tying declared structure to the supplied callbacks


@dataclass(frozen=True)
class HamiltonianProbeReport:
    """Finite-difference and spectral probes of a Hamiltonian's callbacks.

    ``max_grad_gap`` is the worst |grad_p - central difference of value|
    over the probes, relative to max(1, sup |grad_p|).  The curvature range
    and value-slope minimum are None when the Hamiltonian does not supply
    the corresponding callback.
    """

    max_grad_gap: float
    curvature_eig_range: tuple[float, float] | None
    min_u_slope: float | None
    passed: bool
    trials: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "max_grad_gap": self.max_grad_gap,
            "curvature_eig_range": self.curvature_eig_range,
            "min_u_slope": self.min_u_slope,
            "pass": self.passed,
            "trials": self.trials,
            "seed": self.seed,
        }


def probe_hamiltonian(hamiltonian, dims: int, seed: int = 0, trials: int = 64,
                      box: float = 2.0) -> HamiltonianProbeReport:
    """Check grad_p against finite differences and any declared bounds.

    Probes are uniform in [-box, box] for each coordinate, value and
    momentum component.  A Hamiltonian flagged ``uniformly_convex`` must
    have curvature eigenvalues inside [1/c, c] for c = convexity_bound; a
    declared ``monotone_rate`` gamma requires u_slope >= gamma everywhere.
    """
    if dims not in (1, 2):
        raise ValueError("only d in {1, 2}")
    rng = np.random.default_rng(seed)
    x = tuple(rng.uniform(-box, box, size=trials) for _ in range(dims))
    u = rng.uniform(-box, box, size=trials)
    p = tuple(rng.uniform(-box, box, size=trials) for _ in range(dims))

    supplied = hamiltonian.grad_p(x, u, p)
    sup_grad = max(float(np.max(np.abs(np.asarray(gi)))) for gi in supplied)
    denom = max(1.0, sup_grad)
    gap = 0.0
    for i in range(dims):
        shift = tuple(np.asarray(pj, dtype=float).copy() for pj in p)
        shift[i][:] = p[i] + _FD_STEP
        hi = hamiltonian.value(x, u, shift)
        shift[i][:] = p[i] - _FD_STEP
        lo = hamiltonian.value(x, u, shift)
        fd = (np.asarray(hi, dtype=float) - lo) / (2.0 * _FD_STEP)
        gap = max(gap, float(np.max(np.abs(fd - supplied[i]))))
    max_gap = gap / denom
    ok = max_gap <= _PROBE_GRAD_TOL

    eig_range = None
    if getattr(hamiltonian, "uniformly_convex", False):
        curv = hamiltonian.curvature(x, u, p)
        if curv is None:
            raise ValueError(
                "uniformly_convex declared without a curvature callback")
        eigs = np.linalg.eigvalsh(np.asarray(curv, dtype=float))
        eig_range = (float(np.min(eigs)), float(np.max(eigs)))
        c1 = float(hamiltonian.convexity_bound)
        ok = ok and (eig_range[0] >= 1.0 / c1 - _PROBE_EIG_TOL)
        ok = ok and (eig_range[1] <= c1 + _PROBE_EIG_TOL)

    min_slope = None
    rate = getattr(hamiltonian, "monotone_rate", None)
    if rate is not None:
        slope_fn = hamiltonian.u_slope
        if slope_fn is None:
            raise ValueError(
                "monotone_rate declared without a u_slope callback")
        slopes = np.broadcast_to(np.asarray(slope_fn(x, u, p), dtype=float),
                                 u.shape)
        min_slope = float(np.min(slopes))
        ok = ok and (min_slope >= float(rate) - _PROBE_EIG_TOL)

    return HamiltonianProbeReport(
        max_grad_gap=max_gap,
        curvature_eig_range=eig_range,
        min_u_slope=min_slope,
        passed=bool(ok),
        trials=trials,
        seed=seed,
    )


# --------------------------------------------------------------------------
# time slabs


@dataclass(frozen=True)
class Trajectory:
    """Uniformly spaced time slices of a scalar or vector field.

    ``values`` has shape (n_steps+1, *grid.shape) for scalars and
    (n_steps+1, d, *grid.shape) for vector fields (e.g. drifts); slice 0
    sits at t0 and slice n_steps at T.
    """

    grid: Grid
    t0: float
    T: float
    values: np.ndarray = dc_field(repr=False)

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=float))
        gdims = self.grid.dims
        if v.ndim == 1 + gdims:
            vec = False
        elif v.ndim == 2 + gdims and v.shape[1] == gdims:
            vec = True
        else:
            raise ValueError(
                f"trajectory values of shape {v.shape} do not match a "
                f"scalar or d-vector history on a {self.grid.shape} grid")
        if v.shape[-gdims:] != self.grid.shape:
            raise GridMismatchError(
                f"slice shape {v.shape[-gdims:]} != grid {self.grid.shape}")
        if v.shape[0] < 2:
            raise ValueError("a trajectory needs at least two time slices")
        if not np.all(np.isfinite(v)):
            raise NonFiniteFieldError("trajectory contains NaN/Inf entries")
        if not self.T > self.t0:
            raise ValueError("need T > t0")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "t0", float(self.t0))
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "_vector", vec)

    @property
    def is_vector(self) -> bool:
        return self._vector

    @property
    def n_steps(self) -> int:
        return self.values.shape[0] - 1

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def slice_field(self, k: int) -> Field:
        if self.is_vector:
            raise ValueError("slice_field is for scalar trajectories; "
                             "use component_field")
        return Field(self.grid, self.values[k])

    def component_field(self, k: int, i: int) -> Field:
        if not self.is_vector:
            raise ValueError("component_field needs a vector trajectory")
        return Field(self.grid, self.values[k, i])

    @property
    def initial(self) -> Field:
        return self.slice_field(0)

    @property
    def terminal(self) -> Field:
        return self.slice_field(self.n_steps)

    def index_of(self, t: float) -> int:
        """Nearest slice index to physical time t (must be on the slab)."""
        k = int(round((t - self.t0) / self.dt))
        if k < 0 or k > self.n_steps or abs(self.t0 + k * self.dt - t) > 1e-9:
            raise ValueError(f"time {t} is not a slice of [{self.t0}, {self.T}]")
        return k

    @classmethod
    def from_fields(cls, fields: Sequence[Field], t0: float, T: float
                    ) -> "Trajectory":
        if not fields:
            raise ValueError("no slices given")
        g = fields[0].grid
        for f in fields[1:]:
            if f.grid != g:
                raise GridMismatchError("slices live on different grids")
        return cls(g, t0, T, np.stack([f.values for f in fields]))

    @classmethod
    def constant(cls, f: Field, t0: float, T: float, n_steps: int
                 ) -> "Trajectory":
        vals = np.broadcast_to(f.values, (n_steps + 1,) + f.grid.shape)
        return cls(f.grid, t0, T, np.array(vals))

    @classmethod
    def zero(cls, grid: Grid, t0: float, T: float, n_steps: int,
             vector: bool = False) -> "Trajectory":
        shape = ((n_steps + 1, grid.dims) if vector else (n_steps + 1,))
        return cls(grid, t0, T, np.zeros(shape + grid.shape))


# --------------------------------------------------------------------------
# solver


def step_budget(triplet_order: float, grid: Grid) -> float:
    """Largest admissible dt for mild stepping: 0.5 * min(dx)^alpha."""
    return _DT_SAFETY * min(grid.dx) ** triplet_order


def _solver_order(cache: KernelCache) -> float:
    alpha = order_alpha(cache.triplet)
    if alpha <= 1.0:
        raise UnsupportedOrderError(
            f"generator order alpha={alpha:g} <= 1: gradient transport "
            "dominates the smoothing and the mild stepping is not supported")
    return alpha


def _nyquist_fraction(f: Field) -> float:
    """Spectral mass fraction on the Nyquist shell (resolution indicator)."""
    spec = np.fft.fftn(f.values)
    peak = float(np.max(np.abs(spec)))
    if peak == 0.0:
        return 0.0
    tail = 0.0
    for ax in range(f.grid.dims):
        sl = [slice(None)] * f.grid.dims
        sl[ax] = f.grid.n[ax] // 2
        tail = max(tail, float(np.max(np.abs(spec[tuple(sl)]))))
    return tail / peak


def _gradient_multipliers(grid: Grid) -> list[np.ndarray]:
    mults = []
    for i in range(grid.dims):
        beta = tuple(1 if j == i else 0 for j in range(grid.dims))
        mults.append(_derivative_multiplier_half(grid, beta))
    return mults


def _batch_gradient(grid: Grid, values: np.ndarray,
                    mults: list[np.ndarray]) -> tuple[np.ndarray, ...]:
    """First partials over the trailing grid axes (leading axes batch)."""
    axes = tuple(range(values.ndim - grid.dims, values.ndim))
    spec = np.fft.rfftn(values, axes=axes)
    return tuple(
        np.fft.irfftn(spec * m, s=grid.shape, axes=axes) for m in mults)


def _guard(slice_values: np.ndarray, reversed_index: int, n_steps: int,
           T: float, dt: float) -> None:
    sup = float(np.max(np.abs(slice_values)))
    if not np.isfinite(sup) or sup > _BLOWUP_SUP:
        stable = n_steps - (reversed_index - 1)
        raise DivergenceError(
            f"backward solve blew up (sup {sup:.3e}) at t="
            f"{T - reversed_index * dt:.6g}; last stable physical slice "
            f"index {stable} of {n_steps}")


def solve_hjb(kernel: KernelCache, hamiltonian, source: Trajectory | None,
              terminal: Field, t0: float, T: float, n_steps: int,
              picard_sweeps: int = 2) -> Trajectory:
    """Solve the terminal-value problem -du/dt - Lu + H(x,u,Du) = f.

    The first pass is exponential Euler in the reversed clock; each Picard
    sweep then rebuilds the trajectory with the Duhamel integrand frozen at
    the previous sweep's values and integrated by the composite trapezoid.
    Raises BudgetError when dt exceeds the 0.5*dx^alpha budget and
    DivergenceError when a slice's sup-norm passes 1e6.
    """
    grid = kernel.grid
    if terminal.grid != grid:
        raise GridMismatchError("terminal data grid != kernel grid")
    if not T > t0:
        raise ValueError("need T > t0")
    if n_steps < 1:
        raise ValueError("need at least one step")
    if picard_sweeps < 0:
        raise ValueError("picard_sweeps must be >= 0")
    alpha = _solver_order(kernel)
    dt = (T - t0) / n_steps
    budget = step_budget(alpha, grid)
    if dt > budget * (1.0 + 1e-12):
        need = int(math.ceil((T - t0) / budget))
        raise BudgetError(
            f"dt={dt:.3e} exceeds the stepping budget {budget:.3e} "
            f"(0.5*dx^alpha, alpha={alpha:g}); use n_steps >= {need}")
    if source is not None:
        if source.grid != grid:
            raise GridMismatchError("source grid != kernel grid")
        if source.is_vector:
            raise ValueError("source trajectory must be scalar")
        if source.n_steps != n_steps or abs(source.t0 - t0) > 1e-12 or \
                abs(source.T - T) > 1e-12:
            raise ValueError("source trajectory must share the time slab")
    if _nyquist_fraction(terminal) > _TERMINAL_TAIL_TOL:
        warnings.warn(
            "terminal data is marginally resolved: Nyquist spectral "
            "fraction exceeds 1e-6; expect degraded accuracy", stacklevel=2)

    mesh = grid.meshgrid()
    mults = _gradient_multipliers(grid)

    def integrand(slice_values: np.ndarray, rev_index: int) -> np.ndarray:
        grad = _batch_gradient(grid, slice_values, mults)
        ham = hamiltonian.value(mesh, slice_values, grad)
        if source is None:
            return -np.asarray(ham, dtype=float)
        return source.values[n_steps - rev_index] - ham

    # exponential Euler in the reversed clock
    w = np.empty((n_steps + 1,) + grid.shape)
    w[0] = terminal.values
    for j in range(n_steps):
        rhs = w[j] + dt * integrand(w[j], j)
        w[j + 1] = kernel.apply_array(dt, rhs)
        _guard(w[j + 1], j + 1, n_steps, T, dt)

    # whole-interval corrections: trapezoidal integrand from the last sweep
    half = 0.5 * dt
    for _ in range(picard_sweeps):
        rhs_all = _batch_gradient(grid, w, mults)
        ham_all = hamiltonian.value(mesh, w, rhs_all)
        if source is None:
            n_all = -np.asarray(ham_all, dtype=float)
        else:
            n_all = source.values[::-1] - ham_all
        fresh = np.empty_like(w)
        fresh[0] = terminal.values
        for j in range(n_steps):
            propagated = kernel.apply_array(dt, fresh[j] + half * n_all[j])
            fresh[j + 1] = propagated + half * n_all[j + 1]
            _guard(fresh[j + 1], j + 1, n_steps, T, dt)
        w = fresh

    return Trajectory(grid, t0, T, w[::-1])


# --------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class GradientBoundReport:
    """Per-slice grid sup-norms of a value trajectory and its derivatives.

    ``sup_du`` uses the pointwise Euclidean norm of the gradient;
    ``sup_d2u``/``sup_d3u`` take the worst multi-index of that order.
    ``sup_C1`` is the largest per-slice sup|u| + sup|Du|.
    """

    times: np.ndarray
    sup_u: np.ndarray
    sup_du: np.ndarray
    sup_d2u: np.ndarray
    sup_d3u: np.ndarray

    @property
    def sup_C1(self) -> float:
        return float(np.max(self.sup_u + self.sup_du))

    def to_dict(self) -> dict:
        return {
            "times": [float(t) for t in self.times],
            "sup_u": [float(v) for v in self.sup_u],
            "sup_du": [float(v) for v in self.sup_du],
            "sup_d2u": [float(v) for v in self.sup_d2u],
            "sup_d3u": [float(v) for v in self.sup_d3u],
            "sup_C1": self.sup_C1,
        }


def _multi_indices(dims: int, order: int) -> list[tuple[int, ...]]:
    if dims == 1:
        return [(order,)]
    return [(k, order - k) for k in range(order, -1, -1)]


def gradient_bound_report(u: Trajectory) -> GradientBoundReport:
    """Sup-norms of u, Du, D^2 u, D^3 u per slice (smoothness diagnostic)."""
    if u.is_vector:
        raise ValueError("gradient bounds are for scalar trajectories")
    grid = u.grid
    axes = tuple(range(1, 1 + grid.dims))
    spec = np.fft.rfftn(u.values, axes=axes)

    def sup_of(beta: tuple[int, ...]) -> np.ndarray:
        mult = _derivative_multiplier_half(grid, beta)
        der = np.fft.irfftn(spec * mult, s=grid.shape, axes=axes)
        return np.max(np.abs(der), axis=axes)

    sup_u = np.max(np.abs(u.values), axis=axes)
    grads = [np.fft.irfftn(spec * m, s=grid.shape, axes=axes)
             for m in _gradient_multipliers(grid)]
    mag = np.sqrt(sum(g * g for g in grads))
    sup_du = np.max(mag, axis=axes)
    sup_d2 = np.max([sup_of(b) for b in _multi_indices(grid.dims, 2)], axis=0)
    sup_d3 = np.max([sup_of(b) for b in _multi_indices(grid.dims, 3)], axis=0)
    return GradientBoundReport(
        times=u.times, sup_u=sup_u, sup_du=sup_du,
        sup_d2u=sup_d2, sup_d3u=sup_d3)
