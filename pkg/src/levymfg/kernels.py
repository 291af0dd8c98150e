"""Spectral heat kernels for Levy generators on the periodic box.

The semigroup e^{tL} acts diagonally in Fourier space through the multiplier
e^{-t Psi(xi)}.  A ``KernelCache`` stores the symbol once per (triplet, grid)
pair plus the multiplier for one preferred step size; arbitrary times are
composed by binary exponentiation of the cached step multiplier and at most
one directly exponentiated fractional step.  The adjoint semigroup uses the
conjugate symbol, which in physical space is the reflected kernel.

Kernel fields are only handed out when the multiplier has decayed below
1e-12 at the Nyquist shell; otherwise the grid cannot represent the kernel
and a ``ResolutionError`` reports the resolution that would suffice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteFieldError, ResolutionError, SpectralResidueError
from .grid import Field, Grid, spectral_derivative
from .levy import LevyTriplet, UnsupportedOrderError, order_alpha, symbol_eval

_NYQUIST_TOL = 1e-12
_MASS_TOL = 1e-10
_RINGING_TOL = 1e-9
_RESIDUE_TOL = 1e-10
_MEMO_LIMIT = 64


class KernelCache:
    """Cached Fourier multipliers of e^{tL} for one generator on one grid.

    ``dt`` is the preferred composition step: multipliers for t = q*dt + r
    are built as ``step**q * exp(-r*Psi)``.  Without a dt every requested
    time is exponentiated directly.
    """

    def __init__(self, triplet: LevyTriplet, grid: Grid, dt: float | None = None):
        if triplet.dims != grid.dims:
            raise ValueError(
                f"triplet dimension {triplet.dims} != grid dimension {grid.dims}"
            )
        if dt is not None and dt <= 0.0:
            raise ValueError("step size dt must be positive")
        self.triplet = triplet
        self.grid = grid
        self.dt = dt
        sym = np.ascontiguousarray(symbol_eval(triplet, grid))
        origin = (0,) * grid.dims
        sym[origin] = 0.0  # conserved mass: DC multiplier stays exactly 1
        self.symbol = sym
        self._step_mult = None if dt is None else self._direct_multiplier(dt)
        self._memo: dict[tuple[float, bool], np.ndarray] = {}

    # -- multiplier assembly -------------------------------------------------

    def _direct_multiplier(self, t: float) -> np.ndarray:
        mult = np.exp(-t * self.symbol)
        mult[(0,) * self.grid.dims] = 1.0
        return mult

    def multiplier(self, t: float, adjoint: bool = False) -> np.ndarray:
        """Fourier multiplier of e^{tL} (or its adjoint) at time t >= 0."""
        if t < 0.0:
            raise ValueError("semigroup time must be nonnegative")
        key = (float(t), bool(adjoint))
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        if adjoint:
            mult = np.conj(self.multiplier(t, adjoint=False))
        elif t == 0.0:
            mult = np.ones(self.grid.shape, dtype=complex)
        elif self.dt is not None and t == self.dt:
            mult = self._step_mult
        elif self.dt is None:
            mult = self._direct_multiplier(t)
        else:
            q = int(np.floor(t / self.dt + 1e-12))
            r = max(t - q * self.dt, 0.0)
            mult = np.ones(self.grid.shape, dtype=complex)
            power = self._step_mult
            while q:
                if q & 1:
                    mult = mult * power
                power = power * power
                q >>= 1
            if r > 0.0:
                mult = mult * self._direct_multiplier(r)
            mult[(0,) * self.grid.dims] = 1.0
        if len(self._memo) >= _MEMO_LIMIT:
            self._memo.pop(next(iter(self._memo)))
        self._memo[key] = mult
        return mult

    # -- application ---------------------------------------------------------

    def apply_array(self, t: float, values: np.ndarray, adjoint: bool = False) -> np.ndarray:
        """Smooth raw values (grid axes last; leading axes broadcast)."""
        mult = self.multiplier(t, adjoint)
        axes = tuple(range(values.ndim - self.grid.dims, values.ndim))
        spec = np.fft.fftn(values, axes=axes) * mult
        out = np.fft.ifftn(spec, axes=axes)
        scale = max(1.0, float(np.max(np.abs(out.real))))
        residue = float(np.max(np.abs(out.imag)))
        if residue > _RESIDUE_TOL * scale:
            raise SpectralResidueError(
                f"imaginary residue {residue:.3e} after semigroup application"
            )
        return out.real

    def nyquist_tail(self, t: float, adjoint: bool = False) -> float:
        """Largest multiplier magnitude on the Nyquist shell."""
        mult = self.multiplier(t, adjoint)
        tail = 0.0
        for ax in range(self.grid.dims):
            sl = [slice(None)] * self.grid.dims
            sl[ax] = self.grid.n[ax] // 2
            tail = max(tail, float(np.max(np.abs(mult[tuple(sl)]))))
        return tail

    def _required_n(self, t: float, tail: float) -> int:
        """Estimate a power-of-two n that would push the tail below tolerance."""
        try:
            alpha = order_alpha(self.triplet)
        except UnsupportedOrderError:
            alpha = 1.0
        target = -np.log(_NYQUIST_TOL)
        current = -np.log(max(tail, 1e-300))
        n_max = max(self.grid.n)
        if current <= 0.0:
            factor = 16.0
        else:
            factor = (target / current) ** (1.0 / alpha)
        need = n_max * max(factor, 1.0)
        n_req = 8
        while n_req < need:
            n_req *= 2
        return max(2 * n_max, n_req)


def kernel_field(cache: KernelCache, t: float, adjoint: bool = False) -> Field:
    """Real-space transition kernel K_t centered at the origin.

    Raises ``ResolutionError`` when the multiplier has not decayed below
    1e-12 at the Nyquist shell, naming a grid size that would resolve it.
    """
    if t <= 0.0:
        raise ValueError("kernel time must be positive")
    grid = cache.grid
    tail = cache.nyquist_tail(t, adjoint)
    if tail >= _NYQUIST_TOL:
        raise ResolutionError(
            f"kernel at t={t:g} unresolved: Nyquist multiplier {tail:.3e} "
            f">= {_NYQUIST_TOL:g}; need n >= {cache._required_n(t, tail)} per axis"
        )
    mult = cache.multiplier(t, adjoint)
    raw = np.fft.ifftn(mult)
    scale = max(float(np.max(np.abs(raw.real))), 1e-300)
    residue = float(np.max(np.abs(raw.imag)))
    if residue > _RESIDUE_TOL * scale:
        raise SpectralResidueError(
            f"imaginary residue {residue:.3e} in kernel synthesis"
        )
    vals = raw.real
    for ax in range(grid.dims):
        vals = np.roll(vals, grid.n[ax] // 2, axis=ax)
    vals = vals / grid.cell_volume
    if not np.all(np.isfinite(vals)):
        raise NonFiniteFieldError("kernel synthesis produced non-finite values")
    peak = float(np.max(vals))
    trough = float(np.min(vals))
    if trough < -_RINGING_TOL * peak:
        raise ResolutionError(
            f"kernel ringing {trough:.3e} below -{_RINGING_TOL:g} * peak {peak:.3e}"
        )
    field = Field(grid, vals)
    mass = field.integral()
    if abs(mass - 1.0) > _MASS_TOL:
        raise SpectralResidueError(f"kernel mass {mass!r} deviates from 1")
    return field


def semigroup_apply(cache: KernelCache, t: float, f: Field, adjoint: bool = False) -> Field:
    """Evolve a field by e^{tL} (adjoint=True: by the adjoint semigroup)."""
    if f.grid != cache.grid:
        from .errors import GridMismatchError

        raise GridMismatchError("field grid does not match kernel cache grid")
    if t < 0.0:
        raise ValueError("semigroup time must be nonnegative")
    if t == 0.0:
        return f
    out = cache.apply_array(t, f.values, adjoint)
    if not np.all(np.isfinite(out)):
        raise NonFiniteFieldError("semigroup application produced non-finite values")
    return f.with_values(out)


@dataclass(frozen=True)
class KernelDecayReport:
    """L1 decay certification of a derivative of the heat kernel."""

    alpha: float
    beta: tuple[int, ...]
    times: tuple[float, ...]
    norms: tuple[float, ...]
    k_hat: float
    slope: float
    target_slope: float
    per_decade_slopes: tuple[float, ...]
    passed: bool

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta": list(self.beta),
            "times": list(self.times),
            "l1_norms": list(self.norms),
            "K_hat": self.k_hat,
            "slope": self.slope,
            "target_slope": self.target_slope,
            "per_decade_slopes": list(self.per_decade_slopes),
            "pass": self.passed,
        }


def verify_K_assumption(
    triplet: LevyTriplet,
    grid: Grid,
    beta,
    times,
) -> KernelDecayReport:
    """Certify ||D^beta K_t||_L1 ~ t^{-|beta|/alpha} over a ladder of times.

    The L1 norms are computed by grid quadrature of the synthesized kernels;
    the decay exponent comes from a log-log least-squares fit and must land
    within 0.02 of -|beta|/alpha.  K_hat is the largest rescaled norm
    ||D^beta K_t||_L1 * t^{|beta|/alpha} over the ladder.
    """
    if isinstance(beta, int):
        if grid.dims != 1:
            raise ValueError("beta must give one order per axis in d > 1")
        beta = (beta,)
    beta = tuple(int(b) for b in beta)
    if len(beta) != grid.dims or any(b < 0 for b in beta):
        raise ValueError("beta must be a nonnegative multi-index, one entry per axis")
    times = tuple(sorted(float(t) for t in times))
    if len(times) < 2:
        raise ValueError("need at least two times to fit a decay slope")
    if times[0] <= 0.0:
        raise ValueError("kernel times must be positive")

    alpha = order_alpha(triplet)
    weight = sum(beta)
    cache = KernelCache(triplet, grid)
    norms = []
    for t in times:
        kernel = kernel_field(cache, t)
        if weight:
            kernel = spectral_derivative(kernel, beta)
        norms.append(float(grid.cell_volume * np.sum(np.abs(kernel.values))))
    log_t = np.log(np.asarray(times))
    log_n = np.log(np.asarray(norms))
    slope = float(np.polyfit(log_t, log_n, 1)[0])
    per_decade = tuple(
        float((log_n[i + 1] - log_n[i]) / (log_t[i + 1] - log_t[i]))
        for i in range(len(times) - 1)
    )
    target = -weight / alpha
    k_hat = max(n * t ** (weight / alpha) for n, t in zip(norms, times))
    passed = abs(slope - target) <= 0.02
    return KernelDecayReport(
        alpha=alpha,
        beta=beta,
        times=times,
        norms=tuple(norms),
        k_hat=float(k_hat),
        slope=slope,
        target_slope=float(target),
        per_decade_slopes=per_decade,
        passed=passed,
    )
