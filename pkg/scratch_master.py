import time
import warnings

import numpy as np

from levymfg.coupling import Conv, Zero, eval_F
from levymfg.grid import Field, Grid
from levymfg.hjb import GeneralHamiltonian, QuadraticHamiltonian
from levymfg.kernels import KernelCache
from levymfg.levy import FractionalLaplacian, LevyTriplet
from levymfg.linearized import JKernel
from levymfg.master import (Scenario, derivative_check, eval_U,
                            flow_consistency, master_residual,
                            solve_scenario)
from levymfg.measures import Measure, d0_distance

TRIPLET = LevyTriplet(jumps=(FractionalLaplacian(1.5),))


def bump_kernel(grid):
    def bump(x):
        inside = x * x < 1.0
        return np.where(
            inside, 0.25 * np.exp(-1.0 / np.maximum(1.0 - x * x, 1e-300)),
            0.0)
    return Field.from_function(grid, bump)


def gauss(grid, rate, shift=0.0):
    return Measure.normalized(Field.from_function(
        grid, lambda x: np.exp(-rate * (x - shift) ** 2)))


def coupled_scenario(n):
    grid = Grid(n, 2.0)
    return Scenario(
        kernel=KernelCache(TRIPLET, grid),
        hamiltonian=QuadraticHamiltonian(0.5),
        running_cost=Conv(bump_kernel(grid)),
        terminal_cost=Zero(),
        T=0.5,
        dt_cap=0.03125 * (16.0 / n),
    )


S16 = coupled_scenario(16)
G16 = S16.grid
M16 = gauss(G16, 2.0)
M16P = gauss(G16, 2.0, 0.5)

# 1. terminal identity
u_T = eval_U(S16, 0.5, M16)
g_T = eval_F(S16.terminal_cost, M16)
print("terminal identity:", float(np.max(np.abs(u_T.values - g_T.values))))
rep_T = master_residual(S16, 0.5, M16, [(0.0,), (0.5,)])
print("terminal residual mode:", rep_T.mode, rep_T.sup_grid, rep_T.delta_t)

# 2. derivative check
t = time.time()
dc = derivative_check(S16, 0.0, M16, M16P, [0.2, 0.1, 0.05, 0.025])
print("derivative check (%.2fs): slope %.4f pairing %.4e pass %s" % (
    time.time() - t, dc.slope, dc.pairing_sup, dc.passed))
for h, defect in dc.rows:
    print("   h=%.3f defect=%.6e" % (h, defect))

# 3. J + 1 invariance
base16 = solve_scenario(S16, 0.0, M16)
from levymfg.linearized import j_field_batch
jk = j_field_batch(base16)
jk_shift = JKernel(grid=G16, t0=jk.t0, values=jk.values + 1.0,
                   mollifier_width=jk.mollifier_width)
dc_shift = derivative_check(S16, 0.0, M16, M16P, [0.2, 0.1, 0.05, 0.025],
                            j_kernel=jk_shift)
row_gap = max(abs(a[1] - b[1]) for a, b in zip(dc.rows, dc_shift.rows))
print("J+1 invariance row gap:", row_gap, " slope gap:",
      abs(dc.slope - dc_shift.slope))

# 4+13+14. decoupled scenario with a potential
G64 = Grid(64, 2.0)


def potential_h():
    def h(x, u, p):
        return 0.5 * p[0] ** 2 - 0.4 * np.cos(np.pi * x[0] / 2.0)

    def grad(x, u, p):
        return (p[0],)

    def hess(x, u, p):
        return np.broadcast_to(np.eye(1), p[0].shape + (1, 1))

    return GeneralHamiltonian(h=h, grad=grad, hess=hess,
                              uniformly_convex=True, convexity_bound=1.0)


SDEC = Scenario(
    kernel=KernelCache(TRIPLET, G64), hamiltonian=potential_h(),
    running_cost=Zero(), terminal_cost=Zero(), T=0.25, dt_cap=0.0078125)
MD = gauss(G64, 4.0)
MDP = gauss(G64, 4.0, 0.5)

u_dec = eval_U(SDEC, 0.125, MD)
u_dec2 = eval_U(SDEC, 0.125, MDP)
print("decoupled m0-independence:",
      float(np.max(np.abs(u_dec.values - u_dec2.values))),
      " sup u:", float(np.max(np.abs(u_dec.values))))

t = time.time()
dc_dec = derivative_check(SDEC, 0.125, MD, MDP, [0.2, 0.1])
print("decoupled derivative (%.2fs): slope %s defects %s" % (
    time.time() - t, dc_dec.slope, [r[1] for r in dc_dec.rows]))

t = time.time()
rep_dec = master_residual(SDEC, 0.125, MD, [(0.0,), (0.5,), (-1.0,)])
print("decoupled residual (%.2fs): sampled %.4e grid %.4e" % (
    time.time() - t, rep_dec.sup_sampled, rep_dec.sup_grid))
print("   terms:", {k: "%.3e" % v for k, v in rep_dec.term_sups.items()})

# 5-6. coupled residual + refinement
t = time.time()
rep16 = master_residual(S16, 0.25, M16, [(0.0,), (0.5,), (-1.0,)])
print("coupled residual n=16 (%.2fs): sampled %.4e grid %.4e stride %d" % (
    time.time() - t, rep16.sup_sampled, rep16.sup_grid, rep16.y_stride))
print("   terms:", {k: "%.3e" % v for k, v in rep16.term_sups.items()})

S32 = coupled_scenario(32)
M32 = gauss(S32.grid, 2.0)
t = time.time()
rep32 = master_residual(S32, 0.25, M32, [(0.0,), (0.5,), (-1.0,)])
print("coupled residual n=32 (%.2fs): sampled %.4e grid %.4e" % (
    time.time() - t, rep32.sup_sampled, rep32.sup_grid))
print("   terms:", {k: "%.3e" % v for k, v in rep32.term_sups.items()})
print("refinement ratios: sampled %.2f grid %.2f" % (
    rep16.sup_sampled / rep32.sup_sampled, rep16.sup_grid / rep32.sup_grid))

# 7. coarse-batch fallback
with warnings.catch_warnings(record=True) as caught:
    warnings.simplefilter("always")
    rep_fb = master_residual(S16, 0.25, M16, [(0.0,), (0.5,)],
                             y_batch_cap=8)
print("fallback: stride %d warnings %d sup shift %.3e" % (
    rep_fb.y_stride, len(caught),
    abs(rep_fb.sup_grid - rep16.sup_grid)))

# 8-10. flow consistency
fc = flow_consistency(S16, 0.0, M16, 0.25)
print("flow midpoint: value %.3e measure %.3e gap %.3e tol %.1e pass %s" % (
    fc.value_gap, fc.measure_gap, fc.gap, fc.tolerance, fc.passed))
fc0 = flow_consistency(S16, 0.0, M16, 0.0)
print("flow s=t0: gap %.3e" % fc0.gap)
fc_dec = flow_consistency(SDEC, 0.0, MD, 0.125)
print("decoupled flow: gap %.3e" % fc_dec.gap)

# 11. t0-stability
gaps = {}
for h in (0.04, 0.01):
    a = eval_U(S16, 0.25, M16)
    b = eval_U(S16, 0.25 - h, M16)
    gaps[h] = float(np.max(np.abs(a.values - b.values)))
c4, c1 = gaps[0.04] / np.sqrt(0.04), gaps[0.01] / np.sqrt(0.01)
print("t0 stability: gaps %s C(0.04)=%.4f C(0.01)=%.4f ratio %.3f" % (
    {k: "%.3e" % v for k, v in gaps.items()}, c4, c1, c1 / c4))

# 12. Lipschitz ladder
u_base = eval_U(S16, 0.0, M16)
for shift in (0.5, 0.25, 0.125):
    mp = gauss(G16, 2.0, shift)
    du = float(np.max(np.abs(eval_U(S16, 0.0, mp).values - u_base.values)))
    dist = d0_distance(M16, mp)
    print("lipschitz shift %.3f: dU %.3e d0 %.3e C %.4f" % (
        shift, du, dist, du / dist))
