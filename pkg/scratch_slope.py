import numpy as np

from levymfg.coupling import Conv, Zero
from levymfg.grid import Field, Grid
from levymfg.hjb import QuadraticHamiltonian
from levymfg.kernels import KernelCache
from levymfg.levy import FractionalLaplacian, LevyTriplet
from levymfg.linearized import linearize, solve_linear_system
from levymfg.master import Scenario, eval_U, solve_scenario
from levymfg.measures import Measure

TRIPLET = LevyTriplet(jumps=(FractionalLaplacian(1.5),))


def bump_kernel(grid, amp):
    def bump(x):
        inside = x * x < 1.0
        return np.where(
            inside, amp * np.exp(-1.0 / np.maximum(1.0 - x * x, 1e-300)),
            0.0)
    return Field.from_function(grid, bump)


def gauss(grid, rate, shift=0.0):
    return Measure.normalized(Field.from_function(
        grid, lambda x: np.exp(-rate * (x - shift) ** 2)))


def run(n, amp, label):
    grid = Grid(n, 2.0)
    scen = Scenario(
        kernel=KernelCache(TRIPLET, grid),
        hamiltonian=QuadraticHamiltonian(0.5),
        running_cost=Conv(bump_kernel(grid, amp)),
        terminal_cost=Zero(),
        T=0.5,
        dt_cap=0.03125 * (16.0 / n),
    )
    m0 = gauss(grid, 2.0)
    m0p = gauss(grid, 2.0, 0.5)
    base = solve_scenario(scen, 0.0, m0)
    u0 = base.u.initial.values
    diff = Field(grid, m0p.values - m0.values)
    system = linearize(base, diff)
    z, _, rep = solve_linear_system(system)
    paired = z.initial.values
    print("%s: solve iters %d, pairing sup %.4e" % (
        label, rep.iterations, float(np.max(np.abs(paired)))))
    hs = [0.2, 0.1, 0.05, 0.025]
    defects = []
    for h in hs:
        mix = Measure.from_values(
            grid, (1.0 - h) * m0.values + h * m0p.values)
        u_h = eval_U(scen, 0.0, mix).values
        d = float(np.max(np.abs(u_h - u0 - h * paired)))
        defects.append(d)
        print("   h=%.3f defect=%.6e" % (h, d))
    slope = np.polyfit(np.log(hs), np.log(np.maximum(defects, 1e-300)),
                       1)[0]
    print("   slope %.4f" % slope)


run(16, 0.25, "n=16 weak (amp 0.25)")
run(16, 1.50, "n=16 strong (amp 1.5)")
