"""Actor-critic training on the continuous-payment problem.

The optimum is known: V = (C0 + 1/2)(T - t) - w with total effort
beta + Z = 1.  We train for a short budget and watch the validation
metrics and the grid error against the closed form shrink.

    python demos/02_continuous_payment.py [steps]
"""

import sys

from deeppaac import GridSpec, TrainConfig, analytic_error_grid, get_problem, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 600
prob = get_problem("continuous_payment")
cfg = TrainConfig.for_problem(prob, max_steps=steps, seed=0)
print(f"M={cfg.M} B={cfg.B} lr {cfg.lr0:g} -> {cfg.lr_end:g}, tolerances {cfg.tol_int:g} / {cfg.tol_ctrl:g}")


def progress(state, m):
    if state.step % 100 == 0:
        print(f"step {state.step:5d}  Linf_int {m.Linf_int:.3e}  Linf_ctrl {m.Linf_ctrl:.3e}")


rep = train(prob, cfg, callback=progress)
print(f"{rep.status} after {rep.steps} steps ({rep.wall_time:.1f}s)")

grid = GridSpec.default(prob, t_values=(0.0, 0.5))
s = analytic_error_grid(prob, rep.value, rep.control, grid)
print(f"max |V - V*| {s.value_max:.3e}   max |beta + Z - 1| {s.max_abs('effort'):.3e}")
# alpha is not identified by the first-order conditions; only the sum is
u = rep.control.forward_control([0.0, 0.5], [[0.5], [0.5]])
print("alpha, beta, Z at w=0.5:", u.round(4).tolist())
