"""Second-order jets of a residual swish network, checked against finite differences.

Every HJB residual needs V, V_t, grad_x V and the Hessian in x at each
collocation point.  The tape computes all of them in one forward-over-reverse
pass; here we look at one point and compare with central differences.
"""

import numpy as np

from deeppaac import NetConfig, Network, check_against_fd

net = Network(NetConfig("paac_residual", layers=3, width=32, init_seed=7), input_dim=3)
t, x = 0.4, np.array([0.3, -0.6])

jet = net.jet(t, x).numpy()
print("value     ", jet["v"])
print("d/dt      ", jet["dt"])
print("grad_x    ", jet["dx"].ravel())
print("hessian_x\n", jet["dxx"].reshape(2, 2))

# extended-precision reference; scaled error 1.0 means "at tolerance"
rep = check_against_fd(
    lambda tt, xx: net.jet(tt, xx),
    lambda tt, xx: net.evaluate(tt, xx, dtype=np.longdouble)[:, 0],
    t,
    x,
)
print(rep)

# a batch of points goes through the same tape in one sweep
ts = np.linspace(0.1, 0.9, 5)
xs = np.column_stack([np.linspace(0, 1, 5), np.linspace(-1, 0, 5)])
print("batched V:", net.jet(ts, xs).numpy()["v"].round(5))
