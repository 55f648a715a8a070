"""The tensor core: tape-recorded ops and the finite-difference oracle.

Every layer in the model is built from these ops, and every one of them has
to survive the central-difference check shown here.
"""

import numpy as np

from lcm import tensor as T

rng = np.random.default_rng(0)
x = T.Tensor(rng.normal(size=(4, 6)), requires_grad=True)
w = T.Tensor(rng.normal(size=(6, 3)), requires_grad=True)

with T.Tape() as tape:
    hidden = T.gelu(T.matmul(x, w))
    probs = T.softmax_rows(hidden)
    loss = T.tsum(T.square(probs))
grads = T.backward(loss, tape)
print(f"loss {loss.item():.6f}; dL/dw has shape {grads[w].shape}")

report = T.finite_difference_check(
    lambda: T.tsum(T.square(T.softmax_rows(T.gelu(T.matmul(x, w))))),
    [x, w], eps=1e-5, tol=1e-4,
)
print(f"gradient check: max rel err {report.max_rel_err:.2e} over "
      f"{report.n_coords} coordinates -> {'pass' if report.passed else 'FAIL'}")

# the checker rejects a deliberately broken gradient
a = T.Tensor(rng.normal(size=(3, 3)), requires_grad=True)


def buggy():
    out = a.data * a.data
    return T.tsum(T._record("bad_square", (a,), out, lambda g: (2.05 * g * a.data,)))


bad = T.finite_difference_check(buggy, [a])
print(f"injected fault detected: passed={bad.passed} (rel err {bad.max_rel_err:.2e})")

# selective-scan recurrence: the decoder's sequential core
u = T.Tensor(rng.normal(size=(10, 4)), requires_grad=True)
delta = T.Tensor(rng.uniform(0.05, 0.5, size=(10, 4)), requires_grad=True)
b = T.Tensor(rng.normal(size=(10, 2)), requires_grad=True)
c = T.Tensor(rng.normal(size=(10, 2)), requires_grad=True)
a_neg = T.Tensor(-np.exp(rng.normal(size=(4, 2))), requires_grad=True)
scan_report = T.finite_difference_check(
    lambda: T.tsum(T.square(T.ssm_scan_core(u, delta, b, c, a_neg))),
    [u, delta, b, c, a_neg], eps=1e-6, tol=1e-5,
)
print(f"scan recurrence gradient: max rel err {scan_report.max_rel_err:.2e} -> "
      f"{'pass' if scan_report.passed else 'FAIL'}")
