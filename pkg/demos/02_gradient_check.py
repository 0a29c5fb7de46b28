"""Finite-difference validation of every hand-written gradient.

Run from the repository root:

    python demos/02_gradient_check.py

Covers activation derivatives, full-network backprop, the analytic
objective gradient, and the meta-embedding backward pass (softmax and raw
attention, ratio and learned eta). A deliberately corrupted pass shows the
check actually catches broken gradients.
"""

from ltcmh import gradcheck

print("== gradient suites (max relative error vs central differences) ==")
errors = gradcheck.run_all(seed=0)
for name, err in errors.items():
    print(f"  {name:<24} {err:.3e}")
print(f"overall: {max(errors.values()):.3e} (threshold 1e-3)")

print("\n== negative control: gradient deliberately corrupted by +0.05 ==")
bad = gradcheck.check_net_backward(seed=0, corrupt=True)
print(f"  net_backward (corrupt)   {bad:.3e}  -> "
      f"{'caught' if bad > 1e-3 else 'MISSED'}")

print("\n== step-size sweep: error stays bounded across eps ==")
for eps in (1e-5, 1e-6, 1e-7):
    err = gradcheck.check_objective_grad(instances=10, seed=0, eps=eps,
                                         max_n=5, max_c=5)
    print(f"  eps={eps:.0e}  objective_grad {err:.3e}")
