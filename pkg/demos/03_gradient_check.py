"""Trust-but-verify for the hand-written backprop engine.

Every gradient in this package flows through the from-scratch reverse-mode
engine (no autograd framework).  This script differentiates the two full
training objectives -- the fixed-weight multi-task loss and the learned
log-variance variant -- through the entire network (convolutions, batch
norm, pooling, both heads, the alignment terms and the weight penalty),
then compares each parameter's gradient against 64-bit central
differences.
"""

import time

from semloc.cli import gradcheck_error

for method in ("mda", "hda"):
    t0 = time.time()
    err = gradcheck_error(method, seed=0)
    status = "OK" if err < 1e-4 else "BAD"
    print(f"{method}: max relative gradient error {err:.3e}  "
          f"[{status}, tolerance 1e-4, {time.time() - t0:.1f}s]")

print("\nChecked: every conv kernel, batch-norm scale/shift, linear weight,"
      "\noutput bias, and (for the second objective) the two log-variance"
      "\nscalars, on a 4-sample batch with central differences (h = 1e-5).")
