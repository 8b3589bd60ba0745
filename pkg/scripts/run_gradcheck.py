"""Finite-difference check of every loss on 20 random 6x6 inputs."""
import sys

from neuroseg.experiments import gradient_suite

rows = gradient_suite(20)
for r in rows:
    print(f"{r['loss']:>9}  {r['max_rel_error']:.2e}  tol {r['tolerance']:.0e}  {'PASS' if r['passed'] else 'FAIL'}")
sys.exit(0 if all(r["passed"] for r in rows) else 1)
