#!/usr/bin/env python3
"""Run the finite-difference gradient checks over all three scopes and
print a per-tensor report. Exits nonzero if any tensor misses tolerance."""

import sys

from caformer.gradcheck import TOLERANCE, run_gradcheck

if __name__ == "__main__":
    seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
    status = 0
    for scope in ("cme", "block", "all"):
        errors = run_gradcheck(scope, seed=seed)
        worst_name, worst = max(errors.items(), key=lambda kv: kv[1])
        failing = {n: e for n, e in errors.items() if not e < TOLERANCE}
        verdict = "ok" if not failing else f"FAIL ({len(failing)} tensors)"
        print(f"{scope:6s} {len(errors):3d} tensors, "
              f"worst {worst_name} at {worst:.3e}: {verdict}")
        for name, err in sorted(failing.items()):
            print(f"  FAIL {name}: {err:.3e} >= {TOLERANCE:.0e}")
            status = 1
    sys.exit(status)
