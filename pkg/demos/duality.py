"""Dual certificates: Hamilton-Jacobi subsolutions bound the minimum from below.

The canonical certificate exp(-a t) phi is tight.  A searched spline
certificate gets close to zero, and the backward bound holds for both.
"""
from dgflow.cli_harness import bundled_scenario, load_scenario
from dgflow.hj_dual_certificates import (canonical_certificate, check_backward_bound,
                                         check_hj_feasible, dual_value, maximize_dual)

p = load_scenario(bundled_scenario("quadratic")).params

canon = canonical_certificate(p)
rep = check_hj_feasible(p, canon)
print(f"canonical: value={dual_value(p, canon):.1e} max violation "
      f"{max(rep.max_violation_hj, rep.max_violation_terminal):.1e} on {rep.samples_checked} samples")

xi, value, rep = maximize_dual(p)
bb = check_backward_bound(p, xi)
print(f"spline certificate: value={value:.2e} feasible={rep.feasible} "
      f"min slack below exp(-at) phi = {bb['min_slack']:.2e}")

# shifting the canonical certificate up breaks the terminal constraint
bad = check_hj_feasible(p, canonical_certificate(p, shift=0.5))
print(f"canonical + 0.5: feasible={bad.feasible} terminal violation={bad.max_violation_terminal:.2f}")
