"""Tolerances shared by the library, the tests and the scenario checks."""

STRUCTURAL_TOL = 1e-10
"""Trace, positivity and unitarity checks on states and propagators."""

COMPARISON_RTOL = 1e-12
"""Entrywise comparisons, scaled by the operator norm."""

HERMITIAN_RTOL = 1e-12
EIGENSPACE_TOL = 1e-9
LEAKAGE_TOL = 1e-6
"""Maximum population allowed in the top two levels of a truncated oscillator."""

TRACE_DRIFT_PER_STEP = 1e-12
INTEGRATOR_TRACE_TOL = 1e-8
STABILITY_FACTOR = 0.1
"""Largest allowed dt * ||generator|| for the RK4 master-equation integrator."""

RICHARDSON_ORDER = 2
DIVERGENCE_SLOPE = -0.5
"""A sequence whose log-log slope against tau is below this is flagged divergent."""

VANISH_RTOL = 1e-3
ESTABLISH_RTOL = 1e-3
K_MAX_DEFAULT = 6

TOLERANCES = {
    "structural": STRUCTURAL_TOL,
    "comparison_rtol": COMPARISON_RTOL,
    "hermitian_rtol": HERMITIAN_RTOL,
    "eigenspace": EIGENSPACE_TOL,
    "leakage": LEAKAGE_TOL,
    "trace_drift_per_step": TRACE_DRIFT_PER_STEP,
    "integrator_trace": INTEGRATOR_TRACE_TOL,
    "stability_factor": STABILITY_FACTOR,
    "richardson_order": RICHARDSON_ORDER,
    "divergence_slope": DIVERGENCE_SLOPE,
    "vanish_rtol": VANISH_RTOL,
    "establish_rtol": ESTABLISH_RTOL,
    "k_max_default": K_MAX_DEFAULT,
}
