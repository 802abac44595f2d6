"""Micro-PMU feeder analytics.

Thin bindings over the C++ core: phasor helpers, requirement checks, the
versioned time-series store and end-to-end scenario runs.
"""

from ._core import (
    Phasor,
    Store,
    UpmuError,
    __version__,
    check_requirements,
    estimate_phasor,
    run_scenario,
    synthesize_waveform,
    tve,
    use_cases,
    validate_scenario,
    wrap_angle,
)

__all__ = [
    "Phasor",
    "Store",
    "UpmuError",
    "check_requirements",
    "estimate_phasor",
    "run_scenario",
    "synthesize_waveform",
    "tve",
    "use_cases",
    "validate_scenario",
    "wrap_angle",
]
