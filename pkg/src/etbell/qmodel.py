"""Closed-form two-photon interference predictions.

After the matched time-slot cut, the surviving two-photon amplitude is an
equal superposition of the short-short and long-long path pairs with a
relative phase set by the analyzer phases on the two sides.  This module
holds the textbook closed forms for that state: the four coincidence
probabilities, the correlation function, and their CHSH combination, with a
single fringe-visibility parameter absorbing every imperfection upstream.
These functions are the analytic oracle that every Monte Carlo result in the
package is tested against.

Two phase conventions are supported.  In ``difference`` mode the fringe
phase is ``phi_a - phi_b``; in ``sum`` mode it is ``phi_a + phi_b``.  The
default is ``difference``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ContractViolation

DIFFERENCE = "difference"
SUM = "sum"
PHASE_CONVENTIONS = (DIFFERENCE, SUM)

#: Quantum-mechanical maximum of the CHSH combination, 2*sqrt(2).
TSIRELSON = 2.0 * math.sqrt(2.0)

DETECTORS = (1, 2)


def effective_phase(phi_a: float, phi_b: float, convention: str = DIFFERENCE) -> float:
    """Fringe phase of the two-photon interference term."""
    if convention == DIFFERENCE:
        return phi_a - phi_b
    if convention == SUM:
        return phi_a + phi_b
    raise ContractViolation(f"unknown phase convention {convention!r}")


def validate_visibility(visibility: float) -> float:
    v = float(visibility)
    if not 0.0 <= v <= 1.0:
        raise ContractViolation(f"visibility must lie in [0, 1], got {visibility!r}")
    return v


def coincidence_probability(
    x: int,
    y: int,
    phi_a: float,
    phi_b: float,
    visibility: float,
    convention: str = DIFFERENCE,
) -> float:
    """Probability of a joint click on Alice's detector ``x`` and Bob's ``y``.

    P_xy = 1/4 [1 + s V cos(delta)] with s = +1 when x == y and -1
    otherwise.  The four probabilities over (x, y) sum to one exactly.
    """
    if x not in DETECTORS or y not in DETECTORS:
        raise ContractViolation(f"detector indices must be 1 or 2, got ({x!r}, {y!r})")
    v = validate_visibility(visibility)
    s = 1.0 if x == y else -1.0
    return 0.25 * (1.0 + s * v * math.cos(effective_phase(phi_a, phi_b, convention)))


def correlation(
    phi_a: float, phi_b: float, visibility: float, convention: str = DIFFERENCE
) -> float:
    """Correlation E = P11 + P22 - P12 - P21 = V cos(delta)."""
    v = validate_visibility(visibility)
    return v * math.cos(effective_phase(phi_a, phi_b, convention))


@dataclass(frozen=True)
class SettingsQuad:
    """Two analyzer phases per party, the inputs of one CHSH evaluation."""

    a0: float
    a1: float
    b0: float
    b1: float

    def pairs(self) -> tuple[tuple[float, float], ...]:
        """Setting pairs in CHSH order: (a0,b0), (a0,b1), (a1,b0), (a1,b1)."""
        return (
            (self.a0, self.b0),
            (self.a0, self.b1),
            (self.a1, self.b0),
            (self.a1, self.b1),
        )


def canonical_quad(convention: str = DIFFERENCE) -> SettingsQuad:
    """Maximal-violation settings.

    The effective-phase gaps are pi/4 for the three positive terms and
    3 pi/4 for the subtracted one, so the CHSH value is exactly
    2 sqrt(2) V for either convention.
    """
    if convention == DIFFERENCE:
        return SettingsQuad(0.0, math.pi / 2, math.pi / 4, -math.pi / 4)
    if convention == SUM:
        return SettingsQuad(0.0, math.pi / 2, -math.pi / 4, math.pi / 4)
    raise ContractViolation(f"unknown phase convention {convention!r}")


def chsh_value(quad: SettingsQuad, visibility: float, convention: str = DIFFERENCE) -> float:
    """Four-term CHSH combination E1 + E2 + E3 - E4 over ``quad.pairs()``."""
    e = [correlation(pa, pb, visibility, convention) for pa, pb in quad.pairs()]
    return e[0] + e[1] + e[2] - e[3]


def chsh_three_term(
    phi_a: float,
    phi_a_prime: float,
    phi_b: float,
    visibility: float,
    convention: str = DIFFERENCE,
) -> float:
    """Single-sweep CHSH variant 3 E(phi_a, phi_b) - E(phi_a', phi_b).

    This is the estimator used when one party's phase stays fixed and a
    symmetry assumption equates the three same-gap terms.  It equals the
    four-term value only when the two effective-phase gaps are pi/4 and
    3 pi/4; it is exposed for fidelity to the fixed-phase measurement
    procedure, not as the default estimator.
    """
    return 3.0 * correlation(phi_a, phi_b, visibility, convention) - correlation(
        phi_a_prime, phi_b, visibility, convention
    )


def critical_visibility() -> float:
    """Visibility at which the canonical-quad CHSH value equals the local bound 2."""
    return 1.0 / math.sqrt(2.0)
