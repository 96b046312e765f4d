"""Correlation, CHSH and fringe-visibility estimators with uncertainties.

Everything here works from raw counts.  Correlations carry the multinomial
standard error sqrt((1 - E^2) / N); CHSH errors combine the four setting
errors in quadrature.  Fringe fits are weighted least squares of
A [1 + V cos(phi + phi0)] with Poisson weights, solved in the linear
(A, A V cos phi0, -A V sin phi0) parameterization with iterated
reweighting, so noiseless fringes are recovered exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EstimationError, FringeFitError
from .tagger import CountsMatrix


@dataclass(frozen=True)
class CorrelationEstimate:
    e_hat: float
    std_err: float
    n_total: int


def estimate_E(counts: CountsMatrix) -> CorrelationEstimate:
    """Correlation estimate (n11 + n22 - n12 - n21) / N from one counts matrix."""
    n = counts.total
    if n <= 0:
        raise EstimationError("cannot estimate a correlation from zero counts")
    e = (counts.n11 + counts.n22 - counts.n12 - counts.n21) / n
    return CorrelationEstimate(e_hat=e, std_err=math.sqrt(max(1.0 - e * e, 0.0) / n), n_total=n)


@dataclass(frozen=True)
class BellResult:
    """CHSH estimate with propagated error and distance above the local bound."""

    s_hat: float
    std_err: float
    sigmas_above_2: float
    raw: bool = True  # true when no accidental subtraction was applied
    correlations: tuple[CorrelationEstimate, ...] = ()


def estimate_S(
    e1: CorrelationEstimate,
    e2: CorrelationEstimate,
    e3: CorrelationEstimate,
    e4: CorrelationEstimate,
    raw: bool = True,
) -> BellResult:
    """Combine four disjoint-setting correlations into S = E1 + E2 + E3 - E4."""
    s = e1.e_hat + e2.e_hat + e3.e_hat - e4.e_hat
    err = math.sqrt(e1.std_err**2 + e2.std_err**2 + e3.std_err**2 + e4.std_err**2)
    if err > 0:
        sigmas = (s - 2.0) / err
    elif s > 2.0:
        sigmas = math.inf
    elif s < 2.0:
        sigmas = -math.inf
    else:
        sigmas = 0.0
    return BellResult(
        s_hat=s, std_err=err, sigmas_above_2=sigmas, raw=raw, correlations=(e1, e2, e3, e4)
    )


@dataclass(frozen=True)
class FringePoint:
    phi_a: float
    counts: CountsMatrix
    integration_time: float


@dataclass(frozen=True)
class FringeScan:
    """Phase scan of coincidence counts at fixed phi_b."""

    points: tuple[FringePoint, ...]
    phi_b: float = 0.0

    def __post_init__(self) -> None:
        phases = sorted({p.phi_a for p in self.points})
        if len(phases) < 5:
            raise EstimationError("a fringe scan needs at least 5 distinct phases")
        # A uniform grid over one period spans 2 pi (n-1)/n; treat the scan
        # as circular and require the wrap gap to close the period.
        span = phases[-1] - phases[0]
        spacing = span / (len(phases) - 1)
        if span + spacing < 2.0 * math.pi - 1e-9:
            raise EstimationError("a fringe scan must span at least one full period")


@dataclass(frozen=True)
class FringeFit:
    visibility: float
    visibility_err: float
    phase_offset: float
    phase_offset_err: float
    baseline: float
    baseline_err: float
    residual_rms: float


@dataclass(frozen=True)
class FringeScanFit:
    per_pair: dict[tuple[int, int], FringeFit]
    average_visibility: float
    average_visibility_std: float


def fit_single_fringe(
    phases: np.ndarray, counts: np.ndarray, max_iter: int = 30, rtol: float = 1e-8
) -> FringeFit:
    """Weighted least squares of N(phi) = A [1 + V cos(phi + phi0)].

    Linear in (A, B, C) = (A, A V cos phi0, -A V sin phi0); weights are
    iteratively set to 1 / max(model, 1) as the Poisson variance estimate.
    """
    phi = np.asarray(phases, dtype=float)
    n = np.asarray(counts, dtype=float)
    if phi.shape != n.shape or phi.ndim != 1 or len(phi) < 5:
        raise EstimationError("need matching 1-d phase/count arrays with >= 5 points")

    design = np.column_stack([np.ones_like(phi), np.cos(phi), np.sin(phi)])
    weights = 1.0 / np.maximum(n, 1.0)
    params = None
    cov = None
    for _ in range(max_iter):
        xtx = design.T @ (weights[:, None] * design)
        xty = design.T @ (weights * n)
        try:
            new_params = np.linalg.solve(xtx, xty)
            cov = np.linalg.inv(xtx)
        except np.linalg.LinAlgError as exc:
            raise FringeFitError(f"degenerate fringe design matrix: {exc}") from exc
        model = design @ new_params
        if params is not None and np.allclose(new_params, params, rtol=rtol, atol=1e-9):
            params = new_params
            break
        params = new_params
        weights = 1.0 / np.maximum(model, 1.0)
    else:
        resid = n - design @ params
        raise FringeFitError(
            "fringe reweighting did not settle after "
            f"{max_iter} iterations (residual rms {np.sqrt(np.mean(resid**2)):.3g})"
        )

    a, b, c = params
    if a <= 0:
        raise FringeFitError(f"non-positive fitted baseline {a:.3g}")
    amp = math.hypot(b, c)
    v = amp / a
    phi0 = math.atan2(-c, b) if amp > 0 else 0.0

    # Delta-method errors from the (A, B, C) covariance.
    var_a, var_b, var_c = cov[0, 0], cov[1, 1], cov[2, 2]
    if amp > 0:
        dv = np.array([-amp / a**2, b / (amp * a), c / (amp * a)])
        var_v = float(dv @ cov @ dv)
        dp = np.array([0.0, c / amp**2, -b / amp**2])
        var_p = float(dp @ cov @ dp)
    else:
        var_v = (var_b + var_c) / a**2
        var_p = math.pi**2  # phase undefined at zero amplitude
    resid = n - design @ params
    return FringeFit(
        visibility=v,
        visibility_err=math.sqrt(max(var_v, 0.0)),
        phase_offset=phi0,
        phase_offset_err=math.sqrt(max(var_p, 0.0)),
        baseline=float(a),
        baseline_err=math.sqrt(max(var_a, 0.0)),
        residual_rms=float(np.sqrt(np.mean(resid**2))),
    )


_PAIRS = ((1, 1), (1, 2), (2, 1), (2, 2))


def fit_fringe(scan: FringeScan) -> FringeScanFit:
    """Fit all four detector-pair fringes of a scan.

    The average visibility across detector combinations is the unweighted
    mean, reported with its standard deviation.
    """
    phases = np.array([p.phi_a for p in scan.points])
    per_pair: dict[tuple[int, int], FringeFit] = {}
    for idx, pair in enumerate(_PAIRS):
        counts = np.array([p.counts.as_tuple()[idx] for p in scan.points], dtype=float)
        per_pair[pair] = fit_single_fringe(phases, counts)
    vis = np.array([f.visibility for f in per_pair.values()])
    return FringeScanFit(
        per_pair=per_pair,
        average_visibility=float(vis.mean()),
        average_visibility_std=float(vis.std(ddof=1)),
    )


def normalized_fringe_rows(scan: FringeScan) -> list[dict[str, float]]:
    """Fringe table rows with per-phase normalization across the four pairs."""
    rows = []
    for p in scan.points:
        n = p.counts.as_tuple()
        total = sum(n)
        rows.append(
            {
                "phi_a": p.phi_a,
                "n11": n[0],
                "n12": n[1],
                "n21": n[2],
                "n22": n[3],
                "f11": n[0] / total if total else 0.0,
                "f12": n[1] / total if total else 0.0,
                "f21": n[2] / total if total else 0.0,
                "f22": n[3] / total if total else 0.0,
            }
        )
    return rows
