"""Stochastic generation of the physical event record.

Pair emissions form a homogeneous Poisson process.  Each photon picks an
interferometer path (fair splitter), is routed by the configured geometry,
survives the channel with a party-dependent probability, gets detector
jitter, and lands in one of four detector channels.  Dark counts are added
per detector and a non-paralyzable dead time prunes each channel last.
Everything is generated shard by shard with per-shard derived seeds, so
runs of tens of millions of pairs stream through bounded memory and remain
bit-reproducible.

Detector outcomes are sampled from the closed-form coincidence
probabilities (quantum mode) or from a local strategy's response functions
(hidden-variable mode).  For path-mismatched events the interfering
amplitudes are distinguishable, so quantum mode draws those outcomes
uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .lhv import LhvStrategy, draw_hidden
from .qmodel import DIFFERENCE, coincidence_probability, validate_visibility
from .topology import ALICE, BOB, ArmConfig, Geometry, PathChoice

PHOTON = 0
DARK = 1

#: Channel order used throughout: (party, detector).
CHANNELS = ((ALICE, 1), (ALICE, 2), (BOB, 1), (BOB, 2))


@dataclass(frozen=True)
class SourceParams:
    pair_rate: float  # pairs per second at the source
    duration: float  # seconds
    seed: int = 0
    pump_power_mw: float = 4.0  # metadata
    signal_wavelength_nm: float = 806.0  # metadata

    def __post_init__(self) -> None:
        if not self.pair_rate > 0:
            raise ContractViolation("pair_rate must be positive")
        if self.duration < 0:
            raise ContractViolation("duration must be non-negative")


@dataclass(frozen=True)
class ChannelParams:
    """Per-arm losses in dB plus the spectral filter transmission.

    ``coupling_loss_db`` is a common per-photon loss (source coupling into
    single-mode fiber, splices) applied to both sides; it is the fitted
    knob that reconciles observed singles with the far smaller coincidence
    rate.
    """

    loss_a_db: float = 3.0
    loss_b_db: float = 17.0
    coupling_loss_db: float = 15.0
    filter_transmission: float = 0.9

    def __post_init__(self) -> None:
        if self.loss_a_db < 0 or self.loss_b_db < 0 or self.coupling_loss_db < 0:
            raise ContractViolation("losses must be non-negative")
        if not 0.0 < self.filter_transmission <= 1.0:
            raise ContractViolation("filter_transmission must be in (0, 1]")


@dataclass(frozen=True)
class DetectorParams:
    efficiency: float = 0.6
    dark_rate: float = 100.0  # counts per second per detector
    jitter_sigma: float = 350e-12  # seconds
    dead_time: float = 1e-6  # seconds

    def __post_init__(self) -> None:
        if not 0.0 <= self.efficiency <= 1.0:
            raise ContractViolation("efficiency must be in [0, 1]")
        if self.dark_rate < 0 or self.jitter_sigma < 0 or self.dead_time < 0:
            raise ContractViolation("dark_rate, jitter_sigma and dead_time must be >= 0")


@dataclass(frozen=True)
class DetectionRecord:
    party: str
    detector: int
    timestamp_ps: int
    origin: int  # PHOTON or DARK


def survival_probability(ch: ChannelParams, det: DetectorParams, party: str) -> float:
    """Per-photon survival: link loss x coupling loss x filter x efficiency."""
    loss_db = ch.loss_a_db if party == ALICE else ch.loss_b_db
    return (
        10.0 ** (-(loss_db + ch.coupling_loss_db) / 10.0)
        * ch.filter_transmission
        * det.efficiency
    )


def generate_pairs(src: SourceParams, rng: np.random.Generator | None = None) -> np.ndarray:
    """Emission times (int64 ps, sorted) of a homogeneous Poisson process."""
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([int(src.seed), 0x9A12]))
    n = rng.poisson(src.pair_rate * src.duration)
    t = np.sort(rng.uniform(0.0, src.duration, n))
    return (t * 1e12).astype(np.int64)


def _quantum_cells(
    phi_a: float, phi_b: float, v_eff: float, convention: str
) -> np.ndarray:
    return np.array(
        [
            coincidence_probability(x, y, phi_a, phi_b, v_eff, convention)
            for x, y in ((1, 1), (1, 2), (2, 1), (2, 2))
        ]
    )


def sample_quantum_events(
    n: int,
    phi_a: float,
    phi_b: float,
    v_eff: float,
    rng: np.random.Generator,
    convention: str = DIFFERENCE,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized path and outcome sampling for ``n`` pairs.

    Returns (path1, path2, x, y): per-photon paths (0 short / 1 long, each
    fair and independent) and intended detector indices for whichever
    photon reaches Alice (x) and Bob (y).  Outcomes of matched events
    follow the four-cell coincidence distribution at ``v_eff``; mismatched
    events are time-distinguishable, so their outcomes are uniform.
    """
    validate_visibility(v_eff)
    path1 = rng.integers(0, 2, n, dtype=np.uint8)
    path2 = rng.integers(0, 2, n, dtype=np.uint8)
    cum = np.cumsum(_quantum_cells(phi_a, phi_b, v_eff, convention))
    cells = np.searchsorted(cum, rng.random(n), side="right").astype(np.uint8)
    np.minimum(cells, 3, out=cells)  # guard the u == 1.0 edge
    cells_uniform = rng.integers(0, 4, n, dtype=np.uint8)
    mismatched = path1 != path2
    cells[mismatched] = cells_uniform[mismatched]
    x = (cells >> 1) + np.uint8(1)
    y = (cells & 1) + np.uint8(1)
    return path1, path2, x, y


def sample_quantum_event(
    phi_a: float,
    phi_b: float,
    v_eff: float,
    rng: np.random.Generator,
    convention: str = DIFFERENCE,
) -> tuple[PathChoice, tuple[int, int]]:
    """Scalar convenience wrapper around :func:`sample_quantum_events`."""
    p1, p2, x, y = sample_quantum_events(1, phi_a, phi_b, v_eff, rng, convention)
    return PathChoice(int(p1[0]), int(p2[0])), (int(x[0]), int(y[0]))


@dataclass
class ArrivalBatch:
    """Photon arrivals at the detector plane, one row per photon."""

    party: np.ndarray  # uint8, 0 = alice, 1 = bob
    detector: np.ndarray  # uint8, 1 or 2
    t_ps: np.ndarray  # int64, sorted
    emission: np.ndarray  # int64 index into the emission record, -1 if unknown

    def __len__(self) -> int:
        return len(self.t_ps)


@dataclass
class ChannelStream:
    party: str
    detector: int
    t_ps: np.ndarray  # int64, sorted, dead-time pruned
    origin: np.ndarray  # uint8, PHOTON or DARK
    emission: np.ndarray  # int64, -1 for dark counts

    def __len__(self) -> int:
        return len(self.t_ps)

    def rate(self, duration: float) -> float:
        return len(self.t_ps) / duration if duration > 0 else 0.0

    def records(self) -> list[DetectionRecord]:
        return [
            DetectionRecord(self.party, self.detector, int(t), int(o))
            for t, o in zip(self.t_ps, self.origin)
        ]


@dataclass
class GroundTruth:
    """Emission-to-detection lineage, kept for test assertions only."""

    emission_ps: np.ndarray
    path1: np.ndarray
    path2: np.ndarray
    x: np.ndarray
    y: np.ndarray


@dataclass
class SimulationResult:
    channels: list[ChannelStream]
    truth: GroundTruth | None
    duration: float
    v_eff: float | None = None

    def channel(self, party: str, detector: int) -> ChannelStream:
        for c in self.channels:
            if c.party == party and c.detector == detector:
                return c
        raise KeyError((party, detector))

    def singles_rate(self, party: str) -> float:
        n = sum(len(c) for c in self.channels if c.party == party)
        return n / self.duration if self.duration > 0 else 0.0


def apply_dead_time(t_ps: np.ndarray, dead_time: float) -> np.ndarray:
    """Dead-time filter over one sorted channel; greedy earliest-kept-wins."""
    t = np.asarray(t_ps, dtype=np.int64)
    if dead_time <= 0 or len(t) == 0:
        return t
    kept = _dead_time_mask(t, int(round(dead_time * 1e12)))
    return t[kept]


def _dead_time_mask(t_ps: np.ndarray, dead_ps: int) -> np.ndarray:
    kept = np.zeros(len(t_ps), dtype=bool)
    last = None
    for i, ts in enumerate(t_ps.tolist()):
        if last is None or ts - last >= dead_ps:
            kept[i] = True
            last = ts
    return kept


def _survive_and_jitter(
    arrivals: ArrivalBatch,
    duration_ps: int,
    ch: ChannelParams,
    det: DetectorParams,
    rng: np.random.Generator,
) -> ArrivalBatch:
    """Loss thinning plus timestamp jitter, coupled in the uniform stream.

    One uniform per photon is compared against the party's survival
    probability, so with a fixed seed raising any loss term can only remove
    events.  Jitter values are drawn for every arrival for the same reason.
    Events jittered or delayed out of the acquisition window are dropped.
    """
    n = len(arrivals)
    u = rng.random(n)
    p_a = survival_probability(ch, det, ALICE)
    p_b = survival_probability(ch, det, BOB)
    p = np.where(arrivals.party == 0, p_a, p_b)
    keep = u < p
    t = arrivals.t_ps[keep]
    if det.jitter_sigma > 0:
        jitter = rng.normal(0.0, det.jitter_sigma * 1e12, len(t))
        t = t + np.rint(jitter).astype(np.int64)
    party = arrivals.party[keep]
    detector = arrivals.detector[keep]
    emission = arrivals.emission[keep]
    inside = (t >= 0) & (t <= duration_ps)
    return ArrivalBatch(party[inside], detector[inside], t[inside], emission[inside])


def _finalize_channel(
    party_name: str,
    dnum: int,
    t_ch: np.ndarray,
    em_ch: np.ndarray,
    duration: float,
    det: DetectorParams,
    dark_rng: np.random.Generator,
) -> ChannelStream:
    """Merge photon hits with dark counts, sort, and prune dead time."""
    n_dark = dark_rng.poisson(det.dark_rate * duration)
    t_dark_ps = (np.sort(dark_rng.uniform(0.0, duration, n_dark)) * 1e12).astype(np.int64)
    t_all = np.concatenate([t_ch, t_dark_ps])
    origin = np.concatenate(
        [np.zeros(len(t_ch), dtype=np.uint8), np.full(n_dark, DARK, dtype=np.uint8)]
    )
    em_all = np.concatenate([em_ch, np.full(n_dark, -1, dtype=np.int64)])
    order = np.argsort(t_all, kind="stable")
    t_all, origin, em_all = t_all[order], origin[order], em_all[order]
    dead_ps = int(round(det.dead_time * 1e12))
    if dead_ps > 0 and len(t_all):
        kept = _dead_time_mask(t_all, dead_ps)
        t_all, origin, em_all = t_all[kept], origin[kept], em_all[kept]
    return ChannelStream(party_name, dnum, t_all, origin, em_all)


def detect(
    arrivals: ArrivalBatch,
    duration: float,
    ch: ChannelParams,
    det: DetectorParams,
    rng: np.random.Generator,
) -> list[ChannelStream]:
    """Channel and detector response over one batch of photon arrivals.

    Each arrival survives with probability
    10^(-loss/10) * filter_transmission * efficiency for its party, the
    survivors get Gaussian timestamp jitter, dark counts join each detector
    as independent Poisson streams, and dead-time pruning runs last per
    channel.
    """
    if len(arrivals) > 1 and np.any(np.diff(arrivals.t_ps) < 0):
        raise ContractViolation("arrivals must be time-sorted")
    surv = _survive_and_jitter(arrivals, int(round(duration * 1e12)), ch, det, rng)
    streams = []
    for party_name, d in CHANNELS:
        pcode = 0 if party_name == ALICE else 1
        sel = (surv.party == pcode) & (surv.detector == d)
        streams.append(
            _finalize_channel(
                party_name, d, surv.t_ps[sel], surv.emission[sel], duration, det, rng
            )
        )
    return streams


def _route_batch(
    geometry: Geometry, path1: np.ndarray, path2: np.ndarray, delta_t_ps: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized routing: per-photon party code (0 alice, 1 bob) and delay."""
    d1 = path1.astype(np.int64) * delta_t_ps
    d2 = path2.astype(np.int64) * delta_t_ps
    if geometry is Geometry.FRANSON:
        party1 = np.zeros(len(path1), dtype=np.uint8)
        party2 = np.ones(len(path2), dtype=np.uint8)
    elif geometry is Geometry.HUG:
        party1 = path1.astype(np.uint8)  # short stays at Alice, long crosses to Bob
        party2 = (1 - path2).astype(np.uint8)  # short stays at Bob, long crosses to Alice
    else:
        raise ContractViolation(f"unknown geometry {geometry!r}")
    return party1, d1, party2, d2


def simulate_experiment(
    geometry: Geometry,
    mode: str | LhvStrategy,
    phi_a: float,
    phi_b: float,
    src: SourceParams,
    ch: ChannelParams,
    det: DetectorParams,
    arms: ArmConfig,
    v_eff: float = 1.0,
    convention: str = DIFFERENCE,
    truth_log: bool = True,
    shard_pairs: int = 1 << 20,
) -> SimulationResult:
    """End-to-end event generation for one setting pair.

    Composition: Poisson emissions -> path/outcome sampling (quantum closed
    forms, or a local strategy when ``mode`` is an :class:`LhvStrategy`) ->
    geometric routing with arm delay -> channel loss, jitter, dark counts,
    dead time -> per-channel timestamp streams.  ``v_eff`` must already
    include the indistinguishability and dephasing factors.  The ground
    truth log maps every photon detection back to its emission.
    """
    if isinstance(mode, str) and mode != "quantum":
        raise ConfigurationError(f"mode must be 'quantum' or an LhvStrategy, got {mode!r}")
    strategy = mode if isinstance(mode, LhvStrategy) else None
    if strategy is not None and geometry is Geometry.HUG and strategy.paths_use_settings:
        raise ConfigurationError(
            f"strategy {strategy.name!r} needs setting-dependent paths; "
            "the cross-linked geometry forbids them"
        )

    delta_t_ps = int(round(arms.delta_t * 1e12))
    emissions = generate_pairs(src)
    n_total = len(emissions)

    per_channel: dict[tuple[str, int], list[np.ndarray]] = {key: [] for key in CHANNELS}
    per_channel_em: dict[tuple[str, int], list[np.ndarray]] = {key: [] for key in CHANNELS}
    truth_paths1: list[np.ndarray] = []
    truth_paths2: list[np.ndarray] = []
    truth_x: list[np.ndarray] = []
    truth_y: list[np.ndarray] = []

    p_a = survival_probability(ch, det, ALICE)
    p_b = survival_probability(ch, det, BOB)
    jitter_ps = det.jitter_sigma * 1e12
    duration_ps = int(round(src.duration * 1e12))

    for shard_idx, start in enumerate(range(0, max(n_total, 1), shard_pairs)):
        stop = min(start + shard_pairs, n_total)
        if stop <= start:
            break
        t_emit = emissions[start:stop]
        n = stop - start
        rng = np.random.default_rng(np.random.SeedSequence([int(src.seed), 1, shard_idx]))

        if strategy is None:
            path1, path2, x, y = sample_quantum_events(
                n, phi_a, phi_b, v_eff, rng, convention
            )
        else:
            hv = draw_hidden(n, rng)
            out_a = strategy.outcome_a(hv, phi_a)
            out_b = strategy.outcome_b(hv, phi_b)
            if strategy.paths_use_settings:
                path1 = strategy.path_1(hv, phi_a).astype(np.uint8)
                path2 = strategy.path_2(hv, phi_b).astype(np.uint8)
            else:
                path1 = strategy.path_1(hv).astype(np.uint8)
                path2 = strategy.path_2(hv).astype(np.uint8)
            x = np.where(out_a > 0, 1, 2).astype(np.uint8)
            y = np.where(out_b > 0, 1, 2).astype(np.uint8)

        party1, d1, party2, d2 = _route_batch(geometry, path1, path2, delta_t_ps)

        # Survival thinning first: one uniform per photon against the
        # party's probability (coupled sampling: raising any loss can only
        # shrink the kept set), then all remaining work runs on survivors.
        det_rng = np.random.default_rng(np.random.SeedSequence([int(src.seed), 2, shard_idx]))
        u = det_rng.random(2 * n)
        keep1 = np.flatnonzero(u[:n] < np.where(party1 == 0, p_a, p_b))
        keep2 = np.flatnonzero(u[n:] < np.where(party2 == 0, p_a, p_b))

        # Intended detector per photon: the photon that reaches Alice
        # carries x, the one that reaches Bob carries y; same-party double
        # events carry no cross-party information and draw uniformly.
        cross = party1 != party2
        u_det = det_rng.integers(1, 3, 2 * n, dtype=np.uint8)

        surv_t = []
        surv_party = []
        surv_det = []
        surv_em = []
        for keep, party_arr, delay, photon_offset in (
            (keep1, party1, d1, 0),
            (keep2, party2, d2, n),
        ):
            p_k = party_arr[keep]
            d_k = np.where(
                cross[keep],
                np.where(p_k == 0, x[keep], y[keep]),
                u_det[photon_offset + keep],
            )
            surv_t.append(t_emit[keep] + delay[keep])
            surv_party.append(p_k)
            surv_det.append(d_k.astype(np.uint8))
            surv_em.append(start + keep)

        t_s = np.concatenate(surv_t)
        party_s = np.concatenate(surv_party)
        det_s = np.concatenate(surv_det)
        em_s = np.concatenate(surv_em)
        if jitter_ps > 0:
            t_s = t_s + np.rint(det_rng.normal(0.0, jitter_ps, len(t_s))).astype(np.int64)
        inside = (t_s >= 0) & (t_s <= duration_ps)  # acquisition window
        t_s, party_s, det_s, em_s = t_s[inside], party_s[inside], det_s[inside], em_s[inside]

        for party_name, dnum in CHANNELS:
            pcode = 0 if party_name == ALICE else 1
            sel = (party_s == pcode) & (det_s == dnum)
            per_channel[(party_name, dnum)].append(t_s[sel])
            per_channel_em[(party_name, dnum)].append(em_s[sel])

        if truth_log:
            truth_paths1.append(path1)
            truth_paths2.append(path2)
            truth_x.append(x)
            truth_y.append(y)

    channels: list[ChannelStream] = []
    dark_rng = np.random.default_rng(np.random.SeedSequence([int(src.seed), 3]))
    for party_name, dnum in CHANNELS:
        chunks = per_channel[(party_name, dnum)]
        t_ch = np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)
        em_chunks = per_channel_em[(party_name, dnum)]
        em_ch = np.concatenate(em_chunks) if em_chunks else np.empty(0, dtype=np.int64)
        channels.append(
            _finalize_channel(party_name, dnum, t_ch, em_ch, src.duration, det, dark_rng)
        )

    truth = None
    if truth_log:
        truth = GroundTruth(
            emission_ps=emissions,
            path1=np.concatenate(truth_paths1) if truth_paths1 else np.empty(0, dtype=np.uint8),
            path2=np.concatenate(truth_paths2) if truth_paths2 else np.empty(0, dtype=np.uint8),
            x=np.concatenate(truth_x) if truth_x else np.empty(0, dtype=np.uint8),
            y=np.concatenate(truth_y) if truth_y else np.empty(0, dtype=np.uint8),
        )
    return SimulationResult(
        channels=channels,
        truth=truth,
        duration=src.duration,
        v_eff=None if strategy is not None else v_eff,
    )
