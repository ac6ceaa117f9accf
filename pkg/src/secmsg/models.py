"""Latency models for encrypted point-to-point communication.

Three model families live here, all in µs and bytes:

* a two-phase linear latency model ``T(m) = alpha + beta * m`` with
  separate (alpha, beta) for the eager and rendezvous protocol phases,
  fitted by ordinary least squares on ping-pong measurements;
* a single linear model for encrypt-then-decrypt cost, fitted the same
  way on encrypt-decrypt benchmark measurements;
* a multi-worker encryption model ``T(k, m) = alpha + k*m / (A + B*(k-1))``
  with separate (alpha, A, B) per message-size class, fitted by bounded
  nonlinear least squares with multiple starting points.

The encrypted single-flow model is the per-phase sum of the
communication and encryption lines; the windowed multi-pair model is
``max(T_enc(k,m)/2, T_comm(k,m)) + T_enc(k,m)/2`` where
``T_comm(k, m) = alpha + beta * k * m``.  Large-message overhead
estimators and the pipelined-transfer bound are derived from the same
parameters.

If a straight line fit lands on a negative intercept, the intercept is
pinned to the mean measured 1-byte latency and the slope is refitted
with the intercept held fixed.  Parameter sets round-trip through a JSON
document; four presets transcribing published calibration tables ship
with the module.
"""

from __future__ import annotations

import enum
import json
import statistics
from dataclasses import dataclass, replace
from typing import Iterable, Mapping

import numpy as np

from .benchmarks import LatencySample

DEFAULT_THRESHOLD = 131072


class FitError(ValueError):
    """The sample set cannot identify the requested parameters."""


class Phase(str, enum.Enum):
    EAGER = "eager"
    RENDEZVOUS = "rendezvous"


class SizeClass(str, enum.Enum):
    SMALL = "small"
    MODERATE = "moderate"
    LARGE = "large"


def phase_for(m: int, threshold: int = DEFAULT_THRESHOLD) -> Phase:
    """Messages below the threshold are eager; at or above, rendezvous."""
    return Phase.EAGER if m < threshold else Phase.RENDEZVOUS


def size_class_for(m: int) -> SizeClass:
    """Small is up to 256 B, large is 32 KiB or more, moderate between."""
    if m <= 256:
        return SizeClass.SMALL
    if m < 32768:
        return SizeClass.MODERATE
    return SizeClass.LARGE


@dataclass(frozen=True)
class HockneyParams:
    """Fixed cost plus inverse-bandwidth slope for one protocol phase."""

    alpha_us: float
    beta_us_per_byte: float

    def __post_init__(self) -> None:
        if self.alpha_us < 0 or self.beta_us_per_byte < 0:
            raise ValueError("alpha and beta must be nonnegative")

    def predict(self, m: float) -> float:
        return self.alpha_us + self.beta_us_per_byte * m


@dataclass(frozen=True)
class PhasedHockneyParams:
    eager: HockneyParams
    rendezvous: HockneyParams
    threshold_bytes: int = DEFAULT_THRESHOLD

    def __post_init__(self) -> None:
        if self.threshold_bytes <= 0:
            raise ValueError("threshold must be positive")

    def params_for(self, m: int) -> HockneyParams:
        return self.eager if phase_for(m, self.threshold_bytes) is Phase.EAGER else self.rendezvous


@dataclass(frozen=True)
class EncDecLineParams:
    """Fixed cost plus per-byte rate of one encrypt-then-decrypt pass."""

    alpha_us: float
    beta_us_per_byte: float

    def __post_init__(self) -> None:
        if self.alpha_us < 0 or self.beta_us_per_byte < 0:
            raise ValueError("alpha and beta must be nonnegative")

    def predict(self, m: float) -> float:
        return self.alpha_us + self.beta_us_per_byte * m


@dataclass(frozen=True)
class EnhancedHockneyParams:
    """Per-phase sums of communication and encryption line parameters."""

    eager: HockneyParams
    rendezvous: HockneyParams
    threshold_bytes: int = DEFAULT_THRESHOLD

    def params_for(self, m: int) -> HockneyParams:
        return self.eager if phase_for(m, self.threshold_bytes) is Phase.EAGER else self.rendezvous


@dataclass(frozen=True)
class MaxRateClassParams:
    """One size class of the multi-worker encryption model."""

    alpha_us: float
    a_bytes_per_us: float
    b_bytes_per_us: float

    def __post_init__(self) -> None:
        if self.alpha_us < 0:
            raise ValueError("alpha must be nonnegative")
        if self.a_bytes_per_us <= 0:
            raise ValueError("A must be positive")
        if self.b_bytes_per_us < 0:
            raise ValueError("B must be nonnegative")

    def predict(self, k: int, m: float) -> float:
        rate = self.a_bytes_per_us + self.b_bytes_per_us * (k - 1)
        return self.alpha_us + k * m / rate


@dataclass(frozen=True)
class MaxRateParams:
    small: MaxRateClassParams
    moderate: MaxRateClassParams
    large: MaxRateClassParams

    def class_params(self, m: int) -> MaxRateClassParams:
        return getattr(self, size_class_for(m).value)


# -- line fitting -------------------------------------------------------


def _ols_line(xs: list[float], ys: list[float]) -> tuple[float, float]:
    xbar = statistics.fmean(xs)
    ybar = statistics.fmean(ys)
    sxx = sum((x - xbar) ** 2 for x in xs)
    sxy = sum((x - xbar) * (y - ybar) for x, y in zip(xs, ys))
    beta = sxy / sxx
    return ybar - beta * xbar, beta


def _slope_with_fixed_intercept(xs: list[float], ys: list[float], alpha: float) -> float:
    sxx = sum(x * x for x in xs)
    sxy = sum(x * (y - alpha) for x, y in zip(xs, ys))
    return sxy / sxx if sxx > 0 else 0.0


def _fit_line(
    samples: list[LatencySample], label: str
) -> tuple[float, float, bool]:
    """OLS on (k*m, latency); returns (alpha, beta, one_byte_fallback_used)."""
    xs = [float(s.k_pairs * s.message_size) for s in samples]
    ys = [s.latency_us for s in samples]
    if len(set(xs)) < 2:
        raise FitError(f"fewer than 2 distinct sizes in the {label} data")
    alpha, beta = _ols_line(xs, ys)
    fallback = False
    if alpha < 0:
        one_byte = [s.latency_us for s in samples if s.message_size == 1]
        if not one_byte:
            raise FitError(
                f"negative intercept in the {label} data and no 1-byte sample to fall back on"
            )
        alpha = statistics.fmean(one_byte)
        beta = _slope_with_fixed_intercept(xs, ys, alpha)
        fallback = True
    if beta < 0:
        # decreasing data has no meaningful slope; best nonnegative line
        beta = 0.0
        if not fallback:
            alpha = statistics.fmean(ys)
    return alpha, beta, fallback


@dataclass(frozen=True)
class HockneyFitReport:
    params: PhasedHockneyParams
    fallback_phases: frozenset[Phase]


def fit_hockney_report(
    samples: Iterable[LatencySample], threshold: int = DEFAULT_THRESHOLD
) -> HockneyFitReport:
    """Least-squares fit of both protocol phases, with fit diagnostics.

    The regressor is ``k * m`` so the same routine fits single-pair
    ping-pong data (k == 1) and multi-pair aggregate data.  The phase of
    a sample is decided by its message size alone.
    """
    by_phase: dict[Phase, list[LatencySample]] = {Phase.EAGER: [], Phase.RENDEZVOUS: []}
    for s in samples:
        by_phase[phase_for(s.message_size, threshold)].append(s)
    fitted: dict[Phase, HockneyParams] = {}
    fallbacks = set()
    for phase, phase_samples in by_phase.items():
        alpha, beta, used_fallback = _fit_line(phase_samples, f"{phase.value} phase")
        fitted[phase] = HockneyParams(alpha, beta)
        if used_fallback:
            fallbacks.add(phase)
    params = PhasedHockneyParams(
        eager=fitted[Phase.EAGER],
        rendezvous=fitted[Phase.RENDEZVOUS],
        threshold_bytes=threshold,
    )
    return HockneyFitReport(params=params, fallback_phases=frozenset(fallbacks))


def fit_hockney(
    samples: Iterable[LatencySample], threshold: int = DEFAULT_THRESHOLD
) -> PhasedHockneyParams:
    return fit_hockney_report(samples, threshold).params


@dataclass(frozen=True)
class EncDecFitReport:
    params: EncDecLineParams
    fallback: bool


def fit_encdec_line_report(samples: Iterable[LatencySample]) -> EncDecFitReport:
    """Single-line least squares on encrypt-decrypt latency over size."""
    sample_list = list(samples)
    alpha, beta, fallback = _fit_line(sample_list, "encrypt-decrypt")
    return EncDecFitReport(params=EncDecLineParams(alpha, beta), fallback=fallback)


def fit_encdec_line(samples: Iterable[LatencySample]) -> EncDecLineParams:
    return fit_encdec_line_report(samples).params


# -- composition and evaluation -----------------------------------------


def compose_enhanced(
    comm: PhasedHockneyParams, enc: EncDecLineParams
) -> EnhancedHockneyParams:
    """Per-phase exact sums of the communication and encryption lines."""
    return EnhancedHockneyParams(
        eager=HockneyParams(
            comm.eager.alpha_us + enc.alpha_us,
            comm.eager.beta_us_per_byte + enc.beta_us_per_byte,
        ),
        rendezvous=HockneyParams(
            comm.rendezvous.alpha_us + enc.alpha_us,
            comm.rendezvous.beta_us_per_byte + enc.beta_us_per_byte,
        ),
        threshold_bytes=comm.threshold_bytes,
    )


def predict_single(
    params: HockneyParams | EncDecLineParams | PhasedHockneyParams | EnhancedHockneyParams,
    m: int,
) -> float:
    """Latency in µs of one m-byte transfer under a line model."""
    if m < 0:
        raise ValueError("message size must be nonnegative")
    if isinstance(params, (PhasedHockneyParams, EnhancedHockneyParams)):
        return params.params_for(m).predict(m)
    return params.predict(m)


def eval_maxrate(params: MaxRateParams, k: int, m: int) -> float:
    """Multi-worker encrypt-decrypt latency with the class chosen by m."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if m < 0:
        raise ValueError("message size must be nonnegative")
    return params.class_params(m).predict(k, m)


def multipair_comm_time(comm: PhasedHockneyParams, k: int, m: int) -> float:
    """Aggregate concurrent-pair communication time alpha + beta * k * m."""
    p = comm.params_for(m)
    return p.alpha_us + p.beta_us_per_byte * k * m


def predict_multipair(
    comm: PhasedHockneyParams, enc: MaxRateParams, k: int, m: int
) -> float:
    """Per-window latency of k concurrent encrypted pair flows.

    Encryption of one window half-overlaps with transmission, so the
    window costs max(T_enc/2, T_comm) plus the trailing T_enc/2 of
    decryption.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if m <= 0:
        raise ValueError("message size must be positive")
    t_enc = eval_maxrate(enc, k, m)
    t_comm = multipair_comm_time(comm, k, m)
    return max(t_enc / 2.0, t_comm) + t_enc / 2.0


def overhead_single_large(enc: EncDecLineParams, comm: HockneyParams) -> float:
    """Large-message single-flow overhead: the ratio of the two slopes."""
    if comm.beta_us_per_byte <= 0:
        raise ValueError("communication slope must be positive")
    return enc.beta_us_per_byte / comm.beta_us_per_byte


@dataclass(frozen=True)
class OverheadEstimate:
    ratio: float
    in_regime: bool | None = None  # None when no (k, m) regime query was made


def overhead_multipair_slow(
    comm_beta_us_per_byte: float,
    enc_cls: MaxRateClassParams,
    k: int,
    *,
    comm: PhasedHockneyParams | None = None,
    enc: MaxRateParams | None = None,
    m: int | None = None,
) -> OverheadEstimate:
    """Multi-pair overhead 1 / (2 * beta * (A + (k-1) * B)).

    Valid when communication dominates, i.e. T_comm(k, m) >= T_enc(k, m)/2.
    Passing ``comm``, ``enc`` and ``m`` evaluates that regime check and
    tags the estimate; the ratio itself is returned either way.
    """
    if comm_beta_us_per_byte <= 0:
        raise ValueError("communication slope must be positive")
    if k < 1:
        raise ValueError("k must be >= 1")
    rate = enc_cls.a_bytes_per_us + (k - 1) * enc_cls.b_bytes_per_us
    ratio = 1.0 / (2.0 * comm_beta_us_per_byte * rate)
    in_regime = None
    if comm is not None and enc is not None and m is not None:
        in_regime = multipair_comm_time(comm, k, m) >= eval_maxrate(enc, k, m) / 2.0
    return OverheadEstimate(ratio=ratio, in_regime=in_regime)


def predict_pipelined(
    comm: PhasedHockneyParams | HockneyParams, enc: EncDecLineParams, m: int
) -> float:
    """Latency bound when encryption is pipelined with transmission."""
    if m <= 0:
        raise ValueError("message size must be positive")
    t_comm = predict_single(comm, m)
    t_enc = enc.predict(m)
    return max(t_comm, t_enc)


# -- nonlinear max-rate fit ----------------------------------------------


def _maxrate_starts(ks: np.ndarray, ms: np.ndarray, ys: np.ndarray) -> list[np.ndarray]:
    ymin = float(ys.min())
    alphas = [0.0, 0.5 * ymin, ymin]
    spread = ys - min(0.9 * ymin, ymin - 1e-9)
    rates = (ks * ms) / np.maximum(spread, 1e-12)
    lo, hi = max(float(rates.min()) / 4.0, 1e-6), float(rates.max()) * 4.0
    a_grid = np.geomspace(lo, hi, 6)
    starts = []
    for alpha in alphas:
        for a in a_grid:
            for b_factor in (0.0, 0.25, 1.0, 4.0):
                starts.append(np.array([alpha, a, a * b_factor]))
    return starts


def _fit_maxrate_class(
    data: list[tuple[int, int, float]], label: str
) -> MaxRateClassParams:
    from scipy.optimize import least_squares

    ks = np.array([d[0] for d in data], dtype=float)
    ms = np.array([d[1] for d in data], dtype=float)
    ys = np.array([d[2] for d in data], dtype=float)
    if len(set(ks)) < 2 or len(set(ms)) < 2:
        raise FitError(
            f"{label} class needs at least 2 distinct worker counts and 2 distinct sizes"
        )

    def residuals(p: np.ndarray) -> np.ndarray:
        alpha, a, b = p
        return alpha + ks * ms / (a + b * (ks - 1.0)) - ys

    lower = np.array([0.0, 1e-9, 0.0])
    upper = np.array([np.inf, np.inf, np.inf])
    best = None
    for start in _maxrate_starts(ks, ms, ys):
        x0 = np.clip(start, lower, upper)
        try:
            sol = least_squares(
                residuals,
                x0,
                bounds=(lower, upper),
                method="trf",
                xtol=1e-13,
                ftol=1e-13,
                gtol=1e-13,
                max_nfev=2000,
            )
        except Exception:
            continue
        if best is None or sol.cost < best.cost:
            best = sol
    if best is None:
        raise FitError(f"{label} class fit did not converge from any starting point")
    alpha, a, b = (float(v) for v in best.x)
    return MaxRateClassParams(alpha_us=alpha, a_bytes_per_us=a, b_bytes_per_us=b)


def fit_maxrate(samples: Iterable[LatencySample]) -> MaxRateParams:
    """Fit (alpha, A, B) per size class by bounded least squares.

    Samples carry the worker count in ``k_pairs``.  Every class must be
    covered with at least two distinct worker counts and two distinct
    sizes, otherwise the deficient class is named in the error.
    """
    grouped: dict[SizeClass, list[tuple[int, int, float]]] = {c: [] for c in SizeClass}
    for s in samples:
        grouped[size_class_for(s.message_size)].append(
            (s.k_pairs, s.message_size, s.latency_us)
        )
    fitted = {}
    for cls in SizeClass:
        if not grouped[cls]:
            raise FitError(f"no samples in the {cls.value} class")
        fitted[cls] = _fit_maxrate_class(grouped[cls], cls.value)
    return MaxRateParams(
        small=fitted[SizeClass.SMALL],
        moderate=fitted[SizeClass.MODERATE],
        large=fitted[SizeClass.LARGE],
    )


def maxrate_residual(params: MaxRateClassParams, data: list[tuple[int, int, float]]) -> float:
    """Sum of squared residuals of one class model over (k, m, latency)."""
    return sum(
        (params.predict(k, m) - y) ** 2 for k, m, y in data
    )


# -- measured-versus-predicted reports ------------------------------------


@dataclass(frozen=True)
class PredictionEntry:
    message_size: int
    k_pairs: int
    predicted_us: float
    measured_us: float

    @property
    def rel_error(self) -> float:
        return abs(self.measured_us - self.predicted_us) / self.measured_us


@dataclass(frozen=True)
class PredictionReport:
    entries: list[PredictionEntry]
    missing_predictions: list[tuple[int, int]]
    missing_measurements: list[tuple[int, int]]

    @property
    def mape_by_size(self) -> dict[int, float]:
        per_size: dict[int, list[float]] = {}
        for e in self.entries:
            per_size.setdefault(e.message_size, []).append(e.rel_error)
        return {size: statistics.fmean(errs) for size, errs in sorted(per_size.items())}

    @property
    def mape(self) -> float:
        return statistics.fmean(e.rel_error for e in self.entries)


def mean_latency_by_key(samples: Iterable[LatencySample]) -> dict[tuple[int, int], float]:
    grouped: dict[tuple[int, int], list[float]] = {}
    for s in samples:
        grouped.setdefault((s.message_size, s.k_pairs), []).append(s.latency_us)
    return {key: statistics.fmean(vals) for key, vals in grouped.items()}


def validate(
    measured: Mapping[tuple[int, int], float] | Iterable[LatencySample],
    predicted: Mapping[tuple[int, int], float],
) -> PredictionReport:
    """Relative error per (size, k) key plus per-size mean absolute error.

    Keys present on only one side are listed, not fatal.
    """
    if not isinstance(measured, Mapping):
        measured = mean_latency_by_key(measured)
    entries = []
    for key in sorted(set(measured) & set(predicted)):
        size, k = key
        entries.append(
            PredictionEntry(
                message_size=size,
                k_pairs=k,
                predicted_us=predicted[key],
                measured_us=measured[key],
            )
        )
    return PredictionReport(
        entries=entries,
        missing_predictions=sorted(set(measured) - set(predicted)),
        missing_measurements=sorted(set(predicted) - set(measured)),
    )


# -- parameter documents and presets --------------------------------------


@dataclass(frozen=True)
class ParameterSet:
    """The sections of one parameter document; any section may be absent."""

    hockney: PhasedHockneyParams | None = None
    encdec: EncDecLineParams | None = None
    maxrate: MaxRateParams | None = None

    def with_encdec(self, enc: EncDecLineParams) -> "ParameterSet":
        return replace(self, encdec=enc)


def _line_to_dict(p: HockneyParams | EncDecLineParams) -> dict:
    return {"alpha_us": p.alpha_us, "beta_us_per_byte": p.beta_us_per_byte}


def _class_to_dict(p: MaxRateClassParams) -> dict:
    return {
        "alpha_us": p.alpha_us,
        "a_bytes_per_us": p.a_bytes_per_us,
        "b_bytes_per_us": p.b_bytes_per_us,
    }


def to_json_dict(ps: ParameterSet) -> dict:
    doc: dict = {}
    if ps.hockney is not None:
        doc["hockney"] = {
            "eager": _line_to_dict(ps.hockney.eager),
            "rendezvous": _line_to_dict(ps.hockney.rendezvous),
            "threshold_bytes": ps.hockney.threshold_bytes,
        }
    if ps.encdec is not None:
        doc["encdec"] = _line_to_dict(ps.encdec)
    if ps.maxrate is not None:
        doc["maxrate"] = {
            "small": _class_to_dict(ps.maxrate.small),
            "moderate": _class_to_dict(ps.maxrate.moderate),
            "large": _class_to_dict(ps.maxrate.large),
        }
    return doc


def from_json_dict(doc: Mapping) -> ParameterSet:
    hockney = None
    if "hockney" in doc:
        h = doc["hockney"]
        hockney = PhasedHockneyParams(
            eager=HockneyParams(**h["eager"]),
            rendezvous=HockneyParams(**h["rendezvous"]),
            threshold_bytes=int(h.get("threshold_bytes", DEFAULT_THRESHOLD)),
        )
    encdec = EncDecLineParams(**doc["encdec"]) if "encdec" in doc else None
    maxrate = None
    if "maxrate" in doc:
        mr = doc["maxrate"]
        maxrate = MaxRateParams(
            small=MaxRateClassParams(**mr["small"]),
            moderate=MaxRateClassParams(**mr["moderate"]),
            large=MaxRateClassParams(**mr["large"]),
        )
    return ParameterSet(hockney=hockney, encdec=encdec, maxrate=maxrate)


def save_params(path: str, ps: ParameterSet) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_json_dict(ps), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_params(path: str) -> ParameterSet:
    with open(path, "r", encoding="utf-8") as fh:
        return from_json_dict(json.load(fh))


# Calibration presets.  Ping-pong flavors carry the blocking single-pair
# communication lines; multipair flavors carry the non-blocking
# concurrent-pair lines.  All bundle the BoringSSL encrypt-decrypt line
# and the BoringSSL multi-worker surface; other encrypt-decrypt lines
# are available in ENCDEC_PRESETS.

ENCDEC_PRESETS: dict[str, EncDecLineParams] = {
    "boringssl": EncDecLineParams(0.53, 6.90e-4),
    "libsodium": EncDecLineParams(0.48, 16.3e-4),
    "cryptopp-mpich": EncDecLineParams(5.51, 34.8e-4),
    "cryptopp-mvapich": EncDecLineParams(5.16, 21.4e-4),
}

PINGPONG_HOCKNEY_PRESETS: dict[str, PhasedHockneyParams] = {
    "ethernet": PhasedHockneyParams(
        eager=HockneyParams(32.74, 23.7e-4),
        rendezvous=HockneyParams(117.30, 8.63e-4),
    ),
    "ib": PhasedHockneyParams(
        eager=HockneyParams(3.40, 3.83e-4),
        rendezvous=HockneyParams(7.17, 3.12e-4),
    ),
}

MULTIPAIR_HOCKNEY_PRESETS: dict[str, PhasedHockneyParams] = {
    "ethernet": PhasedHockneyParams(
        eager=HockneyParams(3.84, 8.11e-4),
        rendezvous=HockneyParams(16.35, 8e-4),
    ),
    "ib": PhasedHockneyParams(
        eager=HockneyParams(1.02, 2.88e-4),
        rendezvous=HockneyParams(2.38, 2.78e-4),
    ),
}

MAXRATE_PRESET: MaxRateParams = MaxRateParams(
    small=MaxRateClassParams(1.8, 888.5, 0.0),
    moderate=MaxRateClassParams(2.66, 1764.0, 4135.0),
    large=MaxRateClassParams(3.44, 1502.21, 1262.59),
)

PRESETS: dict[str, ParameterSet] = {
    "ethernet-pingpong": ParameterSet(
        hockney=PINGPONG_HOCKNEY_PRESETS["ethernet"],
        encdec=ENCDEC_PRESETS["boringssl"],
        maxrate=MAXRATE_PRESET,
    ),
    "ib-pingpong": ParameterSet(
        hockney=PINGPONG_HOCKNEY_PRESETS["ib"],
        encdec=ENCDEC_PRESETS["boringssl"],
        maxrate=MAXRATE_PRESET,
    ),
    "ethernet-multipair": ParameterSet(
        hockney=MULTIPAIR_HOCKNEY_PRESETS["ethernet"],
        encdec=ENCDEC_PRESETS["boringssl"],
        maxrate=MAXRATE_PRESET,
    ),
    "ib-multipair": ParameterSet(
        hockney=MULTIPAIR_HOCKNEY_PRESETS["ib"],
        encdec=ENCDEC_PRESETS["boringssl"],
        maxrate=MAXRATE_PRESET,
    ),
}
