"""Phase-noise spectra, coherent modulations, and Gaussian trajectory synthesis.

Conventions used throughout the package:

* Power spectral densities are *two-sided* functions of angular frequency,
  S(omega) in rad^2 s with S(-omega) = S(omega).  The autocovariance is
  C(tau) = (1/2pi) Integral S(omega) exp(i omega tau) domega, so the sample
  variance of a band-limited process is (1/2pi) Integral_band S domega.
  A one-sided density in ordinary frequency (units rad^2/Hz) is 4pi times
  larger at the same physical frequency: S_one(f) df = 2 S(omega) domega/(2pi).
* Frequency-noise and phase-noise densities are related by
  S_freq(omega) = omega^2 S_phase(omega).
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, SingularEvaluationError, SynthesisError

__all__ = [
    "SpectralPeak",
    "PsdModel",
    "NoiseTrajectory",
    "ModulationSpec",
    "CorrelationTable",
    "evaluate_psd",
    "convert_psd",
    "synthesize_trajectory",
    "sample_modulation",
    "estimate_psd",
    "autocorrelation",
]


@dataclass(frozen=True)
class SpectralPeak:
    """Lorentzian line added on top of the background.

    ``height`` is the density at the peak center; ``fwhm`` the full width at
    half maximum.  The peak is mirrored at -center so the model stays even.
    """

    center: float  # rad/s
    height: float  # rad^2 s
    fwhm: float    # rad/s

    def __post_init__(self):
        if self.center <= 0 or self.fwhm <= 0 or self.height < 0:
            raise InputError(
                f"peak requires center > 0, fwhm > 0, height >= 0; got "
                f"center={self.center}, height={self.height}, fwhm={self.fwhm}")


@dataclass(frozen=True)
class PsdModel:
    """Two-sided phase-noise power spectral density.

    Either parametric -- power-law background plus white floor plus Lorentzian
    peaks:

        S(w) = background_amplitude * |w / reference_frequency|**background_exponent
               + white_floor + sum_k peak_k(w)

    -- or tabulated on a strictly increasing grid of positive angular
    frequencies (``table_omega``, ``table_values``), interpolated log-log and
    extrapolated as a constant (with a warning) outside the grid.

    A nonzero ``background_cutoff`` plateaus the power-law term below that
    angular frequency, keeping steep negative exponents integrable (finite
    phase variance) without touching the band of interest.
    """

    background_amplitude: float = 0.0  # rad^2 s at the reference frequency
    background_exponent: float = 0.0
    reference_frequency: float = 1.0   # rad/s
    white_floor: float = 0.0           # rad^2 s
    peaks: tuple[SpectralPeak, ...] = ()
    background_cutoff: float = 0.0     # rad/s; background plateaus below this
    table_omega: np.ndarray | None = field(default=None, repr=False)
    table_values: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.background_amplitude < 0 or self.white_floor < 0:
            raise InputError("PSD amplitudes must be non-negative")
        if self.reference_frequency <= 0:
            raise InputError("reference_frequency must be positive")
        if self.background_cutoff < 0:
            raise InputError("background_cutoff must be non-negative")
        if (self.table_omega is None) != (self.table_values is None):
            raise InputError("tabulated model needs both grid and values")
        if self.table_omega is not None:
            w = np.asarray(self.table_omega, float)
            s = np.asarray(self.table_values, float)
            if w.ndim != 1 or w.size < 2 or w.shape != s.shape:
                raise InputError("tabulated PSD needs matching 1-d arrays, >= 2 points")
            if not np.all(np.diff(w) > 0) or w[0] <= 0:
                raise InputError("tabulated grid must be strictly increasing and positive")
            if not np.all(np.isfinite(s)) or np.any(s < 0):
                raise InputError("tabulated PSD values must be finite and >= 0")
            object.__setattr__(self, "table_omega", w)
            object.__setattr__(self, "table_values", s)

    # -- constructors -------------------------------------------------------

    @classmethod
    def white(cls, level: float) -> "PsdModel":
        return cls(white_floor=level)

    @classmethod
    def power_law(cls, amplitude: float, exponent: float,
                  reference_frequency: float, white_floor: float = 0.0,
                  peaks: tuple[SpectralPeak, ...] = (),
                  background_cutoff: float = 0.0) -> "PsdModel":
        return cls(background_amplitude=amplitude, background_exponent=exponent,
                   reference_frequency=reference_frequency,
                   white_floor=white_floor, peaks=peaks,
                   background_cutoff=background_cutoff)

    @classmethod
    def from_table(cls, omega, values) -> "PsdModel":
        return cls(table_omega=np.asarray(omega, float),
                   table_values=np.asarray(values, float))

    @classmethod
    def from_csv(cls, path) -> "PsdModel":
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if rows.shape[1] != 2:
            raise InputError(f"PSD csv must have two columns, got {rows.shape[1]}")
        return cls.from_table(rows[:, 0], rows[:, 1])

    # -- evaluation ---------------------------------------------------------

    @property
    def is_tabulated(self) -> bool:
        return self.table_omega is not None

    @property
    def is_zero(self) -> bool:
        if self.is_tabulated:
            return bool(np.all(self.table_values == 0.0))
        return (self.background_amplitude == 0.0 and self.white_floor == 0.0
                and not self.peaks)

    def __call__(self, omega):
        return evaluate_psd(self, omega)

    def to_csv(self, path):
        if not self.is_tabulated:
            raise InputError("only tabulated models export to csv")
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["omega_rad_s", "psd_rad2_s"])
            for w, s in zip(self.table_omega, self.table_values):
                wr.writerow([repr(float(w)), repr(float(s))])


def evaluate_psd(model: PsdModel, omega):
    """Evaluate the two-sided PSD at angular frequency ``omega`` (rad/s).

    Even in omega by construction.  Raises SingularEvaluationError when a
    negative-exponent background is evaluated at omega = 0 instead of
    silently returning infinity.
    """
    w = np.abs(np.asarray(omega, dtype=float))
    scalar = w.ndim == 0
    w = np.atleast_1d(w)
    if not np.all(np.isfinite(w)):
        raise InputError("omega must be finite")

    if model.is_tabulated:
        s = _interp_loglog(w, model.table_omega, model.table_values)
    else:
        s = np.full_like(w, model.white_floor)
        if model.background_amplitude != 0.0:
            wb = w if model.background_cutoff == 0.0 else np.maximum(
                w, model.background_cutoff)
            if model.background_exponent < 0 and np.any(wb == 0.0):
                raise SingularEvaluationError(
                    "power-law background with negative exponent diverges at omega = 0")
            with np.errstate(divide="ignore", over="ignore"):
                ratio = wb / model.reference_frequency
                s = s + model.background_amplitude * ratio ** model.background_exponent
        for pk in model.peaks:
            hw = 0.5 * pk.fwhm
            s = s + pk.height * hw * hw * (1.0 / ((w - pk.center) ** 2 + hw * hw)
                                           + 1.0 / ((w + pk.center) ** 2 + hw * hw))
    return float(s[0]) if scalar else s


def _interp_loglog(w, grid, values):
    """Log-log linear interpolation, constant extrapolation with a warning."""
    if np.any(w < grid[0]) or np.any(w > grid[-1]):
        warnings.warn("tabulated PSD evaluated outside its grid; "
                      "using constant extrapolation", stacklevel=3)
    wc = np.clip(w, grid[0], grid[-1])
    # zeros in the table fall back to linear interpolation on those segments
    if np.any(values <= 0.0):
        return np.interp(wc, grid, values)
    return np.exp(np.interp(np.log(wc), np.log(grid), np.log(values)))


def convert_psd(value, omega, direction: str):
    """Convert between phase-noise and frequency-noise densities at ``omega``.

    ``direction`` is ``"phase_to_frequency"`` (multiplies by omega^2, rad^2 s
    -> 1/s) or ``"frequency_to_phase"`` (divides).  Exact involution pair for
    omega != 0.
    """
    w = np.asarray(omega, dtype=float)
    v = np.asarray(value, dtype=float)
    if direction == "phase_to_frequency":
        out = v * w * w
    elif direction == "frequency_to_phase":
        if np.any(w == 0.0):
            raise SingularEvaluationError(
                "frequency -> phase conversion is undefined at omega = 0")
        out = v / (w * w)
    else:
        raise InputError(f"unknown direction {direction!r}")
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class NoiseTrajectory:
    """One sampled realization phi(t) on a uniform time grid."""

    dt: float                 # s
    samples: np.ndarray       # rad
    seed: int | None = None

    def __post_init__(self):
        x = np.asarray(self.samples, float)
        if self.dt <= 0:
            raise InputError("dt must be positive")
        if x.ndim != 1 or x.size < 2:
            raise InputError("a trajectory needs at least two samples")
        object.__setattr__(self, "samples", x)

    @property
    def duration(self) -> float:
        return self.dt * self.samples.size

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.samples.size) * self.dt

    def mean_is_zero(self, n_sigma: float = 5.0) -> bool:
        """|sample mean| < n_sigma * std/sqrt(N); trivially true for phi == 0."""
        x = self.samples
        sd = x.std()
        if sd == 0.0:
            return bool(abs(x.mean()) == 0.0)
        return bool(abs(x.mean()) < n_sigma * sd / np.sqrt(x.size))


@dataclass(frozen=True)
class ModulationSpec:
    """Coherent phase modulation: a sum of tones beta_k cos(omega_k t + delta_k).

    An empty tone list represents no modulation.
    """

    tones: tuple[tuple[float, float, float], ...] = ()  # (omega rad/s, beta rad, delta rad)

    def __post_init__(self):
        for w, b, _ in self.tones:
            if w <= 0:
                raise InputError("modulation frequencies must be positive")
            if b < 0:
                raise InputError("modulation indices must be non-negative")

    @property
    def is_empty(self) -> bool:
        return not self.tones or all(b == 0.0 for _, b, _ in self.tones)

    def max_index(self) -> float:
        return max((b for _, b, _ in self.tones), default=0.0)


def sample_modulation(spec: ModulationSpec, t):
    """Evaluate the coherent modulation sum_k beta_k cos(omega_k t + delta_k)."""
    tt = np.asarray(t, dtype=float)
    out = np.zeros_like(tt)
    for w, b, d in spec.tones:
        out = out + b * np.cos(w * tt + d)
    return float(out) if out.ndim == 0 else out


def _band_check(model: PsdModel, duration: float, dt: float):
    """PSD must be finite over the representable band [pi/duration, pi/dt]."""
    for name, edge in (("low", np.pi / duration), ("high", np.pi / dt)):
        try:
            val = evaluate_psd(model, edge)
        except SingularEvaluationError as exc:
            raise SynthesisError(
                f"PSD not evaluable at the {name} band edge {edge:g} rad/s") from exc
        if not np.isfinite(val):
            raise SynthesisError(
                f"PSD is not integrable at the {name} band edge {edge:g} rad/s "
                f"(value {val})")


def synthesize_trajectory(model: PsdModel, duration: float, dt: float,
                          seed: int) -> NoiseTrajectory:
    """Draw a zero-mean Gaussian trajectory with the prescribed two-sided PSD.

    Frequency-domain coloring: a real white Gaussian sequence is Fourier
    transformed, each bin is scaled by sqrt(S(omega_k)/dt), and the result is
    transformed back.  The ensemble periodogram (dt/N)|FFT|^2 then equals the
    model PSD in expectation on every representable bin.  The DC bin is forced
    to zero, so synthesized trajectories have exactly zero sample mean.
    Deterministic given (model, duration, dt, seed).
    """
    if dt <= 0:
        raise InputError("dt must be positive")
    if duration < 2 * dt:
        raise SynthesisError("duration must cover at least two samples")
    n = int(np.ceil(duration / dt - 1e-9))  # cover the full requested span
    _band_check(model, n * dt, dt)

    omega = 2.0 * np.pi * np.fft.rfftfreq(n, d=dt)
    s = np.empty_like(omega)
    s[0] = 0.0  # DC is zeroed below; never evaluate the model there
    s[1:] = evaluate_psd(model, omega[1:])
    if np.any(~np.isfinite(s)) or np.any(s < 0):
        k = int(np.argmax(~np.isfinite(s) | (s < 0)))
        raise SynthesisError(
            f"PSD evaluates to {s[k]} at {omega[k]:g} rad/s inside the band")

    rng = np.random.default_rng(seed)
    spectrum = np.fft.rfft(rng.standard_normal(n))
    spectrum *= np.sqrt(s / dt)
    spectrum[0] = 0.0
    samples = np.fft.irfft(spectrum, n=n)
    return NoiseTrajectory(dt=dt, samples=samples, seed=seed)


def estimate_psd(trajectories) -> PsdModel:
    """Averaged periodogram of an ensemble, normalized as a two-sided PSD.

    Each trajectory's mean is removed first.  The estimate satisfies Parseval
    consistency exactly: summing estimate * domega / 2pi over the full
    (two-sided) grid reproduces the mean biased sample variance.
    Returns a tabulated model on the positive-frequency bins.
    """
    trajectories = list(trajectories)
    if not trajectories:
        raise InputError("need at least one trajectory")
    dt = trajectories[0].dt
    n = trajectories[0].samples.size
    for tr in trajectories:
        if tr.samples.size != n or tr.dt != dt:
            raise InputError("trajectories must share dt and length")

    acc = np.zeros(n // 2 + 1)
    for tr in trajectories:
        x = tr.samples - tr.samples.mean()
        acc += np.abs(np.fft.rfft(x)) ** 2
    per = acc * (dt / n) / len(trajectories)
    omega = 2.0 * np.pi * np.fft.rfftfreq(n, d=dt)
    # drop the (identically zero) DC bin so the table stays log-log friendly
    return PsdModel.from_table(omega[1:], per[1:])


def psd_parseval_sum(estimate: PsdModel, n_samples: int, dt: float) -> float:
    """Sum estimate * domega / 2pi over the full two-sided FFT grid."""
    s = estimate.table_values
    domega = 2.0 * np.pi / (n_samples * dt)
    if n_samples % 2 == 0:
        # positive bins 1..n/2-1 appear twice; Nyquist once
        total = 2.0 * s[:-1].sum() + s[-1]
    else:
        total = 2.0 * s.sum()
    return total * domega / (2.0 * np.pi)


@dataclass(frozen=True)
class CorrelationTable:
    """Autocovariance samples C(tau_i) at non-negative lags."""

    lags: np.ndarray    # s
    values: np.ndarray  # rad^2

    def __post_init__(self):
        lags = np.asarray(self.lags, float)
        vals = np.asarray(self.values, float)
        if lags.shape != vals.shape or lags.ndim != 1:
            raise InputError("lags and values must be matching 1-d arrays")
        if vals.size and np.any(np.abs(vals) > abs(vals[0]) + 1e-12 * max(abs(vals[0]), 1.0)):
            raise InputError("C(0) must dominate |C(tau)| for a stationary autocovariance")
        object.__setattr__(self, "lags", lags)
        object.__setattr__(self, "values", vals)


def autocorrelation(trajectory: NoiseTrajectory, max_lag: float) -> CorrelationTable:
    """Biased sample autocovariance up to ``max_lag``; C(0) is the sample variance."""
    if max_lag >= trajectory.duration / 2:
        raise InputError("max_lag must be below half the trajectory duration")
    x = trajectory.samples - trajectory.samples.mean()
    n = x.size
    k_max = int(max_lag / trajectory.dt)
    # FFT-based correlation, zero-padded to avoid circular wrap
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    spec = np.fft.rfft(x, nfft)
    corr = np.fft.irfft(spec * np.conj(spec), nfft)[: k_max + 1] / n
    lags = np.arange(k_max + 1) * trajectory.dt
    return CorrelationTable(lags=lags, values=corr)
