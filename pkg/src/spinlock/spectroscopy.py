"""Full spin-locking protocol: scans, decay fits, and spectrum assembly.

A scan steps the locking Rabi frequency over the band of interest; each scan
point prepares |+x> with an ideal pi/2 pulse, locks for a time t, applies an
ideal analysis rotation, and samples the projection binomially with the
configured shot count.  Fitted decay rates invert to spectral densities via
rate = Omega^2 S_phi(Omega) / 2 under the package's two-sided convention.
"""

from __future__ import annotations

import csv
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import curve_fit

from .dynamics import DriveConfig, derive_seed, ensemble_average
from .errors import InputError
from .motion import (CoherentStateSpec, MotionalMode, average_sideband_rabi,
                     rabi_spread)
from .noise import ModulationSpec, PsdModel, evaluate_psd

__all__ = [
    "ProtocolConfig",
    "ScanDataset",
    "DecayFit",
    "SpectrumEstimate",
    "DetectionFloor",
    "WeakNoiseReport",
    "simulate_protocol",
    "fit_exponential",
    "fit_damped_cosine",
    "fit_scan",
    "frequency_modulation_depth",
    "reconstruct_spectrum",
    "weak_noise_check",
    "auto_time_grid",
]

COUPLING_SPREAD_LIMIT = 1e-3
RMS_PHASE_LIMIT = 0.3
DECAY_EXPONENT_LIMIT = 5.0


@dataclass(frozen=True)
class ProtocolConfig:
    """One spectroscopy campaign: transition, probe frequencies, statistics."""

    rabi_frequencies: np.ndarray               # rad/s, drive amplitudes Omega_00
    lock_times: tuple[np.ndarray, ...]         # per-Omega time grids, s
    shots: int
    n_trajectories: int
    noise_model: PsdModel
    master_seed: int
    transition: str = "carrier"                # "carrier" | "blue_sideband"
    modulation: ModulationSpec = ModulationSpec()
    motional_noise_model: PsdModel | None = None
    mode: MotionalMode | None = None
    coherent_state: CoherentStateSpec | None = None
    dt_factor: float = 0.01                    # integration step * Omega

    def __post_init__(self):
        om = np.asarray(self.rabi_frequencies, float)
        if om.ndim != 1 or om.size == 0 or np.any(om <= 0) or np.any(np.diff(om) <= 0):
            raise InputError("rabi_frequencies must be positive and strictly increasing")
        if self.shots < 1:
            raise InputError("shots must be at least 1")
        if self.n_trajectories < 1:
            raise InputError("n_trajectories must be at least 1")
        if self.transition not in ("carrier", "blue_sideband"):
            raise InputError("transition must be 'carrier' or 'blue_sideband'")
        if self.transition == "blue_sideband" and (self.mode is None
                                                   or self.coherent_state is None):
            raise InputError("sideband scans need a MotionalMode and a CoherentStateSpec")
        if len(self.lock_times) != om.size:
            raise InputError("lock_times must provide one grid per Rabi frequency")
        grids = tuple(np.asarray(g, float) for g in self.lock_times)
        for g in grids:
            if g.ndim != 1 or g.size == 0 or np.any(g < 0):
                raise InputError("each time grid must contain non-negative times")
        if not 0 < self.dt_factor < 0.1:
            raise InputError("dt_factor must lie in (0, 0.1)")
        object.__setattr__(self, "rabi_frequencies", om)
        object.__setattr__(self, "lock_times", grids)


@dataclass
class ScanDataset:
    """Flat table of scan points: one row per (Omega, t)."""

    omega: np.ndarray        # rad/s, actual locking (probe) Rabi frequency
    time: np.ndarray         # s
    sx_mean: np.ndarray
    sx_stderr: np.ndarray
    shots: np.ndarray
    flags: list[tuple[str, ...]]

    def rows_for(self, omega_value: float, rtol: float = 1e-9):
        mask = np.abs(self.omega - omega_value) <= rtol * omega_value
        return mask

    def omegas(self) -> np.ndarray:
        return np.unique(self.omega)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["omega_rad_s", "t_s", "sx_mean", "sx_stderr", "shots", "flags"])
            for i in range(self.omega.size):
                wr.writerow([repr(float(self.omega[i])), repr(float(self.time[i])),
                             repr(float(self.sx_mean[i])), repr(float(self.sx_stderr[i])),
                             int(self.shots[i]), ";".join(self.flags[i])])

    @classmethod
    def from_csv(cls, path) -> "ScanDataset":
        omega, time, mean, err, shots, flags = [], [], [], [], [], []
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            header = next(rd, None)
            if header is None:
                raise InputError(f"scan file {path} is empty")
            for row in rd:
                if not row:
                    continue
                omega.append(float(row[0]))
                time.append(float(row[1]))
                mean.append(float(row[2]))
                err.append(float(row[3]))
                shots.append(int(row[4]))
                flags.append(tuple(f for f in row[5].split(";") if f))
        if not omega:
            raise InputError(f"scan file {path} contains no data rows")
        return cls(omega=np.array(omega), time=np.array(time),
                   sx_mean=np.array(mean), sx_stderr=np.array(err),
                   shots=np.array(shots, dtype=int), flags=flags)


@dataclass(frozen=True)
class WeakNoiseReport:
    ok: bool
    rms_phase: float
    decay_exponent: float
    message: str = ""


def weak_noise_check(omega: float, model: PsdModel, t_max: float,
                     extra_model: PsdModel | None = None) -> WeakNoiseReport:
    """Flag configurations outside the weak-noise regime.

    Integrates the model over the band probed during a lock of length t_max,
    [2 pi / t_max, 4 Omega], for the rms phase, and evaluates the total decay
    exponent Omega^2 S(Omega) t_max / 2.  Fails when rms phase > 0.3 or the
    exponent exceeds 5.
    """
    lo = 2.0 * np.pi / t_max
    hi = 4.0 * omega
    if hi <= lo:
        hi = 2.0 * lo
    grid = np.geomspace(lo, hi, 4096)
    models = [model] + ([extra_model] if extra_model is not None else [])
    for m in models:
        for pk in m.peaks:
            if lo < pk.center < hi:
                grid = np.concatenate([grid, np.linspace(
                    max(pk.center - 6 * pk.fwhm, lo),
                    min(pk.center + 6 * pk.fwhm, hi), 512)])
    grid = np.unique(grid)
    s_tot = np.zeros_like(grid)
    s_at = 0.0
    for m in models:
        s_tot += evaluate_psd(m, grid)
        s_at += evaluate_psd(m, omega)
    variance = np.trapezoid(s_tot, grid) / np.pi
    rms = float(np.sqrt(variance))
    exponent = 0.5 * omega * omega * s_at * t_max
    ok = rms <= RMS_PHASE_LIMIT and exponent <= DECAY_EXPONENT_LIMIT
    msg = ""
    if rms > RMS_PHASE_LIMIT:
        msg = f"rms phase {rms:.3g} exceeds {RMS_PHASE_LIMIT}"
    elif exponent > DECAY_EXPONENT_LIMIT:
        msg = f"decay exponent {exponent:.3g} exceeds {DECAY_EXPONENT_LIMIT}"
    return WeakNoiseReport(ok=ok, rms_phase=rms, decay_exponent=float(exponent),
                           message=msg)


def auto_time_grid(omega: float, model: PsdModel, points: int = 16,
                   max_exponent: float = 2.5, min_exponent: float = 0.1,
                   extra_model: PsdModel | None = None) -> np.ndarray:
    """Time grid spanning decay exponents [min_exponent, max_exponent] at omega."""
    s = evaluate_psd(model, omega)
    if extra_model is not None:
        s += evaluate_psd(extra_model, omega)
    rate = 0.5 * omega * omega * s
    if rate <= 0:
        t_max = 40.0 * 2.0 * np.pi / omega
        return np.linspace(t_max / points, t_max, points)
    return np.linspace(min_exponent / rate, max_exponent / rate, points)


def _scan_point(config: ProtocolConfig, index: int):
    """Simulate all lock times for one Rabi frequency; returns row arrays."""
    omega0 = float(config.rabi_frequencies[index])
    t_grid = config.lock_times[index]
    flags: set[str] = set()

    if config.transition == "blue_sideband":
        eta = config.mode.lamb_dicke
        nbar = config.coherent_state.nbar
        rel = average_sideband_rabi(eta, nbar)
        spread = rabi_spread(eta, nbar)
        omega_eff = omega0 * rel
        if spread > COUPLING_SPREAD_LIMIT:
            flags.add("coupling_spread")
            warnings.warn(
                f"relative Rabi spread {spread:.2e} above {COUPLING_SPREAD_LIMIT}; "
                "phonon-number dispersion is not negligible", stacklevel=2)
        extra = config.motional_noise_model
    else:
        omega_eff = omega0
        extra = None

    t_max = float(np.max(t_grid))
    report = weak_noise_check(omega_eff, config.noise_model, t_max,
                              extra_model=extra)
    if not report.ok:
        flags.add("weak_noise")

    drive = DriveConfig(rabi_frequency=omega_eff,
                        dt=config.dt_factor / omega_eff)
    rec = ensemble_average(drive, config.noise_model, config.modulation,
                           config.n_trajectories,
                           derive_seed(config.master_seed, 1, index),
                           t_grid, extra_model=extra)
    if "strong_phase" in rec.flags:
        flags.add("strong_phase")

    p = np.clip(0.5 * (1.0 + rec.sx), 0.0, 1.0)
    rng = np.random.default_rng(derive_seed(config.master_seed, 2, index))
    k = rng.binomial(config.shots, p)
    p_hat = k / config.shots
    se_p = np.sqrt(p_hat * (1.0 - p_hat) / config.shots)
    degenerate = (k == 0) | (k == config.shots)
    if np.any(degenerate):
        # Wilson-interval floor (z = 1) keeps weights finite at p_hat in {0, 1}
        p_w = (k + 0.5) / (config.shots + 1.0)
        se_w = np.sqrt(p_w * (1.0 - p_w) / (config.shots + 1.0))
        se_p = np.where(degenerate, se_w, se_p)
    sx_meas = 2.0 * p_hat - 1.0
    sx_err = 2.0 * se_p
    row_flags = tuple(sorted(flags))
    return (np.full(t_grid.size, omega_eff), rec.times, sx_meas, sx_err,
            np.full(t_grid.size, config.shots, dtype=int),
            [row_flags] * t_grid.size)


def simulate_protocol(config: ProtocolConfig, threads: int = 1) -> ScanDataset:
    """Run the scan; rows are deterministic given the master seed.

    Every scan point derives its own seeds from (master_seed, point index), so
    results do not depend on execution order or thread count.
    """
    indices = range(config.rabi_frequencies.size)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda i: _scan_point(config, i), indices))
    else:
        parts = [_scan_point(config, i) for i in indices]
    omega = np.concatenate([p[0] for p in parts])
    time = np.concatenate([p[1] for p in parts])
    mean = np.concatenate([p[2] for p in parts])
    err = np.concatenate([p[3] for p in parts])
    shots = np.concatenate([p[4] for p in parts])
    flags = [f for p in parts for f in p[5]]
    return ScanDataset(omega=omega, time=time, sx_mean=mean, sx_stderr=err,
                       shots=shots, flags=flags)


@dataclass(frozen=True)
class DecayFit:
    """Result of fitting a decay law to one scan point's time series."""

    model: str                   # "exponential" | "damped_cosine"
    rate: float                  # 1/s
    rate_stderr: float
    amplitude: float
    amplitude_stderr: float
    beta: float = 0.0            # rad; damped_cosine only
    beta_stderr: float = 0.0
    chi2_reduced: float = np.nan
    n_points: int = 0
    success: bool = True
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if self.success and (self.rate < 0 or self.beta < 0):
            raise InputError("fits must report non-negative rate and beta, "
                             "or be declared failed")


def _failed_fit(model: str, n: int, reason: str) -> DecayFit:
    return DecayFit(model=model, rate=np.nan, rate_stderr=np.nan,
                    amplitude=np.nan, amplitude_stderr=np.nan,
                    beta=np.nan, beta_stderr=np.nan, n_points=n,
                    success=False, flags=("fit_failed", reason))


def _chi2_reduced(resid, errors, n_params):
    dof = resid.size - n_params
    if dof <= 0:
        return np.nan
    return float(np.sum((resid / errors) ** 2) / dof)


def _initial_rate(t, y):
    """Log-linear slope estimate over the clearly positive part of the decay."""
    mask = y > max(0.05, 0.05 * np.max(y))
    if mask.sum() < 2:
        return 1.0 / max(t[-1], 1e-12)
    coeffs = np.polyfit(t[mask], np.log(y[mask]), 1)
    return max(-coeffs[0], 0.0)


def fit_exponential(times, values, errors, amplitude: float | None = None) -> DecayFit:
    """Weighted least squares of y = A exp(-r t).

    ``amplitude=None`` fits A alongside the rate; passing a number pins it
    (the t -> 0 extrapolation).  Returns rate with its covariance-derived
    standard error; non-convergence yields a failed fit, never an exception.
    """
    t = np.asarray(times, float)
    y = np.asarray(values, float)
    e = np.asarray(errors, float)
    if t.size < 3:
        raise InputError("need at least 3 points")
    if np.any(e <= 0):
        raise InputError("errors must be positive")

    r0 = _initial_rate(t, y)
    try:
        if amplitude is None:
            popt, pcov = curve_fit(
                lambda tt, a, r: a * np.exp(-r * tt), t, y, sigma=e,
                absolute_sigma=True, p0=[max(y[0], 0.1), max(r0, 1e-9)],
                bounds=([0.0, 0.0], [2.0, np.inf]),
                xtol=1e-15, ftol=1e-15, maxfev=20000)
            a_fit, r_fit = popt
            a_err, r_err = np.sqrt(np.diag(pcov))
        else:
            popt, pcov = curve_fit(
                lambda tt, r: amplitude * np.exp(-r * tt), t, y, sigma=e,
                absolute_sigma=True, p0=[max(r0, 1e-9)],
                bounds=(0.0, np.inf), xtol=1e-15, ftol=1e-15, maxfev=20000)
            a_fit, a_err = amplitude, 0.0
            r_fit, r_err = popt[0], float(np.sqrt(pcov[0, 0]))
    except RuntimeError as exc:
        return _failed_fit("exponential", t.size, str(exc))

    resid = y - a_fit * np.exp(-r_fit * t)
    n_params = 1 if amplitude is not None else 2
    return DecayFit(model="exponential", rate=float(r_fit), rate_stderr=float(r_err),
                    amplitude=float(a_fit), amplitude_stderr=float(a_err),
                    chi2_reduced=_chi2_reduced(resid, e, n_params),
                    n_points=t.size)


def fit_damped_cosine(times, values, errors, drive_frequency: float,
                      amplitude: float | None = None,
                      force_beta: float | None = None) -> DecayFit:
    """Weighted least squares of y = A cos(beta Omega t / 2) exp(-r t).

    Multi-start over the oscillation frequency avoids local minima; fits where
    beta is indistinguishable from zero fall back to the exponential model and
    carry a ``beta_degenerate`` flag.  ``force_beta=0`` reproduces
    ``fit_exponential`` exactly (model nesting).
    """
    t = np.asarray(times, float)
    y = np.asarray(values, float)
    e = np.asarray(errors, float)
    if t.size < 6:
        raise InputError("need at least 6 points")
    if np.any(e <= 0):
        raise InputError("errors must be positive")
    if drive_frequency <= 0:
        raise InputError("drive_frequency must be positive")

    if force_beta is not None:
        if force_beta != 0.0:
            raise InputError("only force_beta = 0 is supported")
        base = fit_exponential(t, y, e, amplitude=amplitude)
        return replace(base, model="damped_cosine", beta=0.0, beta_stderr=0.0,
                       flags=base.flags + ("beta_forced",))

    span = t.max() - t.min()
    if span <= 0:
        return _failed_fit("damped_cosine", t.size, "degenerate time grid")
    w_res = np.pi / (2.0 * span)          # quarter oscillation over the span
    w_nyq = np.pi / max(np.median(np.diff(np.sort(t))), 1e-12)
    w_cap = min(0.5 * drive_frequency, w_nyq)

    starts = [0.0]
    starts += list(np.linspace(w_res, w_cap, 24))
    # FFT guess on the detrended series
    yy = y - y.mean()
    freqs = np.fft.rfftfreq(4 * t.size, d=span / t.size)
    amp = np.abs(np.fft.rfft(yy, 4 * t.size))
    if amp.size > 1:
        guess = 2.0 * np.pi * freqs[1 + int(np.argmax(amp[1:]))]
        starts.append(min(guess, w_cap))

    r0 = _initial_rate(t, np.abs(y))
    best = None
    for w_start in starts:
        try:
            if amplitude is None:
                popt, pcov = curve_fit(
                    lambda tt, a, w1, r: a * np.cos(w1 * tt) * np.exp(-r * tt),
                    t, y, sigma=e, absolute_sigma=True,
                    p0=[max(abs(y[0]), 0.1), w_start, max(r0, 1e-9)],
                    bounds=([0.0, 0.0, 0.0], [2.0, w_cap, np.inf]),
                    xtol=1e-15, ftol=1e-15, maxfev=20000)
            else:
                popt, pcov = curve_fit(
                    lambda tt, w1, r: amplitude * np.cos(w1 * tt) * np.exp(-r * tt),
                    t, y, sigma=e, absolute_sigma=True,
                    p0=[w_start, max(r0, 1e-9)],
                    bounds=([0.0, 0.0], [w_cap, np.inf]),
                    xtol=1e-15, ftol=1e-15, maxfev=20000)
                popt = np.concatenate([[amplitude], popt])
                pcov = np.pad(pcov, ((1, 0), (1, 0)))
        except (RuntimeError, ValueError):
            continue
        a_f, w_f, r_f = popt
        resid = y - a_f * np.cos(w_f * t) * np.exp(-r_f * t)
        chi2 = np.sum((resid / e) ** 2)
        if best is None or chi2 < best[0] - 1e-12:
            best = (chi2, popt, pcov)
    if best is None:
        return _failed_fit("damped_cosine", t.size, "no start converged")

    chi2, popt, pcov = best
    a_f, w_f, r_f = popt
    perr = np.sqrt(np.abs(np.diag(pcov)))
    beta = 2.0 * w_f / drive_frequency
    beta_err = 2.0 * perr[1] / drive_frequency
    dof = max(t.size - (2 if amplitude is not None else 3), 1)

    if w_f < w_res or (beta_err > 0 and beta <= beta_err):
        base = fit_exponential(t, y, e, amplitude=amplitude)
        return replace(base, model="damped_cosine", beta=0.0, beta_stderr=0.0,
                       flags=base.flags + ("beta_degenerate",))
    return DecayFit(model="damped_cosine", rate=float(r_f),
                    rate_stderr=float(perr[2]), amplitude=float(a_f),
                    amplitude_stderr=float(perr[0]), beta=float(beta),
                    beta_stderr=float(beta_err), chi2_reduced=float(chi2 / dof),
                    n_points=t.size)


def fit_scan(dataset: ScanDataset, model: str = "auto",
             drive_frequency_map=None) -> dict[float, DecayFit]:
    """Fit every Rabi frequency of a scan dataset.

    ``model``: "exponential", "damped_cosine", or "auto" (damped fit is kept
    when it converges, resolves a non-degenerate oscillation, and improves the
    reduced chi^2; otherwise the exponential fit is reported).
    """
    if model not in ("exponential", "damped_cosine", "auto"):
        raise InputError(f"unknown fit model {model!r}")
    out: dict[float, DecayFit] = {}
    for om in dataset.omegas():
        mask = dataset.rows_for(om)
        t = dataset.time[mask]
        y = dataset.sx_mean[mask]
        e = dataset.sx_stderr[mask]
        row_flags = next(f for f, m in zip(dataset.flags, mask) if m)
        exp_fit = fit_exponential(t, y, e)
        chosen = exp_fit
        if model in ("damped_cosine", "auto") and t.size >= 6:
            damped = fit_damped_cosine(t, y, e, drive_frequency=om)
            if model == "damped_cosine":
                chosen = damped
            elif (damped.success and "beta_degenerate" not in damped.flags
                  and damped.beta > 0
                  and (not exp_fit.success
                       or damped.chi2_reduced < 0.8 * exp_fit.chi2_reduced)):
                chosen = damped
        out[float(om)] = replace(chosen, flags=chosen.flags + row_flags)
    return out


def frequency_modulation_depth(beta: float, omega: float) -> float:
    """Peak frequency deviation in Hz of a phase modulation beta cos(omega t).

    The instantaneous frequency shift d phi/dt peaks at beta * omega rad/s.
    """
    if beta < 0:
        raise InputError("beta must be non-negative")
    return beta * omega / (2.0 * np.pi)


@dataclass(frozen=True)
class DetectionFloor:
    """Sensitivity limit from upper-state decay: S_nu_limit equals gamma."""

    gamma: float  # 1/s

    def __post_init__(self):
        if self.gamma < 0:
            raise InputError("gamma must be non-negative")

    @property
    def s_nu_limit(self) -> float:
        return self.gamma


@dataclass
class SpectrumEstimate:
    """Per-probe-frequency spectral densities with uncertainties and flags."""

    omega: np.ndarray          # rad/s
    rate: np.ndarray           # 1/s
    rate_err: np.ndarray
    s_phi: np.ndarray          # rad^2 s
    s_phi_err: np.ndarray
    s_nu: np.ndarray           # 1/s
    s_nu_err: np.ndarray
    delta_nu_hz: np.ndarray    # Hz; nonzero only for coherent rows
    delta_nu_err: np.ndarray
    beta: np.ndarray
    flags: list[tuple[str, ...]]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["omega_rad_s", "s_phi_rad2_s", "s_nu_1_s", "s_nu_err_1_s",
                         "delta_nu_hz", "flags"])
            for i in range(self.omega.size):
                wr.writerow([repr(float(self.omega[i])), repr(float(self.s_phi[i])),
                             repr(float(self.s_nu[i])), repr(float(self.s_nu_err[i])),
                             repr(float(self.delta_nu_hz[i])),
                             ";".join(self.flags[i])])


def reconstruct_spectrum(fits: dict[float, DecayFit],
                         floor: DetectionFloor | None = None) -> SpectrumEstimate:
    """Invert fitted rates to spectral densities.

    S_phi(Omega) = 2 rate / Omega^2 and S_nu = 2 rate; uncertainties propagate
    linearly.  Rows whose S_nu does not exceed the detection floor are flagged
    ``floor``; failed fits are carried through with ``fit_failed``.
    """
    if not fits:
        raise InputError("no fits to invert")
    omegas = np.array(sorted(fits))
    n = omegas.size
    est = SpectrumEstimate(
        omega=omegas, rate=np.empty(n), rate_err=np.empty(n),
        s_phi=np.empty(n), s_phi_err=np.empty(n),
        s_nu=np.empty(n), s_nu_err=np.empty(n),
        delta_nu_hz=np.zeros(n), delta_nu_err=np.zeros(n),
        beta=np.zeros(n), flags=[()] * n)
    for i, om in enumerate(omegas):
        fit = fits[float(om)]
        flags = set(fit.flags)
        est.rate[i] = fit.rate
        est.rate_err[i] = fit.rate_stderr
        est.s_phi[i] = 2.0 * fit.rate / om**2
        est.s_phi_err[i] = 2.0 * fit.rate_stderr / om**2
        est.s_nu[i] = 2.0 * fit.rate
        est.s_nu_err[i] = 2.0 * fit.rate_stderr
        if fit.model == "damped_cosine" and fit.success and fit.beta > 0:
            est.beta[i] = fit.beta
            est.delta_nu_hz[i] = frequency_modulation_depth(fit.beta, om)
            est.delta_nu_err[i] = frequency_modulation_depth(fit.beta_stderr, om)
        if not fit.success:
            flags.add("fit_failed")
        elif floor is not None and est.s_nu[i] <= floor.s_nu_limit:
            flags.add("floor")
        est.flags[i] = tuple(sorted(flags))
    return est
