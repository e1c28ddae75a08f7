"""Driven two-level dynamics under stochastic and coherent phase modulation.

The locking drive with Rabi frequency Omega couples the qubit resonantly; in
the interaction picture of the drive, a phase excursion phi(t) acts through

    H(t)/hbar = (Omega/2) phi(t) [cos(Omega t) sigma_y - sin(Omega t) sigma_z],

which is integrated step by step with an exact axis-angle 2x2 propagator
(piecewise-constant phi per step).  Bloch components are reported by default
in the frame of the statically driven qubit, where a resonant modulation
produces the spiral of slow sigma_x oscillations with fast sigma_y/sigma_z
rotation at Omega; sigma_x is identical in both frames.

Ensemble averages over noise realizations, the 4x4 Liouville superoperator,
the second-cumulant frequency integral, and the analytic long-time decay
operator live here as well.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, QuadratureError
from .noise import (ModulationSpec, NoiseTrajectory, PsdModel, evaluate_psd,
                    sample_modulation, synthesize_trajectory)

__all__ = [
    "DriveConfig",
    "BlochRecord",
    "VectorizedDensity",
    "DecayOperator",
    "noise_frame_hamiltonian",
    "propagate_trajectory",
    "ensemble_average",
    "liouville_superoperator",
    "second_cumulant_integral",
    "analytic_decay_operator",
    "coherent_evolution",
    "combined_sigma_x",
    "derive_seed",
]

PLUS_X = np.array([1.0, 1.0], dtype=complex) / np.sqrt(2.0)

# phi-independent structure of the Liouville operator,
# L(t) = -i (Omega/2) phi(t) [cos(Omega t) A_COS + sin(Omega t) A_SIN]
_B = np.array([[0, -1, -1, 0],
               [1, 0, 0, -1],
               [1, 0, 0, -1],
               [0, 1, 1, 0]], dtype=float)
A_COS = 1j * _B
A_SIN = np.diag([0.0, -2.0, 2.0, 0.0]).astype(complex)

# long-time decay structure: Phi(t) = exp(-chi2(t) * DECAY_MATRIX)
DECAY_MATRIX = np.array([[1, 0, 0, -1],
                         [0, 3, 1, 0],
                         [0, 1, 3, 0],
                         [-1, 0, 0, 1]], dtype=float)

# strong-phase diagnostic threshold: the linearized Hamiltonian assumes |phi| << 1
STRONG_PHASE_LIMIT = 0.3


@dataclass(frozen=True)
class DriveConfig:
    """Spin-locking drive: Rabi frequency (rad/s), integration step, initial state."""

    rabi_frequency: float
    dt: float | None = None          # s; default 0.01 / rabi_frequency
    initial_state: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.rabi_frequency <= 0:
            raise InputError("rabi_frequency must be positive")
        if self.dt is not None and self.dt * self.rabi_frequency >= 0.1:
            raise InputError("dt * rabi_frequency must stay below 0.1 to resolve "
                             "the rotating kernel")
        psi = PLUS_X if self.initial_state is None else np.asarray(self.initial_state, complex)
        if psi.shape != (2,):
            raise InputError("initial_state must be a 2-component state vector")
        nrm = np.linalg.norm(psi)
        if abs(nrm - 1.0) > 1e-9:
            psi = psi / nrm
        object.__setattr__(self, "initial_state", psi)

    @property
    def step(self) -> float:
        return self.dt if self.dt is not None else 0.01 / self.rabi_frequency


@dataclass(frozen=True)
class BlochRecord:
    """Time series of the Bloch components, optionally with standard errors."""

    times: np.ndarray
    sx: np.ndarray
    sy: np.ndarray
    sz: np.ndarray
    se_sx: np.ndarray | None = None
    se_sy: np.ndarray | None = None
    se_sz: np.ndarray | None = None
    flags: tuple[str, ...] = ()

    def norm(self) -> np.ndarray:
        return np.sqrt(self.sx ** 2 + self.sy ** 2 + self.sz ** 2)

    def to_csv(self, path):
        cols = ["t_s", "sx", "sy", "sz", "se_sx", "se_sy", "se_sz"]
        zeros = np.zeros_like(self.times)
        se = [self.se_sx if self.se_sx is not None else zeros,
              self.se_sy if self.se_sy is not None else zeros,
              self.se_sz if self.se_sz is not None else zeros]
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(cols)
            for row in zip(self.times, self.sx, self.sy, self.sz, *se):
                wr.writerow([repr(float(v)) for v in row])


@dataclass(frozen=True)
class VectorizedDensity:
    """Density matrix flattened row-major to (rho11, rho12, rho21, rho22)."""

    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, complex)
        if v.shape != (4,):
            raise InputError("vectorized density matrix has four components")
        object.__setattr__(self, "vector", v)

    @classmethod
    def from_state(cls, psi) -> "VectorizedDensity":
        psi = np.asarray(psi, complex)
        rho = np.outer(psi, psi.conj())
        return cls(rho.reshape(4))

    @classmethod
    def from_bloch(cls, sx: float, sy: float, sz: float) -> "VectorizedDensity":
        rho = 0.5 * np.array([[1.0 + sz, sx - 1j * sy],
                              [sx + 1j * sy, 1.0 - sz]], complex)
        return cls(rho.reshape(4))

    @property
    def trace(self) -> complex:
        return self.vector[0] + self.vector[3]

    def bloch(self) -> tuple[float, float, float]:
        r11, r12, r21, r22 = self.vector
        return (float((r12 + r21).real), float((1j * (r12 - r21)).real),
                float((r11 - r22).real))

    def validate(self, tol: float = 1e-9):
        r11, r12, r21, r22 = self.vector
        if abs(self.trace - 1.0) > tol:
            raise InputError(f"trace {self.trace} != 1")
        if abs(r21 - np.conj(r12)) > tol:
            raise InputError("rho21 must equal conj(rho12)")
        for p in (r11, r22):
            if p.real < -tol or p.real > 1.0 + tol or abs(p.imag) > tol:
                raise InputError("populations must lie in [0, 1]")


def noise_frame_hamiltonian(rabi_frequency: float, phi: float, t: float):
    """Coefficients (h_y, h_z) of sigma_y and sigma_z in rad/s at time t."""
    half = 0.5 * rabi_frequency * phi
    return (half * np.cos(rabi_frequency * t),
            -half * np.sin(rabi_frequency * t))


def _prepare_phase(drive, noise, modulation, t_grid):
    """Common sampling grid: returns (dt, n_steps, record_idx, phase_per_step)."""
    t_grid = np.asarray(t_grid, float)
    if t_grid.ndim != 1 or t_grid.size == 0 or np.any(t_grid < 0):
        raise InputError("t_grid must be a 1-d array of non-negative times")
    t_end = t_grid.max()

    if noise is not None:
        if noise.duration < t_end - 1e-12 * max(t_end, 1.0):
            raise InputError("noise trajectory shorter than the time grid")
        sub = max(1, int(np.ceil(noise.dt / drive.step - 1e-12)))
        dt = noise.dt / sub
    else:
        sub = 1
        dt = drive.step
    if dt * drive.rabi_frequency >= 0.1:
        raise InputError("integration step too coarse for the rotating kernel")

    n_steps = max(1, int(np.ceil(t_end / dt - 1e-9)))
    record_idx = np.rint(t_grid / dt).astype(int)
    n_steps = max(n_steps, record_idx.max())

    if noise is not None:
        phase = np.repeat(noise.samples, sub)[:n_steps]
        if phase.size < n_steps:  # pad by holding the last sample
            phase = np.concatenate([phase, np.full(n_steps - phase.size, phase[-1])])
    else:
        phase = np.zeros(n_steps)
    if modulation is not None and not modulation.is_empty:
        t_mid = (np.arange(n_steps) + 0.5) * dt
        phase = phase + sample_modulation(modulation, t_mid)
    return dt, n_steps, record_idx, phase


def _propagate_states(rabi_frequency, dt, n_steps, record_idx, phase, psi0):
    """Axis-angle stepping of a batch of states.

    ``phase``: (n_batch, n_steps) phase samples, constant per step.
    Returns lock-frame components (n_batch, n_record, 3).
    """
    n_batch = phase.shape[0]
    a = np.full(n_batch, psi0[0], complex)
    b = np.full(n_batch, psi0[1], complex)
    t_mid = (np.arange(n_steps) + 0.5) * dt
    cos_mid = np.cos(rabi_frequency * t_mid)
    sin_mid = np.sin(rabi_frequency * t_mid)
    # per-step slices must be contiguous; the batch loop walks the time axis
    phase_t = np.ascontiguousarray(phase.T)

    unique_idx, inverse = np.unique(record_idx, return_inverse=True)
    want = np.full(n_steps + 1, -1, dtype=int)
    want[unique_idx] = np.arange(unique_idx.size)
    buf = np.empty((n_batch, unique_idx.size, 3))

    def record(j):
        cross = np.conj(a) * b
        buf[:, j, 0] = 2.0 * cross.real
        buf[:, j, 1] = 2.0 * cross.imag
        buf[:, j, 2] = np.abs(a) ** 2 - np.abs(b) ** 2

    if want[0] >= 0:
        record(want[0])
    half_dt = 0.5 * rabi_frequency * dt
    for k in range(n_steps):
        theta = half_dt * phase_t[k]
        c = np.cos(theta)
        s = np.sin(theta)
        cm = cos_mid[k]
        sm = sin_mid[k]
        diag = c + 1j * (sm * s)
        off = cm * s
        a, b = diag * a - off * b, off * a + np.conj(diag) * b
        if want[k + 1] >= 0:
            record(want[k + 1])
    return buf[:, inverse, :]


def _lock_to_drive_frame(rabi_frequency, times, comps):
    """Rotate (sy, sz) by +Omega t about x; sx is frame-invariant."""
    c = np.cos(rabi_frequency * times)
    s = np.sin(rabi_frequency * times)
    sy = c * comps[..., 1] - s * comps[..., 2]
    sz = s * comps[..., 1] + c * comps[..., 2]
    return comps[..., 0], sy, sz


def propagate_trajectory(drive: DriveConfig,
                         noise: NoiseTrajectory | None = None,
                         modulation: ModulationSpec | None = None,
                         t_grid=None,
                         frame: str = "drive") -> BlochRecord:
    """Unitary evolution of a pure state under one phase realization.

    The phase is the sum of the sampled noise trajectory (zero-order hold over
    its own grid, subdivided to satisfy the drive's step invariant) and the
    coherent modulation evaluated at step midpoints.  Starts from |+x> unless
    the drive specifies otherwise.  ``frame`` is ``"drive"`` (default; sy/sz
    rotate at Omega) or ``"lock"`` (the frame the Hamiltonian is written in).
    """
    if t_grid is None:
        raise InputError("t_grid is required")
    if frame not in ("drive", "lock"):
        raise InputError("frame must be 'drive' or 'lock'")
    dt, n_steps, record_idx, phase = _prepare_phase(drive, noise, modulation, t_grid)
    comps = _propagate_states(drive.rabi_frequency, dt, n_steps, record_idx,
                              phase[None, :], drive.initial_state)[0]
    times = record_idx * dt
    flags = ()
    if np.max(np.abs(phase), initial=0.0) > STRONG_PHASE_LIMIT:
        flags = ("strong_phase",)
    if frame == "drive":
        sx, sy, sz = _lock_to_drive_frame(drive.rabi_frequency, times, comps)
    else:
        sx, sy, sz = comps[:, 0], comps[:, 1], comps[:, 2]
    return BlochRecord(times=times, sx=sx, sy=sy, sz=sz, flags=flags)


def derive_seed(master_seed: int, *key) -> int:
    """Deterministic child seed for an independent stream (order-independent)."""
    ss = np.random.SeedSequence(master_seed, spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0])


def ensemble_average(drive: DriveConfig,
                     model: PsdModel | None,
                     modulation: ModulationSpec | None,
                     n_traj: int,
                     master_seed: int,
                     t_grid,
                     frame: str = "drive",
                     extra_model: PsdModel | None = None,
                     chunk_bytes: int = 256 << 20) -> BlochRecord:
    """Pointwise mean and standard error of the Bloch components.

    Each trajectory gets an independent seed derived from ``master_seed`` and
    its index, so the result does not depend on chunking or execution order.
    ``extra_model`` adds a second, independent noise process sample-wise
    (equivalent to summing the two PSDs).
    """
    if n_traj < 1:
        raise InputError("n_traj must be at least 1")
    if frame not in ("drive", "lock"):
        raise InputError("frame must be 'drive' or 'lock'")
    t_grid = np.asarray(t_grid, float)
    t_end = float(t_grid.max())

    # one common sampling grid for synthesis and integration
    sub_dt = drive.step
    n_steps = max(2, int(np.ceil(t_end / sub_dt - 1e-9)))
    record_idx = np.rint(t_grid / sub_dt).astype(int)
    n_steps = max(n_steps, int(record_idx.max()))
    duration = n_steps * sub_dt

    zero_noise = model is None or model.is_zero
    zero_extra = extra_model is None or extra_model.is_zero
    times = record_idx * sub_dt

    n_rec = t_grid.size
    mean = np.zeros((n_rec, 3))
    m2 = np.zeros((n_rec, 3))
    count = 0
    strong = 0

    chunk = max(1, int(chunk_bytes / (n_steps * 8 * 2)))
    for start in range(0, n_traj, chunk):
        stop = min(start + chunk, n_traj)
        rows = []
        for i in range(start, stop):
            if zero_noise and zero_extra:
                phi = np.zeros(n_steps)
            else:
                phi = np.zeros(n_steps)
                if not zero_noise:
                    phi = phi + synthesize_trajectory(
                        model, duration, sub_dt, derive_seed(master_seed, i)).samples[:n_steps]
                if not zero_extra:
                    phi = phi + synthesize_trajectory(
                        extra_model, duration, sub_dt,
                        derive_seed(master_seed, i, 1)).samples[:n_steps]
            rows.append(phi)
        phase = np.stack(rows)
        if modulation is not None and not modulation.is_empty:
            t_mid = (np.arange(n_steps) + 0.5) * sub_dt
            phase = phase + sample_modulation(modulation, t_mid)[None, :]
        strong += int(np.sum(np.max(np.abs(phase), axis=1) > STRONG_PHASE_LIMIT))
        comps = _propagate_states(drive.rabi_frequency, sub_dt, n_steps,
                                  record_idx, phase, drive.initial_state)
        if frame == "drive":
            sx, sy, sz = _lock_to_drive_frame(drive.rabi_frequency, times, comps)
            comps = np.stack([sx, sy, sz], axis=-1)
        # sequential Welford accumulation in trajectory-index order, so the
        # result is independent of chunk size and scheduling
        for row in comps:
            count += 1
            delta = row - mean
            mean += delta / count
            m2 += delta * (row - mean)

    se = np.sqrt(m2 / count) / np.sqrt(count) if count > 1 else np.zeros_like(mean)
    flags = ("strong_phase",) if strong else ()
    return BlochRecord(times=times, sx=mean[:, 0], sy=mean[:, 1], sz=mean[:, 2],
                       se_sx=se[:, 0], se_sy=se[:, 1], se_sz=se[:, 2], flags=flags)


def liouville_superoperator(rabi_frequency: float, phi: float, t: float) -> np.ndarray:
    """4x4 matrix of the commutator superoperator (1/i hbar)[H, .] at time t.

    Acts on the row-major vectorized density matrix
    (rho11, rho12, rho21, rho22).
    """
    c = np.cos(rabi_frequency * t)
    s = np.sin(rabi_frequency * t)
    return -1j * 0.5 * rabi_frequency * phi * (c * A_COS + s * A_SIN)


def _osc_integrals(b, t):
    """Stable evaluation of the four base integrals over tau in [0, t].

    E(b) = Int (t - tau) cos(b tau) dtau = (1 - cos bt)/b^2
    F(b) = Int (t - tau) sin(b tau) dtau = (bt - sin bt)/b^2
    G(b) = Int cos(b tau) dtau          = sin(bt)/b
    H(b) = Int sin(b tau) dtau          = (1 - cos bt)/b
    """
    bt = b * t
    small = np.abs(bt) < 1e-5
    bs = np.where(small, 1.0, b)  # placeholder to avoid 0/0 warnings
    E = np.where(small, t * t * (0.5 - bt * bt / 24.0), (1.0 - np.cos(bt)) / (bs * bs))
    F = np.where(small, t * t * bt * (1.0 / 6.0 - bt * bt / 120.0),
                 (bt - np.sin(bt)) / (bs * bs))
    G = np.where(small, t * (1.0 - bt * bt / 6.0), np.sin(bt) / bs)
    H = np.where(small, t * bt * (0.5 - bt * bt / 24.0), (1.0 - np.cos(bt)) / bs)
    return E, F, G, H


def _filter_kernels(omega, rabi_frequency, t):
    """Closed forms of P_uv(omega, t) = Int_0^t cos(omega tau) J_uv(tau, t) dtau.

    J_uv(tau, t) = Int_tau^t u(Omega t1) v(Omega (t1 - tau)) dt1 for
    u, v in {cos, sin} collects the time-ordered double integral of the
    Liouville kernel; P_cc peaks at omega = Omega with width ~ 2 pi / t,
    which is the narrow filter of the locking sequence.
    """
    a = rabi_frequency
    Em, Fm, Gm, Hm = _osc_integrals(a - omega, t)
    Ep, Fp, Gp, Hp = _osc_integrals(a + omega, t)
    ECC = 0.5 * (Em + Ep)
    ESC = 0.5 * (Fm + Fp)
    GCC = 0.5 * (Gm + Gp)
    HSC = 0.5 * (Hm + Hp)
    s2 = np.sin(2.0 * a * t)
    c2 = np.cos(2.0 * a * t)
    osc_y = (s2 * GCC - (1.0 + c2) * HSC) / (4.0 * a)
    osc_z = ((c2 - 1.0) * GCC + s2 * HSC) / (4.0 * a)
    p_cc = 0.5 * ECC + osc_y
    p_ss = 0.5 * ECC - osc_y
    p_cs = -0.5 * ESC - osc_z
    p_sc = 0.5 * ESC - osc_z
    return p_cc, p_cs, p_sc, p_ss


def second_cumulant_integral(rabi_frequency: float, model: PsdModel,
                             t: float, omega_max: float | None = None) -> np.ndarray:
    """Evaluate Int_0^t dt1 Int_0^t1 dt2 <L(t1) L(t2)> for zero-mean Gaussian phase.

    The phase autocovariance is expressed through the spectral density
    (Wiener-Khinchin), the time-ordered double integral is reduced to closed
    form in the lag variable, and the remaining frequency integral is done on
    a dense grid.  For a flat spectrum and Omega t >> 1 this converges to
    -chi2(t) * DECAY_MATRIX with chi2 = (Omega^2/4) S(Omega) (t/2).
    """
    if t <= 0:
        raise InputError("t must be positive")
    om = rabi_frequency
    if not model.is_tabulated and model.background_amplitude > 0 \
            and model.background_exponent <= -1.0 and model.background_cutoff == 0.0:
        raise QuadratureError(
            f"background exponent {model.background_exponent} <= -1 makes the "
            "frequency integral diverge at omega -> 0; set background_cutoff "
            "or use a tabulated model with a low-frequency plateau")

    if omega_max is None:
        omega_max = 8.0 * om
        for pk in model.peaks:
            omega_max = max(omega_max, pk.center + 10.0 * pk.fwhm)
        if model.is_tabulated:
            omega_max = max(omega_max, float(model.table_omega[-1]))

    # resolve both the 2pi/t oscillations of the kernels and any narrow peaks
    dw = 2.0 * np.pi / t / 24.0
    for pk in model.peaks:
        dw = min(dw, pk.fwhm / 8.0)
    n = int(np.ceil(omega_max / dw)) + 1
    if n > 4_000_000:
        raise QuadratureError(
            f"frequency grid needs {n} nodes (omega_max={omega_max:g}, "
            f"spacing {dw:g}); narrow the model peaks or reduce t")
    w = np.linspace(0.0, omega_max, n)
    s = np.empty_like(w)
    s[0] = 0.0 if model.is_zero else _psd_at_zero(model)
    s[1:] = evaluate_psd(model, w[1:])
    if not np.all(np.isfinite(s)):
        raise QuadratureError("PSD evaluates to non-finite values inside the band")

    p_cc, p_cs, p_sc, p_ss = _filter_kernels(w, om, t)
    pref = -(om * om / 4.0) / np.pi
    return pref * (np.trapezoid(s * p_cc, w) * (A_COS @ A_COS)
                   + np.trapezoid(s * p_cs, w) * (A_COS @ A_SIN)
                   + np.trapezoid(s * p_sc, w) * (A_SIN @ A_COS)
                   + np.trapezoid(s * p_ss, w) * (A_SIN @ A_SIN))


def _psd_at_zero(model: PsdModel) -> float:
    try:
        return float(evaluate_psd(model, 0.0))
    except Exception:
        return 0.0  # DC node carries zero quadrature weight anyway


@dataclass(frozen=True)
class DecayOperator:
    """Long-time ensemble propagator of the vectorized density matrix."""

    matrix: np.ndarray   # 4x4, real
    chi2: float          # dimensionless decay exponent scale
    rabi_frequency: float
    time: float

    def apply(self, rho: VectorizedDensity) -> VectorizedDensity:
        return VectorizedDensity(self.matrix @ rho.vector)

    def sigma_x_decay(self) -> float:
        """Magnetization retention factor e^{-4 chi2} for a |+x> state."""
        return float(np.exp(-4.0 * self.chi2))


def analytic_decay_operator(rabi_frequency: float, s_phi_at_rabi: float,
                            t: float) -> DecayOperator:
    """Closed-form Phi(t) = exp(-chi2 M) for a flat spectrum near the drive.

    chi2(t) = (Omega^2/4) S_phi(Omega) t/2; the entries only involve
    e^{-2 chi2} and e^{-4 chi2}.  Phi(0) is the identity and the map is
    trace preserving.
    """
    if s_phi_at_rabi < 0 or t < 0:
        raise InputError("s_phi_at_rabi and t must be non-negative")
    chi2 = 0.25 * rabi_frequency ** 2 * s_phi_at_rabi * 0.5 * t
    e2 = np.exp(-2.0 * chi2)
    e4 = np.exp(-4.0 * chi2)
    m = 0.5 * np.array([
        [1.0 + e2, 0.0, 0.0, 1.0 - e2],
        [0.0, e2 + e4, -e2 + e4, 0.0],
        [0.0, -e2 + e4, e2 + e4, 0.0],
        [1.0 - e2, 0.0, 0.0, 1.0 + e2],
    ])
    return DecayOperator(matrix=m, chi2=float(chi2),
                         rabi_frequency=rabi_frequency, time=t)


def coherent_evolution(rabi_frequency: float, beta: float, delta: float,
                       t_grid) -> BlochRecord:
    """Rotating-wave closed forms for a resonant tone (drive frame).

    sx = cos(W1 t), sy = sin(W1 t) sin(Omega t + delta),
    sz = -sin(W1 t) cos(Omega t + delta) with W1 = beta Omega / 2.
    Valid for beta << 1; records a flag instead of enforcing it.
    """
    t = np.asarray(t_grid, float)
    w1 = 0.5 * beta * rabi_frequency
    env = np.sin(w1 * t)
    rec = BlochRecord(
        times=t,
        sx=np.cos(w1 * t),
        sy=env * np.sin(rabi_frequency * t + delta),
        sz=-env * np.cos(rabi_frequency * t + delta),
        flags=("rwa_validity",) if beta > STRONG_PHASE_LIMIT else (),
    )
    return rec


def combined_sigma_x(rabi_frequency: float, beta: float,
                     s_phi_at_rabi: float, t):
    """Product law for tone plus noise: cos(beta Omega t / 2) e^{-Omega^2 S t / 2}."""
    tt = np.asarray(t, float)
    out = (np.cos(0.5 * beta * rabi_frequency * tt)
           * np.exp(-0.5 * rabi_frequency ** 2 * s_phi_at_rabi * tt))
    return float(out) if out.ndim == 0 else out
