"""Spectroscopy module: fits, protocol scans, spectrum reconstruction."""

import numpy as np
import pytest

from spinlock import (CoherentStateSpec, DetectionFloor, ModulationSpec, evaluate_psd,
                      MotionalMode, ProtocolConfig, PsdModel, SpectralPeak,
                      auto_time_grid, average_sideband_rabi, combined_sigma_x,
                      fit_damped_cosine, fit_exponential, fit_scan,
                      frequency_modulation_depth, reconstruct_spectrum,
                      simulate_protocol, weak_noise_check)
from spinlock.errors import InputError
from spinlock.spectroscopy import DecayFit

OM = 2.0 * np.pi * 1000.0


def _protocol(omegas_hz, s_phi, seed=11, shots=400, n_traj=150,
              max_exponent=2.0, points=12, **kw):
    model = kw.pop("noise_model", PsdModel.white(s_phi))
    omegas = 2 * np.pi * np.asarray(omegas_hz, float)
    extra = kw.get("motional_noise_model")
    grids = tuple(auto_time_grid(om if kw.get("transition", "carrier") == "carrier"
                                 else om * average_sideband_rabi(
                                     kw["mode"].lamb_dicke, kw["coherent_state"].nbar),
                                 model, points=points, max_exponent=max_exponent,
                                 extra_model=extra)
                  for om in omegas)
    return ProtocolConfig(rabi_frequencies=omegas, lock_times=grids, shots=shots,
                          n_trajectories=n_traj, noise_model=model,
                          master_seed=seed, dt_factor=0.05, **kw)


class TestFitExponential:
    def test_noiseless_exact(self):
        r = 40.0
        t = np.linspace(0.0, 0.05, 20)
        y = np.exp(-r * t)
        fit = fit_exponential(t, y, np.full_like(t, 1e-6))
        assert fit.success
        assert fit.rate == pytest.approx(r, rel=1e-9)

    def test_one_percent_noise(self):
        rng = np.random.default_rng(2)
        r = 40.0
        t = np.linspace(0.0, 0.05, 20)
        y = np.exp(-r * t) + rng.normal(0.0, 0.01, t.size)
        fit = fit_exponential(t, y, np.full_like(t, 0.01))
        assert abs(fit.rate - r) < 3.0 * fit.rate_stderr
        assert fit.chi2_reduced < 2.5

    def test_constant_gives_zero_rate(self):
        t = np.linspace(0.0, 0.05, 12)
        fit = fit_exponential(t, np.ones_like(t), np.full_like(t, 0.01))
        assert fit.rate == pytest.approx(0.0, abs=1e-9)
        assert fit.rate_stderr > 0.0

    def test_pinned_amplitude(self):
        r = 25.0
        t = np.linspace(0.0, 0.08, 24)
        y = np.exp(-r * t)
        fit = fit_exponential(t, y, np.full_like(t, 1e-6), amplitude=1.0)
        assert fit.rate == pytest.approx(r, rel=1e-9)
        assert fit.amplitude == 1.0

    def test_input_validation(self):
        with pytest.raises(InputError):
            fit_exponential([0, 1], [1, 0.5], [0.1, 0.1])
        with pytest.raises(InputError):
            fit_exponential([0, 1, 2], [1, 0.5, 0.2], [0.1, 0.0, 0.1])


class TestFitDampedCosine:
    def test_synthetic_round_trip(self):
        rng = np.random.default_rng(5)
        beta, r = 0.05, 20.0
        t = np.linspace(0.0, 0.06, 30)
        y = combined_sigma_x(OM, beta, 2 * r / OM**2, t)
        y = y + rng.normal(0.0, 0.02, t.size)
        fit = fit_damped_cosine(t, y, np.full_like(t, 0.02), drive_frequency=OM)
        assert fit.success
        assert fit.model == "damped_cosine"
        assert fit.beta == pytest.approx(beta, rel=0.05)
        assert fit.rate == pytest.approx(r, rel=0.10)

    def test_zero_beta_falls_back(self):
        rng = np.random.default_rng(6)
        r = 30.0
        t = np.linspace(0.0, 0.06, 24)
        y = np.exp(-r * t) + rng.normal(0.0, 0.01, t.size)
        e = np.full_like(t, 0.01)
        fit = fit_damped_cosine(t, y, e, drive_frequency=OM)
        assert "beta_degenerate" in fit.flags
        assert fit.beta == 0.0
        ref = fit_exponential(t, y, e)
        assert fit.rate == pytest.approx(ref.rate, rel=1e-12)

    def test_forced_beta_matches_exponential_exactly(self):
        rng = np.random.default_rng(7)
        t = np.linspace(0.0, 0.05, 18)
        y = np.exp(-22.0 * t) + rng.normal(0.0, 0.02, t.size)
        e = np.full_like(t, 0.02)
        forced = fit_damped_cosine(t, y, e, drive_frequency=OM, force_beta=0.0)
        ref = fit_exponential(t, y, e)
        assert forced.rate == ref.rate
        assert forced.rate_stderr == ref.rate_stderr
        assert "beta_forced" in forced.flags

    def test_modulation_depth_identity(self):
        beta = 0.08
        t = np.linspace(0.0, 0.08, 40)
        y = combined_sigma_x(OM, beta, 2 * 15.0 / OM**2, t)
        fit = fit_damped_cosine(t, y, np.full_like(t, 1e-4), drive_frequency=OM)
        dnu = frequency_modulation_depth(fit.beta, OM)
        assert dnu == pytest.approx(beta * OM / (2 * np.pi), rel=0.02)

    def test_needs_six_points(self):
        with pytest.raises(InputError):
            fit_damped_cosine([0, 1, 2, 3, 4], [1, 1, 1, 1, 1],
                              [0.1] * 5, drive_frequency=OM)

    def test_negative_beta_cannot_be_reported(self):
        with pytest.raises(InputError):
            DecayFit(model="damped_cosine", rate=1.0, rate_stderr=0.1,
                     amplitude=1.0, amplitude_stderr=0.1, beta=-0.2,
                     beta_stderr=0.1)


class TestFrequencyModulationDepth:
    def test_zero(self):
        assert frequency_modulation_depth(0.0, OM) == 0.0

    def test_direct_value(self):
        # peak deviation of d phi/dt is beta * Omega, i.e. beta * f in Hz
        assert frequency_modulation_depth(0.1, 2 * np.pi * 1000.0) == pytest.approx(
            100.0, rel=1e-12)

    def test_relative_depth_scale(self):
        # a 2e-5 relative modulation of a 3.167 MHz mode is ~63 Hz, the same
        # scale as the tens-of-Hz depths the protocol resolves
        nu_x = 3.167e6
        beta = 2e-5 * nu_x * 2 * np.pi / OM  # index that yields that depth at OM
        dnu = frequency_modulation_depth(beta, OM)
        assert dnu == pytest.approx(63.34, rel=1e-3)
        assert 40.0 < dnu < 80.0

    def test_negative_rejected(self):
        with pytest.raises(InputError):
            frequency_modulation_depth(-0.1, OM)


class TestWeakNoiseCheck:
    def test_zero_model_passes(self):
        rep = weak_noise_check(OM, PsdModel(), 0.05)
        assert rep.ok
        assert rep.rms_phase == 0.0

    def test_large_exponent_fails(self):
        s = 10.0 / (0.5 * OM**2 * 0.05)
        rep = weak_noise_check(OM, PsdModel.white(s), 0.05)
        assert not rep.ok
        assert rep.decay_exponent == pytest.approx(10.0, rel=1e-12)

    def test_strong_low_frequency_noise_fails(self):
        # steep phase-noise divergence below a few hundred Hz drives the rms
        # phase outside the weak-noise regime at a 2 pi x 100 rad/s probe
        om_lo = 2 * np.pi * 100.0
        w = np.geomspace(2 * np.pi * 5.0, 2 * np.pi * 2e4, 200)
        s_phi = 1e-4 * (w / (2 * np.pi * 200.0)) ** -3.5
        model = PsdModel.from_table(w, s_phi)
        rep = weak_noise_check(om_lo, model, 0.1)
        assert not rep.ok
        assert rep.rms_phase > 0.3


class TestReconstructSpectrum:
    @staticmethod
    def _fit(rate, err=0.01, model="exponential", beta=0.0, beta_err=0.0):
        return DecayFit(model=model, rate=rate, rate_stderr=err, amplitude=1.0,
                        amplitude_stderr=0.01, beta=beta, beta_stderr=beta_err,
                        n_points=10)

    def test_inversion_identities(self):
        om = 2 * np.pi * 700.0
        fits = {om: self._fit(12.5, err=0.6)}
        est = reconstruct_spectrum(fits)
        assert est.s_phi[0] == 2.0 * 12.5 / om**2
        assert est.s_nu[0] == 2.0 * 12.5
        assert est.s_nu[0] == pytest.approx(om**2 * est.s_phi[0], rel=1e-14)
        assert est.s_nu_err[0] == 2.0 * 0.6

    def test_floor_flagging_exact(self):
        floor = DetectionFloor(gamma=0.9)
        assert floor.s_nu_limit == 0.9
        fits = {OM: self._fit(0.45), 2 * OM: self._fit(0.45000001),
                3 * OM: self._fit(10.0)}
        est = reconstruct_spectrum(fits, floor=floor)
        assert "floor" in est.flags[0]        # S_nu = 0.9 sits at the limit
        assert "floor" not in est.flags[1]    # just above
        assert "floor" not in est.flags[2]

    def test_coherent_rows_carry_depth(self):
        om = 2 * np.pi * 900.0
        fits = {om: self._fit(5.0, model="damped_cosine", beta=0.1, beta_err=0.004)}
        est = reconstruct_spectrum(fits)
        assert est.delta_nu_hz[0] == pytest.approx(0.1 * om / (2 * np.pi), rel=1e-12)
        assert est.delta_nu_err[0] == pytest.approx(0.004 * om / (2 * np.pi), rel=1e-12)

    def test_failed_fits_flagged(self):
        bad = DecayFit(model="exponential", rate=np.nan, rate_stderr=np.nan,
                       amplitude=np.nan, amplitude_stderr=np.nan,
                       success=False, flags=("fit_failed",))
        est = reconstruct_spectrum({OM: bad})
        assert "fit_failed" in est.flags[0]

    def test_empty_rejected(self):
        with pytest.raises(InputError):
            reconstruct_spectrum({})


class TestSimulateProtocol:
    def test_zero_noise_stays_at_one(self):
        config = _protocol([500.0, 1000.0], 0.0, noise_model=PsdModel(),
                           shots=2000, n_traj=4)
        config = ProtocolConfig(
            rabi_frequencies=config.rabi_frequencies,
            lock_times=tuple(np.linspace(1e-4, 5e-3, 8) for _ in range(2)),
            shots=2000, n_trajectories=4, noise_model=PsdModel(),
            master_seed=3)
        data = simulate_protocol(config)
        assert np.all(data.sx_mean > 1.0 - 4.0 * data.sx_stderr)
        assert np.all(data.sx_stderr > 0.0)

    def test_flat_noise_rates_within_5pct(self):
        s_phi = 1.6e-6
        config = _protocol([800.0, 1600.0], s_phi, shots=2000,
                           n_traj=400, points=14)
        data = simulate_protocol(config)
        fits = fit_scan(data, model="exponential")
        for om, fit in fits.items():
            want = 0.5 * om**2 * s_phi
            assert fit.rate == pytest.approx(want, rel=0.05)

    def test_carrier_flat_sideband_decays(self):
        # trapping noise only: the carrier scan stays flat, the sideband decays
        mode = MotionalMode(frequency=2 * np.pi * 3.167e6, lamb_dicke=0.038)
        coh = CoherentStateSpec(nbar=586.0)
        s_mot = 4e-6
        motional = PsdModel.white(s_mot)
        rel = average_sideband_rabi(0.038, 586.0)

        def run(transition):
            om0 = 2 * np.pi * np.array([1200.0])
            om_eff = om0[0] * (rel if transition == "blue_sideband" else 1.0)
            rate_sb = 0.5 * (om0[0] * rel) ** 2 * s_mot
            grid = np.linspace(1e-4, 2.2 / rate_sb, 12)
            cfg = ProtocolConfig(
                rabi_frequencies=om0, lock_times=(grid,), shots=600,
                n_trajectories=200, noise_model=PsdModel(), master_seed=21,
                transition=transition, motional_noise_model=motional,
                mode=mode, coherent_state=coh, dt_factor=0.05)
            return simulate_protocol(cfg)

        carrier = run("carrier")
        sideband = run("blue_sideband")
        fit_c = fit_scan(carrier, model="exponential")
        fit_s = fit_scan(sideband, model="exponential")
        rate_c = next(iter(fit_c.values()))
        rate_s = next(iter(fit_s.values()))
        assert rate_c.rate <= 3.0 * rate_c.rate_stderr          # flat
        om_eff = 2 * np.pi * 1200.0 * rel
        want = 0.5 * om_eff**2 * s_mot
        assert rate_s.rate == pytest.approx(want, rel=0.12)      # decays
        # the sideband dataset reports the effective probe frequency
        assert sideband.omega[0] == pytest.approx(om_eff, rel=1e-12)

    def test_determinism(self):
        config = _protocol([700.0], 1e-6, n_traj=20, shots=100, points=6)
        a = simulate_protocol(config)
        b = simulate_protocol(config)
        assert np.array_equal(a.sx_mean, b.sx_mean)
        assert np.array_equal(a.sx_stderr, b.sx_stderr)
        c = simulate_protocol(config, threads=2)
        assert np.array_equal(a.sx_mean, c.sx_mean)

    def test_linearity_in_injected_density(self):
        # doubling S_phi doubles every fitted rate within fit uncertainty;
        # moderate shot counts keep the reported errors honest (they must
        # dominate the ensemble scatter for the covariance to be meaningful)
        rates = {}
        for tag, s, seed in (("a", 8e-7, 13), ("b", 1.6e-6, 14)):
            config = _protocol([900.0], s, shots=400, n_traj=400,
                               points=12, seed=seed)
            fits = fit_scan(simulate_protocol(config), model="exponential")
            rates[tag] = next(iter(fits.values()))
        ratio = rates["b"].rate / rates["a"].rate
        sigma = ratio * np.hypot(rates["b"].rate_stderr / rates["b"].rate,
                                 rates["a"].rate_stderr / rates["a"].rate)
        assert abs(ratio - 2.0) < 3.0 * sigma + 0.05

    def test_probe_selectivity_peak_in_one_bin(self):
        # an injected peak shows up only in the overlapping probe bin; the
        # peak must stay wider than the locking filter (2 pi / t_max) for the
        # reconstruction to resolve its height rather than its average
        peak_f, height, floor = 1000.0, 4e-6, 1e-6
        model = PsdModel(white_floor=floor,
                         peaks=(SpectralPeak(center=2 * np.pi * peak_f,
                                             height=height,
                                             fwhm=2 * np.pi * 100.0),))
        omegas = 2 * np.pi * np.array([600.0, 1000.0, 1700.0])
        grid = np.linspace(2e-3, 40e-3, 12)
        cfg = ProtocolConfig(rabi_frequencies=omegas,
                             lock_times=(grid, grid, grid),
                             shots=400, n_trajectories=250,
                             noise_model=model, master_seed=17, dt_factor=0.05)
        fits = fit_scan(simulate_protocol(cfg), model="exponential")
        est = reconstruct_spectrum(fits)
        assert est.s_phi[1] == pytest.approx(height + floor, rel=0.15)
        for k in (0, 2):
            want = 0.5 * omegas[k] ** 2 * evaluate_psd(model, omegas[k])
            assert abs(est.rate[k] - want) < 3.0 * est.rate_err[k] + 0.15 * want

    def test_weak_noise_rows_flagged(self):
        s_phi = 4e-5  # exponent >> 5 over the auto grid
        config = _protocol([2000.0], s_phi, n_traj=10, shots=50, points=6,
                           max_exponent=8.0)
        data = simulate_protocol(config)
        assert all("weak_noise" in f for f in data.flags)

    def test_validation(self):
        with pytest.raises(InputError):
            ProtocolConfig(rabi_frequencies=np.array([2.0, 1.0]),
                           lock_times=(np.array([1e-3]), np.array([1e-3])),
                           shots=10, n_trajectories=5,
                           noise_model=PsdModel(), master_seed=0)
        with pytest.raises(InputError):
            ProtocolConfig(rabi_frequencies=np.array([1.0]),
                           lock_times=(np.array([1e-3]),),
                           shots=10, n_trajectories=5,
                           noise_model=PsdModel(), master_seed=0,
                           transition="blue_sideband")


class TestScanDatasetCsv:
    def test_round_trip(self, tmp_path):
        config = _protocol([750.0], 1e-6, n_traj=10, shots=120, points=6)
        data = simulate_protocol(config)
        path = tmp_path / "scan.csv"
        data.to_csv(path)
        back = type(data).from_csv(path)
        assert np.array_equal(back.omega, data.omega)
        assert np.array_equal(back.sx_mean, data.sx_mean)
        assert back.flags == data.flags

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        from spinlock import ScanDataset
        with pytest.raises(InputError):
            ScanDataset.from_csv(path)
