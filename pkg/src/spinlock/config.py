"""Run configuration: TOML loading, strict validation, unit conversion.

Configs quote every frequency in Hz; conversion to angular frequency happens
here, once, so the numerical layers only ever see rad/s.  Unknown keys are
rejected rather than ignored.
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .motion import CoherentStateSpec, MotionalMode
from .noise import ModulationSpec, PsdModel, SpectralPeak
from .spectroscopy import ProtocolConfig, auto_time_grid

TWO_PI = 2.0 * np.pi

_PEAK_KEYS = {"center_hz", "height", "fwhm_hz"}
_NOISE_KEYS = {"white_floor", "background_amplitude", "background_exponent",
               "reference_frequency_hz", "background_cutoff_hz", "peaks",
               "table_csv"}
_TONE_KEYS = {"frequency_hz", "index_rad", "phase_rad"}
_SCHEMA = {
    "master_seed": int,
    "threads": int,
    "noise": _NOISE_KEYS,
    "motional_noise": _NOISE_KEYS,
    "modulation": {"tones"},
    "synthesize": {"duration_s", "dt_s", "sample_rate_hz", "trajectories"},
    "motion": {"mode_frequency_hz", "lamb_dicke", "nbar", "fock_cutoff", "nbar_max"},
    "scan": {"transition", "rabi_frequencies_hz", "shots", "trajectories",
             "time_points", "max_decay_exponent", "min_decay_exponent",
             "lock_times_s", "dt_factor"},
    "spectrum": {"fit_model", "floor_gamma", "scan_csv"},
    "demo": {"shots", "trajectories"},
}


def load_config(path) -> dict:
    """Parse and validate a TOML config file."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from exc
    _validate(raw, path)
    return raw


def _validate(raw: dict, path):
    for key, value in raw.items():
        if key not in _SCHEMA:
            raise ConfigError(f"{path}: unknown top-level key {key!r}")
        spec = _SCHEMA[key]
        if spec is int:
            if not isinstance(value, int):
                raise ConfigError(f"{path}: {key} must be an integer")
            continue
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: section [{key}] must be a table")
        allowed = spec if isinstance(spec, set) else set(spec)
        for sub in value:
            if sub not in allowed:
                raise ConfigError(f"{path}: unknown key {key}.{sub}")
        if key in ("noise", "motional_noise"):
            for pk in value.get("peaks", []):
                for sub in pk:
                    if sub not in _PEAK_KEYS:
                        raise ConfigError(f"{path}: unknown key {key}.peaks.{sub}")
        if key == "modulation":
            for tone in value.get("tones", []):
                for sub in tone:
                    if sub not in _TONE_KEYS:
                        raise ConfigError(f"{path}: unknown key modulation.tones.{sub}")


def build_psd(section: dict | None, base_dir: Path | None = None) -> PsdModel:
    """PsdModel from a [noise]-style section; missing section means zero noise."""
    if not section:
        return PsdModel()
    if "table_csv" in section:
        extra = set(section) - {"table_csv"}
        if extra:
            raise ConfigError(f"table_csv excludes parametric keys {sorted(extra)}")
        csv_path = Path(section["table_csv"])
        if base_dir is not None and not csv_path.is_absolute():
            csv_path = base_dir / csv_path
        return PsdModel.from_csv(csv_path)
    peaks = tuple(
        SpectralPeak(center=TWO_PI * pk["center_hz"], height=pk["height"],
                     fwhm=TWO_PI * pk["fwhm_hz"])
        for pk in section.get("peaks", []))
    return PsdModel(
        background_amplitude=section.get("background_amplitude", 0.0),
        background_exponent=section.get("background_exponent", 0.0),
        reference_frequency=TWO_PI * section.get("reference_frequency_hz", 1.0),
        white_floor=section.get("white_floor", 0.0),
        peaks=peaks,
        background_cutoff=TWO_PI * section.get("background_cutoff_hz", 0.0))


def build_modulation(section: dict | None) -> ModulationSpec:
    if not section:
        return ModulationSpec()
    tones = tuple(
        (TWO_PI * tone["frequency_hz"], tone["index_rad"], tone.get("phase_rad", 0.0))
        for tone in section.get("tones", []))
    return ModulationSpec(tones=tones)


def build_motion(section: dict | None):
    """Returns (MotionalMode, CoherentStateSpec | None, nbar_max | None)."""
    if not section:
        return None, None, None
    try:
        mode = MotionalMode(frequency=TWO_PI * section["mode_frequency_hz"],
                            lamb_dicke=section["lamb_dicke"],
                            fock_cutoff=section.get("fock_cutoff"))
    except KeyError as exc:
        raise ConfigError(f"motion section needs {exc.args[0]}") from exc
    coherent = CoherentStateSpec(section["nbar"]) if "nbar" in section else None
    return mode, coherent, section.get("nbar_max")


def build_protocol(raw: dict, master_seed: int, base_dir: Path | None = None) -> ProtocolConfig:
    scan = raw.get("scan")
    if not scan:
        raise ConfigError("a [scan] section is required")
    try:
        omegas = TWO_PI * np.asarray(scan["rabi_frequencies_hz"], float)
    except KeyError as exc:
        raise ConfigError("scan.rabi_frequencies_hz is required") from exc
    noise_model = build_psd(raw.get("noise"), base_dir)
    motional = build_psd(raw.get("motional_noise"), base_dir) \
        if "motional_noise" in raw else None
    mode, coherent, _ = build_motion(raw.get("motion"))
    transition = scan.get("transition", "carrier")

    if "lock_times_s" in scan:
        grid = np.asarray(scan["lock_times_s"], float)
        lock_times = tuple(grid for _ in omegas)
    else:
        points = scan.get("time_points", 16)
        hi = scan.get("max_decay_exponent", 2.5)
        lo = scan.get("min_decay_exponent", 0.1)
        lock_times = []
        for om in omegas:
            om_eff = om
            extra = motional if transition == "blue_sideband" else None
            lock_times.append(auto_time_grid(om_eff, noise_model, points=points,
                                             max_exponent=hi, min_exponent=lo,
                                             extra_model=extra))
        lock_times = tuple(lock_times)

    try:
        return ProtocolConfig(
            rabi_frequencies=omegas,
            lock_times=lock_times,
            shots=scan.get("shots", 150),
            n_trajectories=scan.get("trajectories", 200),
            noise_model=noise_model,
            master_seed=master_seed,
            transition=transition,
            modulation=build_modulation(raw.get("modulation")),
            motional_noise_model=motional,
            mode=mode,
            coherent_state=coherent,
            dt_factor=scan.get("dt_factor", 0.01),
        )
    except Exception as exc:
        raise ConfigError(f"invalid scan configuration: {exc}") from exc
