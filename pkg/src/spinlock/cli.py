"""Command-line entry point.

Subcommands: synthesize | coupling | scan | spectrum | demo-figures.
Every run writes its primary CSV/JSON outputs plus a manifest echoing the
resolved configuration and seed, so campaigns can be reproduced exactly.
Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import (build_modulation, build_motion, build_protocol, build_psd,
                     load_config)
from .dynamics import (DriveConfig, combined_sigma_x, derive_seed,
                       propagate_trajectory)
from .errors import (ConfigError, FitError, InputError, QuadratureError,
                     SearchRangeError, SpinlockError, SynthesisError)
from .motion import (CoherentStateSpec, average_sideband_rabi,
                     coherent_fock_distribution, coupling_table,
                     optimal_displacement, rabi_spread)
from .noise import ModulationSpec, estimate_psd, synthesize_trajectory
from .spectroscopy import (DetectionFloor, ScanDataset, fit_scan,
                           reconstruct_spectrum, simulate_protocol)

TWO_PI = 2.0 * np.pi


def _write_atomic(path: Path, writer):
    """Run ``writer(tmp_path)`` then rename; no partial files on failure."""
    tmp = path.with_name(path.name + ".tmp")
    writer(tmp)
    os.replace(tmp, path)


def _write_csv(path: Path, header, rows):
    def _w(tmp):
        with open(tmp, "w", newline="") as fh:
            fh.write(",".join(header) + "\r\n")
            for row in rows:
                fh.write(",".join(
                    str(v) if isinstance(v, (int, str)) else repr(float(v))
                    for v in row) + "\r\n")
    _write_atomic(path, _w)


def _write_json(path: Path, payload):
    def _w(tmp):
        with open(tmp, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    _write_atomic(path, _w)


def _manifest(out_dir: Path, command: str, raw_config: dict, seed: int,
              threads: int, outputs, elapsed: float):
    payload = {
        "command": command,
        "config": raw_config,
        "seed": seed,
        "threads": threads,
        "outputs": sorted(str(Path(p).name) for p in outputs),
        "versions": {
            "spinlock": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": sys.version.split()[0],
        },
        "elapsed_s": round(elapsed, 3),
    }
    _write_json(out_dir / "run_manifest.json", payload)


def _resolve_seed(raw: dict, args) -> int:
    if args.seed is not None:
        return args.seed
    return raw.get("master_seed", 0)


def _resolve_threads(raw: dict, args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    return max(1, raw.get("threads", 1))


def cmd_synthesize(raw, args, out_dir: Path) -> list[Path]:
    section = raw.get("synthesize")
    if not section:
        raise ConfigError("a [synthesize] section is required")
    try:
        duration = section["duration_s"]
    except KeyError as exc:
        raise ConfigError("synthesize.duration_s is required") from exc
    if "dt_s" in section:
        dt = section["dt_s"]
    elif "sample_rate_hz" in section:
        dt = 1.0 / section["sample_rate_hz"]
    else:
        raise ConfigError("synthesize needs dt_s or sample_rate_hz")
    n_traj = section.get("trajectories", 1)
    model = build_psd(raw.get("noise"), Path(args.config).parent)
    seed = _resolve_seed(raw, args)

    outputs = []
    trajectories = []
    for i in range(n_traj):
        tr = synthesize_trajectory(model, duration, dt, derive_seed(seed, i))
        trajectories.append(tr)
        path = out_dir / f"trajectory_{i:03d}.csv"
        _write_csv(path, ["t_s", "phi_rad"], zip(tr.times, tr.samples))
        outputs.append(path)
    est = estimate_psd(trajectories)
    path = out_dir / "psd_estimate.csv"
    _write_csv(path, ["omega_rad_s", "psd_rad2_s"],
               zip(est.table_omega, est.table_values))
    outputs.append(path)
    return outputs


def cmd_coupling(raw, args, out_dir: Path) -> list[Path]:
    mode, coherent, nbar_max = build_motion(raw.get("motion"))
    if mode is None:
        raise ConfigError("a [motion] section is required")
    table = coupling_table(mode)
    table_path = out_dir / "coupling_table.csv"
    _write_atomic(table_path, table.to_csv)

    eta = mode.lamb_dicke
    warning = None
    try:
        nbar_opt = optimal_displacement(eta, nbar_max=nbar_max)
    except SearchRangeError as exc:
        warning = str(exc)
        print(f"warning: {warning}", file=sys.stderr)
        limit = nbar_max if nbar_max is not None else min(10.0 / eta**2, 50_000.0)
        nbar_opt = float(limit)
    payload = {
        "eta": eta,
        "nbar_opt": nbar_opt,
        "avg_coupling": average_sideband_rabi(eta, nbar_opt),
        "spread": rabi_spread(eta, nbar_opt),
    }
    if warning:
        payload["warning"] = warning
    opt_path = out_dir / "optimum.json"
    _write_json(opt_path, payload)
    return [table_path, opt_path]


def cmd_scan(raw, args, out_dir: Path) -> list[Path]:
    seed = _resolve_seed(raw, args)
    protocol = build_protocol(raw, seed, Path(args.config).parent)
    dataset = simulate_protocol(protocol, threads=_resolve_threads(raw, args))
    path = out_dir / "scan.csv"
    _write_atomic(path, dataset.to_csv)
    return [path]


def cmd_spectrum(raw, args, out_dir: Path) -> list[Path]:
    section = raw.get("spectrum", {})
    scan_path = args.scan or section.get("scan_csv")
    outputs = []
    if scan_path:
        dataset = ScanDataset.from_csv(scan_path)
    else:
        seed = _resolve_seed(raw, args)
        protocol = build_protocol(raw, seed, Path(args.config).parent)
        dataset = simulate_protocol(protocol, threads=_resolve_threads(raw, args))
        path = out_dir / "scan.csv"
        _write_atomic(path, dataset.to_csv)
        outputs.append(path)

    fits = fit_scan(dataset, model=section.get("fit_model", "auto"))
    floor = None
    if "floor_gamma" in section:
        floor = DetectionFloor(gamma=section["floor_gamma"])
    estimate = reconstruct_spectrum(fits, floor=floor)
    spec_path = out_dir / "spectrum.csv"
    _write_atomic(spec_path, estimate.to_csv)
    outputs.append(spec_path)

    report = {}
    for om, fit in sorted(fits.items()):
        report[f"{om:.6f}"] = {
            "model": fit.model,
            "rate_1_s": fit.rate,
            "rate_stderr": fit.rate_stderr,
            "beta_rad": fit.beta,
            "beta_stderr": fit.beta_stderr,
            "amplitude": fit.amplitude,
            "chi2_reduced": fit.chi2_reduced,
            "success": fit.success,
            "flags": list(fit.flags),
        }
    report_path = out_dir / "fit_report.json"
    _write_json(report_path, report)
    outputs.append(report_path)
    return outputs


def cmd_demo_figures(raw, args, out_dir: Path) -> list[Path]:
    seed = _resolve_seed(raw, args)
    demo = raw.get("demo", {})
    shots = demo.get("shots", 150)
    outputs = []

    # decay curves at three spectral densities (locked-state depolarization law)
    omega = TWO_PI * 1000.0
    t = np.linspace(0.0, 0.05, 200)
    rows = []
    for s_phi in (2e-7, 1e-6, 5e-6):
        sx = np.exp(-0.5 * omega**2 * s_phi * t)
        rows += [(s_phi, tt, vv) for tt, vv in zip(t, sx)]
    path = out_dir / "fig_decay_laws.csv"
    _write_csv(path, ["s_phi_rad2_s", "t_s", "sx"], rows)
    outputs.append(path)

    # coupling strength vs phonon number, with the coherent-state weights
    mode, coherent, _ = build_motion(raw.get("motion"))
    if mode is None:
        raise ConfigError("a [motion] section is required for demo figures")
    table = coupling_table(mode)
    nbar0 = coherent.nbar if coherent is not None else 610.0
    p = np.zeros(table.n.size)
    dist = coherent_fock_distribution(CoherentStateSpec(nbar0))
    p[: min(dist.size, p.size)] = dist[: p.size]
    path = out_dir / "fig_coupling_vs_n.csv"
    _write_csv(path, ["n", "carrier", "blue_sideband", "p_n"],
               zip(table.n, table.carrier, table.blue_sideband, p))
    outputs.append(path)

    # averaged sideband coupling and spread vs displacement
    eta = mode.lamb_dicke
    nbars = np.unique(np.concatenate([
        np.geomspace(1.0, 10.0 / eta**2, 120), [nbar0]]))
    path = out_dir / "fig_coupling_vs_nbar.csv"
    _write_csv(path, ["nbar", "avg_coupling", "spread"],
               ((nb, average_sideband_rabi(eta, nb), rabi_spread(eta, nb))
                for nb in nbars))
    outputs.append(path)

    # resonant-tone protocol: three Bloch components with binomial sampling
    om4 = TWO_PI * 5000.0
    beta4 = 0.2
    tones = raw.get("modulation", {}).get("tones", [])
    delta4 = tones[0].get("phase_rad", 1.48) if tones else 1.48
    drive = DriveConfig(rabi_frequency=om4, dt=0.002 / om4)
    grid4 = np.linspace(0.0, 2e-3, 81)
    rec = propagate_trajectory(
        drive, modulation=ModulationSpec(tones=((om4, beta4, delta4),)),
        t_grid=grid4)
    rng = np.random.default_rng(derive_seed(seed, 4))
    rows = []
    for tt, sx, sy, sz in zip(rec.times, rec.sx, rec.sy, rec.sz):
        meas = [2.0 * rng.binomial(shots, np.clip(0.5 * (1 + s), 0, 1)) / shots - 1.0
                for s in (sx, sy, sz)]
        rows.append((tt, *meas, sx, sy, sz))
    path = out_dir / "fig_coherent_modulation.csv"
    _write_csv(path, ["t_s", "sx_meas", "sy_meas", "sz_meas",
                      "sx_theory", "sy_theory", "sz_theory"], rows)
    outputs.append(path)

    # damped-oscillation law: tone plus noise envelope at one probe point
    s_flat = 2e-6
    t5 = np.linspace(0.0, 0.02, 160)
    omega5 = TWO_PI * 1000.0
    rows = [(tt, combined_sigma_x(omega5, 0.1, s_flat, tt),
             np.exp(-0.5 * omega5**2 * s_flat * tt)) for tt in t5]
    path = out_dir / "fig_damped_oscillations.csv"
    _write_csv(path, ["t_s", "sx_product_law", "envelope"], rows)
    outputs.append(path)
    return outputs


_COMMANDS = {
    "synthesize": cmd_synthesize,
    "coupling": cmd_coupling,
    "scan": cmd_scan,
    "spectrum": cmd_spectrum,
    "demo-figures": cmd_demo_figures,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spinlock",
        description="Spin-locking noise spectroscopy simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in _COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", required=True, help="TOML configuration file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the master seed")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--threads", type=int, default=None,
                       help="parallel scan workers")
        if name == "spectrum":
            p.add_argument("--scan", default=None,
                           help="existing scan CSV to fit instead of simulating")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = time.monotonic()
    try:
        raw = load_config(args.config)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        outputs = _COMMANDS[args.command](raw, args, out_dir)
        _manifest(out_dir, args.command, raw, _resolve_seed(raw, args),
                  _resolve_threads(raw, args), outputs,
                  time.monotonic() - started)
    except (ConfigError, InputError, SynthesisError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (QuadratureError, FitError, SearchRangeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except SpinlockError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
