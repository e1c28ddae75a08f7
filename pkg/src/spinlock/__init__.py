"""Spin-locking noise spectroscopy simulator."""

__version__ = "0.1.0"

from .dynamics import (BlochRecord, DecayOperator, DriveConfig,
                       VectorizedDensity, analytic_decay_operator,
                       coherent_evolution, combined_sigma_x, ensemble_average,
                       liouville_superoperator, noise_frame_hamiltonian,
                       propagate_trajectory, second_cumulant_integral)
from .motion import (CoherentStateSpec, CouplingTable, MotionalMode,
                     average_sideband_rabi, coherent_fock_distribution,
                     coupling_table, fock_matrix_element, fock_matrix_elements,
                     optimal_displacement, rabi_spread,
                     sideband_excitation_probability)
from .noise import (CorrelationTable, ModulationSpec, NoiseTrajectory, PsdModel,
                    SpectralPeak, autocorrelation, convert_psd, estimate_psd,
                    evaluate_psd, sample_modulation, synthesize_trajectory)
from .spectroscopy import (DecayFit, DetectionFloor, ProtocolConfig,
                           ScanDataset, SpectrumEstimate, WeakNoiseReport,
                           auto_time_grid, fit_damped_cosine, fit_exponential,
                           fit_scan, frequency_modulation_depth,
                           reconstruct_spectrum, simulate_protocol,
                           weak_noise_check)

__all__ = [
    "__version__",
    # noise
    "PsdModel", "SpectralPeak", "NoiseTrajectory", "ModulationSpec",
    "CorrelationTable", "evaluate_psd", "convert_psd", "synthesize_trajectory",
    "sample_modulation", "estimate_psd", "autocorrelation",
    # dynamics
    "DriveConfig", "BlochRecord", "VectorizedDensity", "DecayOperator",
    "noise_frame_hamiltonian", "propagate_trajectory", "ensemble_average",
    "liouville_superoperator", "second_cumulant_integral",
    "analytic_decay_operator", "coherent_evolution", "combined_sigma_x",
    # motion
    "MotionalMode", "CoherentStateSpec", "CouplingTable", "fock_matrix_element",
    "fock_matrix_elements", "coherent_fock_distribution", "average_sideband_rabi",
    "rabi_spread", "optimal_displacement", "sideband_excitation_probability",
    "coupling_table",
    # spectroscopy
    "ProtocolConfig", "ScanDataset", "DecayFit", "SpectrumEstimate",
    "DetectionFloor", "WeakNoiseReport", "simulate_protocol", "fit_exponential",
    "fit_damped_cosine", "fit_scan", "frequency_modulation_depth",
    "reconstruct_spectrum", "weak_noise_check", "auto_time_grid",
]
