"""Simulator of a 1.25 GHz sine-wave-gated InGaAs/InP single-photon detector.

Modules: ``filters`` and ``chain`` (readout electronics), ``engine`` (gate-level
stochastic detector), ``experiments`` (characterization protocols and
calibration) and ``io``/``cli`` (presets, result files, command line).
"""

__version__ = "0.1.0"
