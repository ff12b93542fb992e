"""Readout chain: S21 cascade, gated SPAD waveform, avalanche discrimination.

The chain is LPF -> two-stage LNA -> LPF behind an AC-coupling capacitor.
Filtering of simulated traces is done on the trace's discrete spectrum using
the analog transfer function directly, so nothing is ever bilinear-warped.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft

from .filters import FilterDesign, FilterSpec, synth_lowpass


class AvalancheOutOfRangeError(ValueError):
    pass


def default_lpf() -> FilterDesign:
    return synth_lowpass(FilterSpec(1.0e9, 1.25e9, 60.0, 1.0, max_order=12))


@dataclass(frozen=True)
class ChainConfig:
    lpf: FilterDesign = field(default_factory=default_lpf)
    n_lpf: int = 2
    amp_gain_db: float = 40.0
    gate_freq_hz: float = 1.25e9
    gate_amplitude_vpp: float = 11.0
    bias_voltage_v: float = 65.0
    # first-order AC-coupling high-pass corner; None disables it
    coupling_hz: float | None = 1.0e6
    load_ohm: float = 50.0
    spad_capacitance_f: float = 0.5e-12
    cap_nonlinearity: float = 0.1
    avalanche_peak_a: float = 100e-6
    avalanche_rise_s: float = 20e-12
    avalanche_decay_s: float = 200e-12
    samples_per_gate: int = 20
    # gate crest time modulo the gate period
    gate_phase_s: float = 0.0
    # centre of the coincidence window relative to the crest, after latency correction
    window_phase_s: float = 0.0
    # chain propagation delay; None -> measured from the avalanche template
    latency_s: float | None = None
    # comparator re-trigger inhibit; masks the filters' post-pulse ringing
    retrigger_inhibit_s: float = 4e-9

    def __post_init__(self):
        if not self.gate_freq_hz > 0:
            raise ValueError("gate_freq_hz must be > 0")
        if not math.isfinite(self.amp_gain_db):
            raise ValueError("amp_gain_db must be finite")
        if self.samples_per_gate < 10:
            raise ValueError("samples_per_gate must be >= 10")

    @property
    def gate_period_s(self) -> float:
        return 1.0 / self.gate_freq_hz


@dataclass(frozen=True)
class S21Curve:
    freqs_hz: np.ndarray
    mag_db: np.ndarray

    def __post_init__(self):
        if len(self.freqs_hz) != len(self.mag_db):
            raise ValueError("freqs_hz and mag_db lengths differ")
        if len(self.freqs_hz) > 1 and np.any(np.diff(self.freqs_hz) <= 0):
            raise ValueError("freqs_hz must be strictly ascending")


@dataclass(frozen=True)
class WaveformTrace:
    sample_rate_hz: float
    samples: np.ndarray
    t0_s: float = 0.0

    @property
    def times(self) -> np.ndarray:
        return self.t0_s + np.arange(len(self.samples)) / self.sample_rate_hz


def coupling_response(chain: ChainConfig, freqs_hz) -> np.ndarray:
    f = np.asarray(freqs_hz, dtype=float)
    if chain.coupling_hz is None:
        return np.ones_like(f, dtype=complex)
    x = 1j * f / chain.coupling_hz
    return x / (1.0 + x)


def chain_response(chain: ChainConfig, freqs_hz) -> np.ndarray:
    """Complex end-to-end transfer function."""
    h = chain.lpf.response(freqs_hz) ** chain.n_lpf
    return h * 10.0 ** (chain.amp_gain_db / 20.0) * coupling_response(chain, freqs_hz)


def frequency_response(chain: ChainConfig, freqs_hz) -> S21Curve:
    f = np.asarray(freqs_hz, dtype=float)
    if np.any(f <= 0) or (len(f) > 1 and np.any(np.diff(f) <= 0)):
        raise ValueError("freqs must be positive and strictly ascending")
    mag = chain.n_lpf * chain.lpf.gain_db(f) + chain.amp_gain_db
    if chain.coupling_hz is not None:
        mag = mag + 20.0 * np.log10(np.abs(coupling_response(chain, f)))
    return S21Curve(f, mag)


def feedthrough_amplitudes(chain: ChainConfig) -> tuple[float, float]:
    """Input-side voltage amplitudes of the fundamental and second harmonic.

    i = C0 (1 + beta V/Vpp) dV/dt with V = (Vpp/2) cos(wt) gives a fundamental of
    C0 w Vpp/2 and a 2f term beta/4 times that.
    """
    w = 2.0 * math.pi * chain.gate_freq_hz
    a1 = chain.load_ohm * chain.spad_capacitance_f * w * chain.gate_amplitude_vpp / 2.0
    return a1, a1 * chain.cap_nonlinearity / 4.0


def residual_feedthrough_rms(chain: ChainConfig) -> float:
    """Analytic RMS of the feed-through left at the chain output."""
    a1, a2 = feedthrough_amplitudes(chain)
    h = np.abs(chain_response(chain, [chain.gate_freq_hz, 2.0 * chain.gate_freq_hz]))
    return float(math.sqrt(((a1 * h[0]) ** 2 + (a2 * h[1]) ** 2) / 2.0))


def _gate_voltage(chain: ChainConfig, t: np.ndarray):
    w = 2.0 * math.pi * chain.gate_freq_hz
    theta = w * (t - chain.gate_phase_s)
    half = chain.gate_amplitude_vpp / 2.0
    return half * np.cos(theta), -half * w * np.sin(theta)


def _feedthrough(chain: ChainConfig, t: np.ndarray) -> np.ndarray:
    v, dv = _gate_voltage(chain, t)
    c = chain.spad_capacitance_f * (1.0 + chain.cap_nonlinearity * v / chain.gate_amplitude_vpp)
    return chain.load_ohm * c * dv


def _avalanche_onset(chain: ChainConfig, t_req: float) -> tuple[float, float]:
    """Snap a requested time into an active half-cycle; return (onset, quench)."""
    period = chain.gate_period_s
    k = round((t_req - chain.gate_phase_s) / period)
    crest = chain.gate_phase_s + k * period
    if t_req < crest - period / 4:
        onset = crest - period / 4
    elif t_req >= crest + period / 4:
        crest += period
        onset = crest - period / 4
    else:
        onset = t_req
    return onset, crest + period / 4


def _avalanche_current(chain: ChainConfig, t: np.ndarray, onsets) -> np.ndarray:
    tr, td = chain.avalanche_rise_s, chain.avalanche_decay_s
    x_pk = tr * math.log1p(td / tr)
    norm = chain.avalanche_peak_a / ((1.0 - math.exp(-x_pk / tr)) * math.exp(-x_pk / td))
    out = np.zeros_like(t)
    dt = t[1] - t[0]
    for onset, quench in onsets:
        i0 = max(int(math.ceil((onset - t[0]) / dt)), 0)
        i1 = min(int(math.ceil((quench - t[0]) / dt)), len(t))
        if i0 >= i1:
            continue
        x = t[i0:i1] - onset
        out[i0:i1] += norm * (1.0 - np.exp(-x / tr)) * np.exp(-x / td)
    return out


def _filter_periodic(chain: ChainConfig, x: np.ndarray, fs: float) -> np.ndarray:
    n = len(x)
    f = sfft.rfftfreq(n, 1.0 / fs)
    return sfft.irfft(sfft.rfft(x) * chain_response(chain, f), n)


def _filter_linear(chain: ChainConfig, x: np.ndarray, fs: float) -> np.ndarray:
    n = len(x)
    m = sfft.next_fast_len(4 * n)
    f = sfft.rfftfreq(m, 1.0 / fs)
    return sfft.irfft(sfft.rfft(x, m) * chain_response(chain, f), m)[:n]


def simulate_gate_waveform(chain: ChainConfig, avalanche_times, duration_s: float,
                           noise_rms_v: float = 0.0, seed: int = 0) -> WaveformTrace:
    """Output trace of the chain for a gated SPAD over ``duration_s``.

    The record is rounded up to a whole number of gate periods so the
    periodic feed-through is filtered exactly in steady state; avalanche
    pulses and noise are filtered as a causal (zero-padded) convolution.
    """
    if not 0 < duration_s <= 10e-6:
        raise ValueError("duration_s must be in (0, 10 us]")
    times = np.asarray(avalanche_times, dtype=float).ravel()
    if np.any((times < 0) | (times > duration_s)):
        raise AvalancheOutOfRangeError("avalanche time outside [0, duration_s]")

    n_gates = math.ceil(duration_s * chain.gate_freq_hz - 1e-9)
    fs = chain.samples_per_gate * chain.gate_freq_hz
    n = n_gates * chain.samples_per_gate
    t = np.arange(n) / fs

    y = _filter_periodic(chain, _feedthrough(chain, t), fs)
    onsets = [_avalanche_onset(chain, float(ta)) for ta in times]
    x = _avalanche_current(chain, t, onsets) * chain.load_ohm
    if noise_rms_v > 0:
        rng = np.random.default_rng(seed)
        x = x + rng.normal(0.0, noise_rms_v, n)
    if onsets or noise_rms_v > 0:
        y = y + _filter_linear(chain, x, fs)
    return WaveformTrace(fs, y, 0.0)


@functools.lru_cache(maxsize=32)
def avalanche_template(chain: ChainConfig) -> tuple[float, float]:
    """(peak output voltage, onset-to-half-peak delay) for one avalanche at a crest."""
    fs = chain.samples_per_gate * chain.gate_freq_hz
    n_gates = 64
    t = np.arange(n_gates * chain.samples_per_gate) / fs
    onset = chain.gate_phase_s + 8 * chain.gate_period_s
    x = _avalanche_current(chain, t, [(onset, onset + chain.gate_period_s / 4)]) * chain.load_ohm
    y = _filter_linear(chain, x, fs)
    i_pk = int(np.argmax(y))
    peak = float(y[i_pk])
    half = 0.5 * peak
    i = i_pk
    while i > 0 and y[i - 1] >= half:
        i -= 1
    t_half = t[i - 1] + (half - y[i - 1]) / (y[i] - y[i - 1]) / fs
    return peak, float(t_half - onset)


def chain_latency(chain: ChainConfig) -> float:
    return chain.latency_s if chain.latency_s is not None else avalanche_template(chain)[1]


def discriminate(trace: WaveformTrace, threshold_v: float, chain: ChainConfig) -> np.ndarray:
    """Gate-coincident rising-edge crossings of ``threshold_v``.

    Crossings closer than ``retrigger_inhibit_s`` to the previous crossing
    are ignored.  The remaining times are referred back to the chain input by
    subtracting the chain latency; crossings outside the half-period
    coincidence window are dropped and at most one event is kept per gate.
    """
    if not threshold_v > 0:
        raise ValueError("threshold_v must be > 0")
    y = np.asarray(trace.samples)
    idx = np.flatnonzero((y[:-1] < threshold_v) & (y[1:] >= threshold_v)) + 1
    if idx.size == 0:
        return np.empty(0)
    frac = (threshold_v - y[idx - 1]) / (y[idx] - y[idx - 1])
    t_cross = trace.t0_s + (idx - 1 + frac) / trace.sample_rate_hz
    if chain.retrigger_inhibit_s > 0:
        keep = np.ones(len(t_cross), dtype=bool)
        last = -np.inf
        for i, t in enumerate(t_cross):
            # any crossing, accepted later or not, re-arms the inhibit
            keep[i] = t - last >= chain.retrigger_inhibit_s
            last = t
        t_cross = t_cross[keep]
    t_in = t_cross - chain_latency(chain)

    period = chain.gate_period_s
    rel = t_in - chain.gate_phase_s - chain.window_phase_s
    k = np.round(rel / period)
    offset = rel - k * period
    keep = (offset >= -period / 4) & (offset < period / 4)
    t_in, k = t_in[keep], k[keep]
    _, first = np.unique(k, return_index=True)
    return t_in[np.sort(first)]
