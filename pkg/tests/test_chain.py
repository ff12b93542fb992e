from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from swgspd.chain import (
    AvalancheOutOfRangeError,
    ChainConfig,
    S21Curve,
    avalanche_template,
    chain_latency,
    discriminate,
    feedthrough_amplitudes,
    frequency_response,
    residual_feedthrough_rms,
    simulate_gate_waveform,
)
from swgspd.filters import identity_design

CHAIN = ChainConfig()
T = CHAIN.gate_period_s


def test_passband_gain_and_gate_rejection():
    s = frequency_response(CHAIN, [100e6, 1.25e9])
    assert 39.0 <= s.mag_db[0] <= 41.0
    assert s.mag_db[1] <= -80.0


def test_cascade_additivity():
    f = np.geomspace(1e6, 3e9, 2001)
    one = frequency_response(dataclasses.replace(CHAIN, n_lpf=1, amp_gain_db=0.0, coupling_hz=None), f)
    for n in (1, 2, 3):
        many = frequency_response(dataclasses.replace(CHAIN, n_lpf=n, amp_gain_db=0.0, coupling_hz=None), f)
        assert np.max(np.abs(many.mag_db - n * one.mag_db)) < 1e-9


def test_response_is_sum_of_stage_decibels():
    f = np.linspace(1e6, 3e9, 500)
    s = frequency_response(CHAIN, f)
    coupling = 20 * np.log10(np.abs((1j * f / 1e6) / (1 + 1j * f / 1e6)))
    expect = 2 * CHAIN.lpf.gain_db(f) + 40.0 + coupling
    assert np.allclose(s.mag_db, expect, atol=1e-9)


def test_identity_chain_is_flat():
    chain = ChainConfig(lpf=identity_design(), amp_gain_db=0.0, coupling_hz=None)
    assert np.allclose(frequency_response(chain, np.geomspace(1, 1e10, 50)).mag_db, 0.0)


def test_s21_invariants():
    with pytest.raises(ValueError):
        S21Curve(np.array([1.0, 2.0]), np.array([0.0]))
    with pytest.raises(ValueError):
        S21Curve(np.array([2.0, 1.0]), np.array([0.0, 0.0]))
    with pytest.raises(ValueError):
        frequency_response(CHAIN, [2.0, 1.0])


def test_chain_config_invariants():
    with pytest.raises(ValueError):
        ChainConfig(gate_freq_hz=0.0)
    with pytest.raises(ValueError):
        ChainConfig(amp_gain_db=float("inf"))


def test_feedthrough_residual_matches_trace():
    tr = simulate_gate_waveform(CHAIN, [], 1e-6)
    assert tr.sample_rate_hz >= 10 * CHAIN.gate_freq_hz
    rms = float(np.sqrt(np.mean(tr.samples**2)))
    analytic = residual_feedthrough_rms(CHAIN)
    assert rms == pytest.approx(analytic, rel=1e-3)
    # bounded by input amplitude times the largest stopband gain
    a1, _ = feedthrough_amplitudes(CHAIN)
    f = np.linspace(1.25e9, 2.5e9, 2000)
    h = 10 ** (frequency_response(CHAIN, f).mag_db.max() / 20)
    assert rms <= a1 * h


def test_feedthrough_input_amplitude():
    # R C0 w Vpp/2 for the fundamental, beta/4 of that at 2 f_g
    a1, a2 = feedthrough_amplitudes(CHAIN)
    assert a1 == pytest.approx(50 * 0.5e-12 * 2 * np.pi * 1.25e9 * 5.5)
    assert a2 == pytest.approx(a1 * 0.1 / 4)


def test_post_filter_snr():
    peak, _ = avalanche_template(CHAIN)
    assert peak / residual_feedthrough_rms(CHAIN) > 10


def test_trace_determinism():
    a = simulate_gate_waveform(CHAIN, [0.5e-6], 1e-6, noise_rms_v=1e-3, seed=4)
    b = simulate_gate_waveform(CHAIN, [0.5e-6], 1e-6, noise_rms_v=1e-3, seed=4)
    assert np.array_equal(a.samples, b.samples)
    c = simulate_gate_waveform(CHAIN, [0.5e-6], 1e-6, noise_rms_v=1e-3, seed=5)
    assert not np.array_equal(a.samples, c.samples)


def test_trace_preconditions():
    with pytest.raises(ValueError):
        simulate_gate_waveform(CHAIN, [], 11e-6)
    with pytest.raises(AvalancheOutOfRangeError):
        simulate_gate_waveform(CHAIN, [2e-6], 1e-6)


def test_single_avalanche_recovered():
    t_inj = 400 * T
    tr = simulate_gate_waveform(CHAIN, [t_inj], 1e-6)
    peak, _ = avalanche_template(CHAIN)
    ev = discriminate(tr, peak / 2, CHAIN)
    assert len(ev) == 1
    assert abs(ev[0] - t_inj) <= T


def test_threshold_above_max_gives_nothing():
    tr = simulate_gate_waveform(CHAIN, [400 * T], 1e-6)
    assert len(discriminate(tr, float(tr.samples.max()) * 1.01, CHAIN)) == 0


def test_two_avalanches_ten_gates_apart():
    tr = simulate_gate_waveform(CHAIN, [300 * T, 310 * T], 1e-6)
    peak, _ = avalanche_template(CHAIN)
    ev = discriminate(tr, peak / 2, CHAIN)
    assert len(ev) == 2
    assert np.allclose(ev, [300 * T, 310 * T], atol=T)


def test_discrimination_recall_random_injections():
    # onsets spread over a 127 ps effective gate width around the crest
    rng = np.random.default_rng(1)
    peak, _ = avalanche_template(CHAIN)
    for _ in range(20):
        gates = np.sort(rng.choice(np.arange(20, 2400, 10), 15, replace=False))
        times = gates * T + rng.uniform(-63.5e-12, 63.5e-12, len(gates))
        tr = simulate_gate_waveform(CHAIN, times, 2e-6)
        ev = discriminate(tr, peak / 2, CHAIN)
        assert len(ev) == len(times)
        assert np.all(np.abs(ev - times) <= T)


def test_window_phase_can_reject_events():
    tr = simulate_gate_waveform(CHAIN, [400 * T], 1e-6)
    peak, _ = avalanche_template(CHAIN)
    off = dataclasses.replace(CHAIN, window_phase_s=T / 2)
    assert len(discriminate(tr, peak / 2, off)) == 0


def test_latency_positive_and_overridable():
    assert 0 < chain_latency(CHAIN) < 5e-9
    assert chain_latency(dataclasses.replace(CHAIN, latency_s=1e-9)) == 1e-9


def test_threshold_must_be_positive():
    tr = simulate_gate_waveform(CHAIN, [], 1e-7)
    with pytest.raises(ValueError):
        discriminate(tr, 0.0, CHAIN)


def test_ringing_does_not_retrigger():
    # early onsets give the largest pulses and the strongest ringing
    peak, _ = avalanche_template(CHAIN)
    for ph in np.linspace(-0.25, 0.25, 21):
        tr = simulate_gate_waveform(CHAIN, [(400 + ph) * T], 1e-6)
        assert len(discriminate(tr, peak / 2, CHAIN)) <= 1
