"""
Readout chain: from gate feed-through to discriminated avalanches
=================================================================

A SPAD gated by a 1.25 GHz sine wave answers every gate with a capacitive
feed-through current far larger than a millivolt avalanche signal.  The
readout strips it with two identical low-pass filters and a 40 dB amplifier.
This script sizes the filter, looks at the net transmission and pushes a
few avalanches through the chain.
"""

from __future__ import annotations

import numpy as np

from swgspd.chain import (
    ChainConfig,
    avalanche_template,
    chain_latency,
    discriminate,
    feedthrough_amplitudes,
    frequency_response,
    residual_feedthrough_rms,
    simulate_gate_waveform,
)
from swgspd.filters import FilterSpec, check_design, chebyshev1_min_order, elliptic_min_order, synth_lowpass

# %%
# Filter order
# ------------
# Pass up to 1 GHz with 1 dB ripple, reject the gate fundamental by 60 dB.
# The elliptic family needs far fewer poles than Chebyshev for this
# narrow transition band.

spec = FilterSpec(1e9, 1.25e9, 60.0, 1.0)
print(f"minimum elliptic order  : {elliptic_min_order(1.0, 60.0, 1.25):.2f}")
print(f"minimum Chebyshev order : {chebyshev1_min_order(1.0, 60.0, 1.25):.2f}")

lpf = synth_lowpass(spec)
print(f"chosen design           : {lpf.family}, order {lpf.order}, stable={lpf.is_stable()}")
print(f"meets spec on 1e4 grid  : {check_design(lpf, spec)}")
print(f"rejection at 1.25 GHz   : {-lpf.gain_db([1.25e9])[0]:.1f} dB")

# %%
# Net S21
# -------
# Two filters in cascade double the rejection; the amplifier adds 40 dB
# in the passband.

chain = ChainConfig()
curve = frequency_response(chain, np.array([10e6, 100e6, 500e6, 1e9, 1.25e9, 2.5e9]))
for f, g in zip(curve.freqs_hz, curve.mag_db):
    print(f"  S21({f / 1e9:5.2f} GHz) = {g:7.1f} dB")

# %%
# Feed-through versus avalanche
# -----------------------------

a1, a2 = feedthrough_amplitudes(chain)
peak, _ = avalanche_template(chain)
print(f"feed-through at the input: {a1 * 1e3:.0f} mV at f, {a2 * 1e3:.1f} mV at 2f")
print(f"residual at the output   : {residual_feedthrough_rms(chain) * 1e3:.3f} mV rms")
print(f"avalanche peak at output : {peak * 1e3:.0f} mV")
print(f"chain latency            : {chain_latency(chain) * 1e9:.3f} ns")

# %%
# A trace with three avalanches
# -----------------------------
# Onsets are snapped to the active half of their gate; the discriminator
# refers crossings back to the input by subtracting the latency.  The
# 50 uV of input noise becomes about 5 mV after the amplifier.

period = chain.gate_period_s
times = [5 * period, 200 * period + 20e-12, 600 * period - 30e-12]
trace = simulate_gate_waveform(chain, times, 800 * period, noise_rms_v=50e-6, seed=3)
found = discriminate(trace, 0.5 * peak, chain)
print(f"output noise: {np.std(trace.samples[:100 * chain.samples_per_gate]) * 1e3:.1f} mV rms")
print(f"{len(found)} events for {len(times)} avalanches")
for t_in, t_out in zip(times, found):
    print(f"  avalanche at gate {t_in / period:6.2f} -> detected at gate {t_out / period:6.2f}")
