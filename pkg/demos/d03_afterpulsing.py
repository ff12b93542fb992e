"""
Afterpulsing and the count-off time
===================================

Each avalanche fills traps that release carriers over the next few hundred
nanoseconds; a release inside an armed gate can trigger an afterpulse.  The
measurement histograms every recorded event against each laser-triggered
detection, removes the photon peaks and a flat dark baseline, and divides
what is left by the number of photon counts.
"""

from __future__ import annotations

from swgspd.engine import HoldOffPolicy, PhotonSource
from swgspd.experiments import acquisition_for_counts, afterpulse_measurement, expected_pap
from swgspd.io import bundled_presets

presets = bundled_presets()
src = PhotonSource()  # 625 kHz, one photon per pulse on average

# %%
# The start-stop histogram
# ------------------------

p = presets[223.0]
hist, res = afterpulse_measurement(p, src, HoldOffPolicy(100e-9), acquisition_for_counts(p, src, 3e5), seed=5)
print(f"photon counts {res.photon_counts}, afterpulse counts {res.afterpulse_counts}")
print(f"p_ap = {100 * res.p_ap:.2f}%  ({res.p_ap_per_gate:.2e} per gate)")
coarse = hist.counts[: 1000].reshape(20, 50).sum(axis=1)
for i, c in enumerate(coarse):
    print(f"  {i * 80:5d}-{i * 80 + 80:5d} ns {c:7d}")

# %%
# Temperature and efficiency
# --------------------------
# Warmer devices detrap faster, so fewer carriers survive into later gates.

for T, pde in ((223.0, 0.275), (233.0, 0.275), (243.0, 0.275)):
    q = presets[T].with_pde(pde)
    _, r = afterpulse_measurement(q, src, HoldOffPolicy(100e-9), acquisition_for_counts(q, src, 3e5), seed=6)
    print(f"{T:.0f} K, pde {pde}: p_ap = {100 * r.p_ap:.2f}%  (first-order estimate "
          f"{100 * expected_pap(q, 100e-9):.2f}%)")

# %%
# Count-off sweep
# ---------------
# Within one laser period a longer hold-off simply discards more of the
# decaying release tail.  Past 1.6 us the next laser pulses arrive while the
# detector is still counted off.  Those avalanches are not recorded but
# still fill traps, so afterpulses come back once counting resumes.  At
# 10 us the last unrecorded avalanche is only 0.4 us before re-arm, and
# p_ap rises again above its 3 us value.

holds = [100e-9, 300e-9, 1e-6, 3e-6, 10e-6]
acq = acquisition_for_counts(p, src, 1e6)
for i, h in enumerate(holds):
    _, r = afterpulse_measurement(p, src, HoldOffPolicy(h), acq, seed=20 + i)
    print(f"  hold-off {h * 1e9:6.0f} ns: p_ap = {100 * r.p_ap:6.3f}%  ({r.p_ap_per_gate:.2e}/gate)")
print(f"  dark counts per gate for comparison: {p.dcr_cps / 1.25e9:.2e}")
