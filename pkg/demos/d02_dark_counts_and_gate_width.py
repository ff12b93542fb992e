"""
Dark counts, duty cycle and the effective gating width
======================================================

Dark counts are reported three ways: raw counts per second, per gate, and
normalized by the duty cycle (the fraction of time the detector is armed).
The duty cycle follows from the effective gating width, which is measured by
scanning a laser pulse across the gate.
"""

from __future__ import annotations

from swgspd.engine import HoldOffPolicy, PhotonSource
from swgspd.experiments import dcr_pde_curve, delay_scan
from swgspd.io import bundled_presets

presets = bundled_presets()
p223 = presets[223.0]

# %%
# DCR against detection efficiency
# --------------------------------
# Ten simulated seconds per point (1.25e10 gates); skip sampling makes this cheap.

curves = dcr_pde_curve(presets, [0.05, 0.10, 0.20, 0.275], int(10 * 1.25e9), seed=1)
for T, pts in curves.items():
    print(f"{T:.0f} K")
    for pt in pts:
        print(f"  pde {pt.pde:5.3f}: {pt.dcr_cps:8.1f} cps  {pt.dcr_per_gate:.2e}/gate  "
              f"duty {pt.duty_cycle:.3f}  normalized {pt.dcr_normalized_cps:8.0f} cps")

# %%
# Delay scan
# ----------
# 80 delays across one 800 ps gate period.  The dark rate measured with
# the laser blocked is subtracted before reading off the half maximum.

scan = delay_scan(p223, PhotonSource(), 80, int(0.4 * 1.25e9), seed=2, holdoff=HoldOffPolicy(100e-9))
print(f"model gate width : {p223.gate_width * 1e12:.1f} ps")
print(f"scanned FWHM     : {scan.fwhm_s * 1e12:.1f} ps (10 ps grid, laser pulse included)")
print(f"dark baseline    : {scan.baseline_cps:.0f} cps")
peak = scan.count_rates_cps.max()
for d, r in zip(scan.delays_s[30:50], scan.count_rates_cps[30:50]):
    print(f"  {d * 1e12:7.1f} ps  {r:9.0f} cps  " + "#" * int(40 * r / peak))
