from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest

from swgspd.engine import (
    DcrModel,
    DetectorParams,
    GateClock,
    GateWidthModel,
    HoldOffPolicy,
    PhotonSource,
    TrapModel,
    run_sequence,
)
from swgspd.experiments import (
    InsufficientStatisticsError,
    DegenerateFitError,
    NoPeakError,
    TrapTarget,
    UnreachableTargetError,
    acquisition_for_counts,
    afterpulse_measurement,
    analyze_afterpulse_histogram,
    calibrate_dcr,
    calibrate_gate_width,
    calibrate_traps,
    dcr_pde_curve,
    delay_scan,
    expected_pap,
    extract_fwhm,
    measure_dcr,
    pap_vs_pde_curve,
    pulse_gate_mask,
    stability_run,
    start_stop_histogram,
)

F_G = 1.25e9
T = 1 / F_G


def test_calibrate_dcr_closed_form():
    m = calibrate_dcr([(0.10, 188.0), (0.275, 1200.0)])
    k = math.log(1200 / 188) / 0.175
    assert m.k_pde == pytest.approx(k, rel=1e-12)
    assert m.dcr0_cps == pytest.approx(188 / math.exp(0.10 * k), rel=1e-12)
    assert m.k_pde == pytest.approx(10.6, abs=0.05)
    assert m.dcr0_cps == pytest.approx(65.2, abs=0.1)


def test_calibrate_dcr_flat_and_degenerate():
    m = calibrate_dcr([(0.0, 50.0), (1.0, 50.0)])
    assert m.k_pde == pytest.approx(0.0, abs=1e-12)
    assert m.dcr0_cps == pytest.approx(50.0)
    with pytest.raises(DegenerateFitError):
        calibrate_dcr([(0.1, 188.0), (0.1, 188.0)])
    with pytest.raises(DegenerateFitError):
        calibrate_dcr([(0.1, 188.0)])


def test_gate_width_from_normalized_dcr():
    w = calibrate_gate_width([(0.10, 188 / 1180 / F_G), (0.275, 1200 / 5960 / F_G)])
    assert float(w.width(0.10)) == pytest.approx(127.46e-12, rel=1e-3)
    assert float(w.width(0.275)) == pytest.approx(161.07e-12, rel=1e-3)


# ---------------------------------------------------------------------------
# dark count rate


def test_dcr_identities_exact(presets):
    curves = dcr_pde_curve(presets, [0.05, 0.10, 0.2, 0.275], 10**9, seed=3)
    assert sorted(curves) == sorted(presets)
    for pts in curves.values():
        for p in pts:
            assert p.dcr_per_gate * F_G == p.dcr_cps
            assert p.dcr_normalized_cps * p.duty_cycle == pytest.approx(p.dcr_cps, rel=1e-15)
            assert 0 < p.duty_cycle < 1
            assert p.dcr_normalized_cps >= p.dcr_cps


def test_dcr_zero_model_gives_zero_points():
    p = DetectorParams(223.0, 0.1, DcrModel(0.0, 10.0), GateWidthModel(192e-12, 108e-12))
    pts = dcr_pde_curve({223.0: p}, [0.05, 0.1, 0.3], 10**8, seed=1)[223.0]
    assert all(x.dcr_cps == 0 and x.dcr_normalized_cps == 0 for x in pts)


def test_dcr_curve_independent_of_worker_count(presets):
    a = dcr_pde_curve(presets, [0.1, 0.2], 10**8, seed=9, workers=1)
    b = dcr_pde_curve(presets, [0.1, 0.2], 10**8, seed=9, workers=4)
    assert a == b


# ---------------------------------------------------------------------------
# delay scan


def test_fwhm_recovery_random_widths():
    rng = np.random.default_rng(2024)
    src = PhotonSource(625e3, 1.0)
    n = 80
    step = T / n
    for w in rng.uniform(50e-12, 400e-12, 20):
        p = DetectorParams(223.0, 0.1, DcrModel(188.0, 0.0), GateWidthModel(0.0, w))
        scan = delay_scan(p, src, n, 0, seed=0, analytic=True)
        assert abs(scan.fwhm_s - w) <= step


def test_delay_scan_simulated(p223):
    scan = delay_scan(p223, PhotonSource(), 80, 5 * 10**8, seed=1)
    assert len(scan.delays_s) == len(scan.count_rates_cps) == 80
    assert scan.fwhm_s > 0
    i = int(np.argmax(scan.count_rates_cps))
    assert 0 < i < 79
    assert abs(scan.fwhm_s - p223.gate_width) <= T / 80


def test_delay_scan_no_peak(p223):
    with pytest.raises(NoPeakError):
        delay_scan(p223, PhotonSource(625e3, 0.0), 32, 10**8, seed=1)
    with pytest.raises(ValueError):
        delay_scan(p223, PhotonSource(), 8, 10**8, seed=1)


def test_extract_fwhm_triangle():
    x = np.linspace(-1, 1, 41)
    y = np.maximum(1 - np.abs(x) / 0.4, 0) * 10 + 1
    fwhm, centre, base = extract_fwhm(x, y)
    assert fwhm == pytest.approx(0.4, abs=1e-12)
    assert centre == pytest.approx(0.0, abs=1e-12)
    assert base == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# afterpulse histogram


def _brute_hist(rec, starts, window, bin_gates, hold):
    n_bins = -(-window // bin_gates)
    counts = np.zeros(n_bins, dtype=np.int64)
    live = np.zeros(window)
    for s in starts:
        dead_until = -1
        stops = [g - s for g in rec if s <= g < s + window]
        for j in range(window):
            if j <= dead_until:
                pass
            else:
                live[j] += 1
            if j in stops:
                counts[j // bin_gates] += 1
                dead_until = max(dead_until, j + hold)
    return counts, np.pad(live, (0, n_bins * bin_gates - window)).reshape(n_bins, bin_gates).sum(1)


def test_start_stop_histogram_matches_brute_force():
    rng = np.random.default_rng(0)
    for hold in (0, 5, 40):
        # recorded events are always more than a hold-off apart
        rec = np.cumsum(hold + 1 + rng.geometric(0.05, 200))
        starts = rec[::7]
        c, e = start_stop_histogram(rec, starts, 300, 4, hold)
        cb, eb = _brute_hist(rec, starts, 300, 4, hold)
        assert np.array_equal(c, cb)
        if hold:
            assert np.allclose(e, eb)


def test_histogram_conservation(p223):
    hg = 125
    run = run_sequence(p223, GateClock(), PhotonSource(), HoldOffPolicy(100e-9), 2 * 10**8, 5,
                       record_events=True)
    rec = run.recorded_gates()
    starts = rec[pulse_gate_mask(rec, GateClock(), PhotonSource())]
    counts, _ = start_stop_histogram(rec, starts, 20000, 2, hg)
    pairs = sum(int(np.count_nonzero((rec >= s) & (rec < s + 20000))) for s in starts)
    assert counts.sum() == pairs
    # with the window equal to one gate every start is its own single stop
    c1, _ = start_stop_histogram(rec, starts, 1, 1)
    assert c1.sum() == len(starts)


def test_pulse_gate_mask():
    gates = np.arange(0, 10001)
    hit = pulse_gate_mask(gates, GateClock(), PhotonSource())
    assert list(np.flatnonzero(hit)) == [0, 2000, 4000, 6000, 8000, 10000]


def test_afterpulse_result_invariants(p223):
    hist, r = afterpulse_measurement(p223, acquisition_s=1.0, seed=2)
    assert r.p_ap == r.afterpulse_counts / r.photon_counts
    assert r.p_ap_per_gate == pytest.approx(r.p_ap / (r.window_s * F_G - 125), rel=1e-12)
    assert hist.bin_width_s == pytest.approx(1.6e-9)
    assert len(hist.counts) == 10000
    assert np.all(hist.counts >= 0)


def test_zero_traps_baseline(p223):
    _, r = afterpulse_measurement(p223.without_traps(), acquisition_s=10.0, seed=4)
    assert r.p_ap < 1e-3


def test_insufficient_statistics(p223):
    with pytest.raises(InsufficientStatisticsError):
        afterpulse_measurement(p223, acquisition_s=0.01, seed=1)


def test_analysis_on_synthetic_histogram():
    # flat background 2 per bin plus 100 photon counts in bin 0 and 30 afterpulses
    n = 100
    counts = np.full(n, 2, dtype=np.int64)
    counts[0] += 100
    counts[5] += 30
    photon, after, base = analyze_afterpulse_histogram(counts, np.ones(n), 1, 1000.0, n)
    assert photon == pytest.approx(100.0)
    assert after == pytest.approx(30.0)
    assert base == pytest.approx(2.0)


def test_pap_increases_with_pde(p223):
    src = PhotonSource()
    vals = []
    for pde in (0.10, 0.275):
        q = p223.with_pde(pde)
        _, r = afterpulse_measurement(q, src, HoldOffPolicy(100e-9), acquisition_for_counts(q, src, 2e5), seed=8)
        vals.append(r.p_ap)
    assert 0.033 * 0.8 < vals[0] < vals[1]
    assert 0.033 < vals[1] < 0.20


def test_pap_decreases_with_temperature(presets):
    pts = pap_vs_pde_curve(presets, [0.275], HoldOffPolicy(100e-9), seed=6, photon_counts=3e5)
    by_t = {p.temperature_k: p.p_ap for p in pts}
    assert by_t[223.0] > by_t[233.0] > by_t[243.0]


def test_pap_curve_zero_traps_flat(p223):
    pts = pap_vs_pde_curve({223.0: p223.without_traps()}, [0.05, 0.1, 0.2], HoldOffPolicy(100e-9), seed=1)
    assert all(p.p_ap == 0 for p in pts)


def test_holdoff_monotone_within_one_laser_period(p223):
    # hold-offs shorter than the laser period see only the start's own afterpulses
    q = p223.with_pde(0.10)
    src = PhotonSource()
    acq = acquisition_for_counts(q, src, 3e5)
    vals = [afterpulse_measurement(q, src, HoldOffPolicy(h), acq, seed=12)[1].p_ap
            for h in (50e-9, 100e-9, 200e-9, 400e-9, 800e-9)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_expected_pap_matches_simulation_for_isolated_avalanches():
    # weak traps: first-order formula should be accurate
    p = DetectorParams(223.0, 0.1, DcrModel(1.0, 0.0), GateWidthModel(0.0, 127e-12),
                       TrapModel(0.2, 300e-9, 0.5))
    src = PhotonSource()
    _, r = afterpulse_measurement(p, src, HoldOffPolicy(100e-9), acquisition_for_counts(p, src, 5e5), seed=3)
    # the uniform baseline also removes the other-photon floor from the start's own
    # laser period, where no other photon can be detected
    p_click = -math.expm1(-src.mu * p.pde)
    assert r.p_ap == pytest.approx(expected_pap(p, 100e-9) * (1 - p_click), rel=0.05)


# ---------------------------------------------------------------------------
# stability


def test_stability_zero_rate(p223):
    dark = dataclasses.replace(p223.without_traps(), dcr_model=DcrModel(0.0, 0.0))
    s = stability_run(dark, PhotonSource(625e3, 0.0), 20, seed=1, integration_s=0.01)
    assert np.all(s.counts_10s == 0)
    assert list(s.rescan_marks) == [0, 10]
    assert s.rsd == 0.0


def test_stability_marks_excluded(p223):
    s = stability_run(p223, PhotonSource(), 20, seed=2, integration_s=0.1, scan_gates_per_point=10**7)
    assert len(s.t_min) == len(s.counts_10s) == 20
    assert len(s.steady_counts()) == 18
    with pytest.raises(ValueError):
        stability_run(p223, PhotonSource(), 10, seed=2)


# ---------------------------------------------------------------------------
# trap calibration


def test_calibrate_traps_zero_target(p223):
    out = calibrate_traps({223.0: p223.without_traps()}, [TrapTarget(0.1, 223.0, 100e-9, 0.0)])
    assert out[223.0].product == 0


def test_calibrate_traps_single_target_round_trip(p223):
    base = {223.0: p223.without_traps()}
    tgt = TrapTarget(0.10, 223.0, 100e-9, 0.033)
    out = calibrate_traps(base, [tgt], tau_grid=(0.5e-6,), photon_counts=2e5, iterations=3, seed=1)
    q = dataclasses.replace(p223, trap_model=out[223.0])
    src = PhotonSource()
    _, r = afterpulse_measurement(q, src, HoldOffPolicy(100e-9), acquisition_for_counts(q, src, 5e5), seed=77)
    assert r.p_ap == pytest.approx(0.033, abs=0.005)


def test_calibrate_traps_unreachable(p223):
    # one tau cannot give 3.3% at 100 ns and 3% at 10 us at once
    base = {223.0: p223.without_traps()}
    tgts = [TrapTarget(0.10, 223.0, 100e-9, 0.033), TrapTarget(0.10, 223.0, 10e-6, 0.03)]
    with pytest.raises(UnreachableTargetError) as ei:
        calibrate_traps(base, tgts, tau_grid=(0.2e-6,), photon_counts=3e4, iterations=1)
    assert ei.value.best_residual > 1.0


def test_calibrate_traps_needs_base_preset():
    with pytest.raises(ValueError):
        calibrate_traps({}, [TrapTarget(0.1, 223.0, 100e-9, 0.033)])
