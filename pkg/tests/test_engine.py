from __future__ import annotations

import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from swgspd.engine import (
    DcrModel,
    DetectorParams,
    EngineState,
    EventBufferOverflow,
    GateClock,
    GateWidthModel,
    HoldOffPolicy,
    PhotonSource,
    TrapModel,
    gate_transmission,
    per_gate_probabilities,
    run_sequence,
    set_delay,
    spawn_seeds,
    trap_update,
)

F_G = 1.25e9
WIDTH = GateWidthModel(192.1e-12, 108.25e-12)


def flat_dcr(cps):
    return DcrModel(cps, 0.0)


def params(dcr=188.0, traps=TrapModel(), pde=0.10):
    return DetectorParams(223.0, pde, flat_dcr(dcr), WIDTH, traps)


# ---------------------------------------------------------------------------
# per-gate probabilities


def test_preset_dark_probability(p223):
    _, p_dark, _ = per_gate_probabilities(p223, GateClock(), PhotonSource.off(), EngineState(), 0)
    assert p_dark == pytest.approx(1.5e-7, rel=0.05)


def test_no_photons_when_mu_zero():
    src = PhotonSource(625e3, 0.0)
    for g in (0, 1, 2000, 4000):
        assert per_gate_probabilities(params(), GateClock(), src, EngineState(), g)[0] == 0.0


def test_half_transmission_at_half_fwhm():
    p = params()
    w = p.gate_width
    assert float(gate_transmission(w / 2, w)) == pytest.approx(0.5, abs=1e-12)
    # a pulse shifted by half the width sees eta/2
    clock = set_delay(GateClock(), w / 2)
    pp, _, _ = per_gate_probabilities(p, clock, PhotonSource(625e3, 1.0), EngineState(), 0)
    assert pp == pytest.approx(-math.expm1(-p.pde / 2), rel=1e-9)


def test_photon_only_on_pulse_gates():
    src = PhotonSource(625e3, 1.0)
    ps = [per_gate_probabilities(params(), GateClock(), src, EngineState(), g)[0] for g in range(0, 4001)]
    hits = np.flatnonzero(ps)
    assert list(hits) == [0, 2000, 4000]


def test_probability_sanity_random_configs():
    rng = np.random.default_rng(7)
    for _ in range(10_000):
        pde = rng.uniform(0, 1)
        w = rng.uniform(10e-12, 700e-12)
        tm = TrapModel(rng.exponential(50), rng.uniform(1e-9, 1e-5), rng.uniform(0, 1))
        p = DetectorParams(223.0, pde, DcrModel(rng.exponential(1e5), rng.normal(0, 5)),
                           GateWidthModel(0.0, w), tm)
        clock = GateClock(F_G, 0, rng.uniform(0, 0.8e-9))
        src = PhotonSource(625e3 * rng.integers(1, 50), rng.exponential(5), rng.exponential(50e-12))
        state = EngineState(rng.exponential(100))
        probs = per_gate_probabilities(p, clock, src, state, int(rng.integers(0, 10**6)))
        assert all(0.0 <= x <= 1.0 for x in probs)


@settings(max_examples=300, deadline=None)
@given(pde=st.floats(0, 1), mu=st.floats(0, 100), pop=st.floats(0, 1e6),
       ptrig=st.floats(0, 1), tau=st.floats(1e-10, 1e-3), gate=st.integers(0, 10**9))
def test_probability_sanity_fuzz(pde, mu, pop, ptrig, tau, gate):
    p = params(pde=pde, traps=TrapModel(1.0, tau, ptrig))
    probs = per_gate_probabilities(p, GateClock(), PhotonSource(625e3, mu), EngineState(pop), gate)
    assert all(0.0 <= x <= 1.0 for x in probs)


# ---------------------------------------------------------------------------
# trap update


def test_trap_decay_one_gate():
    p = params(traps=TrapModel(20.0, 1e-6, 0.5))
    s = trap_update(EngineState(10.0), 0, False, p)
    assert s.trap_population == pytest.approx(10 * math.exp(-0.0008), rel=1e-12)
    assert s.trap_population == pytest.approx(9.992, abs=1e-3)


def test_trap_fill_expected_mode():
    p = params(traps=TrapModel(20.0, 1e-6, 0.5))
    s = trap_update(EngineState(0.0), 0, True, p)
    assert s.trap_population == 20.0


def test_trap_exact_mode_is_integer_and_non_increasing():
    p = params(traps=TrapModel(20.0, 50e-9, 0.5))
    rng = np.random.default_rng(3)
    s = trap_update(EngineState(0.0), 0, True, p, rng=rng)
    pops = [s.trap_population]
    for g in range(1, 300):
        s = trap_update(s, g, False, p, rng=rng)
        pops.append(s.trap_population)
    assert all(float(x).is_integer() for x in pops)
    assert all(b <= a for a, b in zip(pops, pops[1:]))


def test_fill_exponent_scaling():
    tm = TrapModel(2.0, 1e-6, 0.5, fill_exponent=1.0, pde_ref=0.1)
    assert tm.fill(0.2) == pytest.approx(4.0)
    assert tm.fill(0.0) == 0.0


# ---------------------------------------------------------------------------
# run_sequence


def test_dark_counts_one_second():
    r = run_sequence(params(188.0), GateClock(), PhotonSource.off(), HoldOffPolicy(), int(1.25e9), 11)
    assert abs(r.counts.recorded["dark"] - 188) <= 3 * math.sqrt(188)


@pytest.mark.parametrize("method", ["fast", "naive"])
def test_rate_identity(method):
    n = 10**7 if method == "naive" else 10**9
    p = params(1e5)
    r = run_sequence(p, GateClock(), PhotonSource.off(), HoldOffPolicy(0.0), n, 5, method=method)
    mean = 1e5 / F_G * n
    assert abs(r.counts.recorded_total - mean) <= 3 * math.sqrt(mean)


def test_infinite_holdoff_records_at_most_one():
    r = run_sequence(params(1e6), GateClock(), PhotonSource(), HoldOffPolicy(math.inf), 10**7, 2)
    assert r.counts.recorded_total <= 1
    assert r.counts.total > 1


def test_exactly_n_gates_simulated():
    # one event per gate at p_dark close to 1
    p = params(F_G * 0.999999)
    for method in ("fast", "naive"):
        r = run_sequence(p, GateClock(), PhotonSource.off(), HoldOffPolicy(0.0), 1000, 1,
                         record_events=True, method=method)
        assert r.gate_index.min() >= 0 and r.gate_index.max() <= 999
        assert len(np.unique(r.gate_index)) == len(r.gate_index)


CONFIGS = {
    # dark only: long geometric skips
    "dark": (params(6.25e4), PhotonSource.off(), HoldOffPolicy(100e-9)),
    # laser pulses every 2000 gates, no traps
    "source": (params(1e4), PhotonSource(625e3, 1.0), HoldOffPolicy(100e-9)),
    # traps above the cut-off between pulses, with hold-off
    "traps": (params(1e4, TrapModel(4.0, 200e-9, 0.5)), PhotonSource(625e3, 1.0), HoldOffPolicy(100e-9)),
    # non-integer pulse spacing and zero hold-off
    "fractional": (params(3e4, TrapModel(10.0, 1e-6, 0.5)), PhotonSource(1.7e6, 2.0), HoldOffPolicy(0.0)),
}


@pytest.mark.parametrize("name", list(CONFIGS))
def test_skip_sampling_matches_naive_loop(name):
    p, src, ho = CONFIGS[name]
    seeds = spawn_seeds(1000 + len(name), 400)
    fast = [run_sequence(p, GateClock(), src, ho, 10**6, s, method="fast") for s in seeds[:200]]
    naive = [run_sequence(p, GateClock(), src, ho, 10**6, s, method="naive") for s in seeds[200:]]
    for key in ("recorded_total", "total"):
        a = [getattr(r.counts, key) for r in fast]
        b = [getattr(r.counts, key) for r in naive]
        assert stats.ks_2samp(a, b).pvalue > 0.01, key
    if p.trap_model.product > 0:
        a = [r.counts.unrecorded["afterpulse"] + r.counts.recorded["afterpulse"] for r in fast]
        b = [r.counts.unrecorded["afterpulse"] + r.counts.recorded["afterpulse"] for r in naive]
        assert stats.ks_2samp(a, b).pvalue > 0.01


def test_count_off_only_relabels_without_traps():
    p = params(2e5)
    for method in ("fast", "naive"):
        totals = set()
        for ho in (0.0, 100e-9, 1e-6, 10e-6):
            r = run_sequence(p, GateClock(), PhotonSource(), HoldOffPolicy(ho), 2 * 10**6, 9,
                             record_events=True, method=method)
            totals.add((r.counts.total, tuple(r.gate_index)))
        assert len(totals) == 1


def test_dark_rate_independent_of_holdoff_and_phase():
    p = params(188.0)
    rates = []
    for ho, ph in ((50e-9, 0.0), (10e-6, 0.0), (100e-9, 0.4e-9)):
        r = run_sequence(p, GateClock(F_G, 0, ph), PhotonSource.off(), HoldOffPolicy(ho), 10**11, 3)
        rates.append(r.counts.total / r.duration_s)
    for x in rates:
        assert abs(x - 188) < 3 * math.sqrt(188 / 80)


def test_holdoff_suppresses_afterpulses():
    p = params(1e3, TrapModel(1.0, 200e-9, 0.5))
    rec = []
    for ho in (0.0, 100e-9, 1e-6):
        r = run_sequence(p, GateClock(), PhotonSource(), HoldOffPolicy(ho), 10**9, 4)
        rec.append(r.counts.recorded["afterpulse"])
    assert rec[0] > rec[1] > rec[2]


def test_determinism():
    p, src, ho = CONFIGS["traps"]
    a = run_sequence(p, GateClock(), src, ho, 10**6, 42, record_events=True)
    b = run_sequence(p, GateClock(), src, ho, 10**6, 42, record_events=True)
    assert np.array_equal(a.gate_index, b.gate_index)
    assert np.array_equal(a.cause, b.cause)
    assert np.array_equal(a.recorded, b.recorded)


def test_exact_trap_mode_agrees_in_mean():
    p = params(1e3, TrapModel(4.0, 200e-9, 0.5))
    seeds = spawn_seeds(5, 60)
    ex = [run_sequence(p, GateClock(), PhotonSource(), HoldOffPolicy(), 2 * 10**6, s,
                       trap_mode="exact").counts.total for s in seeds[:30]]
    ev = [run_sequence(p, GateClock(), PhotonSource(), HoldOffPolicy(), 2 * 10**6, s,
                       method="naive").counts.total for s in seeds[30:]]
    assert abs(np.mean(ex) - np.mean(ev)) < 4 * math.sqrt((np.var(ex) + np.var(ev)) / 30)


def test_event_buffer_overflow():
    with pytest.raises(EventBufferOverflow):
        run_sequence(params(1e8), GateClock(), PhotonSource.off(), HoldOffPolicy(0.0), 10**5, 1,
                     record_events=True, event_cap=10)


def test_ndjson_export(tmp_path):
    r = run_sequence(params(1e6), GateClock(), PhotonSource(), HoldOffPolicy(), 10**5, 1, record_events=True)
    path = tmp_path / "events.ndjson"
    r.write_ndjson(path)
    lines = path.read_text().splitlines()
    assert len(lines) == len(r.gate_index) > 0
    rec = json.loads(lines[0])
    assert set(rec) == {"gate_index", "t_s", "cause", "recorded"}
    assert rec["cause"] in ("photon", "dark", "afterpulse")
    assert rec["t_s"] == pytest.approx(rec["gate_index"] / F_G)


@pytest.mark.parametrize("bad", [
    lambda: DetectorParams(223.0, 1.5, flat_dcr(1.0), WIDTH),
    lambda: DetectorParams(223.0, 0.1, DcrModel(-1.0, 0.0), WIDTH),
    lambda: TrapModel(-1.0),
    lambda: TrapModel(1.0, 0.0),
    lambda: TrapModel(1.0, 1e-6, 1.5),
    lambda: GateClock(F_G, 0, 1e-9),
    lambda: HoldOffPolicy(-1.0),
    lambda: PhotonSource(625e3, -1.0),
])
def test_type_invariants(bad):
    with pytest.raises(ValueError):
        bad()


def test_seed_streams_independent_of_count():
    assert spawn_seeds(3, 5) == spawn_seeds(3, 10)[:5]
    assert len(set(spawn_seeds(3, 1000))) == 1000
