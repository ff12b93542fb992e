"""Gate-level stochastic model of a sine-wave-gated InGaAs/InP SPAD.

Every gate carries three independent avalanche hazards:

* photon: ``mu * eta * G(delay)`` on the gate nearest a source pulse,
* dark: ``-log(1 - DCR / f_g)``,
* afterpulse: ``p_trigger * N * (1 - exp(-dt/tau))`` for ``N`` trapped carriers.

A gate fires with probability ``1 - exp(-h)`` for total hazard ``h`` and the
cause is split in proportion to the hazards.  Between source pulses the
expected trap population decays geometrically, so the cumulative hazard over
a stretch of gates has a closed form and the next avalanche can be drawn by
inversion instead of visiting each gate.

Hold-off is count-off: the detector keeps gating, avalanches inside the
hold-off still happen and still fill traps, they are just not recorded.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from typing import Iterator

import numba
import numpy as np

CAUSES = ("photon", "dark", "afterpulse")
PHOTON, DARK, AFTERPULSE = 0, 1, 2

# expected releases/gate below which the afterpulse hazard is dropped
EPS_TRAP = 1e-12
FOUR_LN2 = 4.0 * math.log(2.0)
FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


class EventBufferOverflow(RuntimeError):
    pass


@dataclass(frozen=True)
class DcrModel:
    dcr0_cps: float
    k_pde: float

    def rate(self, pde):
        return self.dcr0_cps * np.exp(self.k_pde * np.asarray(pde, dtype=float))


@dataclass(frozen=True)
class GateWidthModel:
    a_s_per_unit_pde: float
    b_s: float

    def width(self, pde):
        return self.a_s_per_unit_pde * np.asarray(pde, dtype=float) + self.b_s


@dataclass(frozen=True)
class TrapModel:
    """Single-exponential trap.

    ``n_fill`` is the mean fill per avalanche at ``pde_ref``; it scales as
    ``(pde / pde_ref) ** fill_exponent`` because avalanche charge grows with
    excess bias.
    """

    n_fill: float = 0.0
    tau_detrap_s: float = 1e-6
    p_trigger: float = 0.0
    fill_exponent: float = 0.0
    pde_ref: float = 0.10

    def __post_init__(self):
        if self.n_fill < 0:
            raise ValueError("n_fill must be >= 0")
        if not self.tau_detrap_s > 0:
            raise ValueError("tau_detrap_s must be > 0")
        if not 0 <= self.p_trigger <= 1:
            raise ValueError("p_trigger must be in [0, 1]")
        if not self.pde_ref > 0:
            raise ValueError("pde_ref must be > 0")

    def fill(self, pde: float) -> float:
        if self.n_fill == 0 or pde <= 0:
            return 0.0
        return self.n_fill * (pde / self.pde_ref) ** self.fill_exponent

    @property
    def product(self) -> float:
        return self.n_fill * self.p_trigger


@dataclass(frozen=True)
class DetectorParams:
    temperature_k: float
    pde: float
    dcr_model: DcrModel
    gate_width_model: GateWidthModel
    trap_model: TrapModel = TrapModel()

    def __post_init__(self):
        if not 0 <= self.pde <= 1:
            raise ValueError(f"pde must be in [0, 1], got {self.pde}")
        if self.dcr_model.dcr0_cps < 0:
            raise ValueError("dcr0_cps must be >= 0")
        if not self.gate_width > 0:
            raise ValueError("gate width must be > 0 at the configured pde")

    @property
    def dcr_cps(self) -> float:
        return float(self.dcr_model.rate(self.pde))

    @property
    def gate_width(self) -> float:
        return float(self.gate_width_model.width(self.pde))

    def with_pde(self, pde: float) -> "DetectorParams":
        return dataclasses.replace(self, pde=pde)

    def without_traps(self) -> "DetectorParams":
        return dataclasses.replace(self, trap_model=TrapModel())


@dataclass(frozen=True)
class GateClock:
    gate_freq_hz: float = 1.25e9
    gate_index: int = 0
    phase_offset_s: float = 0.0

    def __post_init__(self):
        if not self.gate_freq_hz > 0:
            raise ValueError("gate_freq_hz must be > 0")
        if self.gate_index < 0:
            raise ValueError("gate_index must be >= 0")
        if not 0 <= self.phase_offset_s < 1.0 / self.gate_freq_hz:
            raise ValueError("phase_offset_s must be in [0, gate period)")

    @property
    def period_s(self) -> float:
        return 1.0 / self.gate_freq_hz


def set_delay(clock: GateClock, phase_offset_s: float) -> GateClock:
    return dataclasses.replace(clock, phase_offset_s=phase_offset_s)


@dataclass(frozen=True)
class PhotonSource:
    rep_rate_hz: float = 625e3
    mu: float = 1.0
    pulse_sigma_s: float = 0.0

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if self.mu > 0 and not self.rep_rate_hz > 0:
            raise ValueError("rep_rate_hz must be > 0")
        if self.pulse_sigma_s < 0:
            raise ValueError("pulse_sigma_s must be >= 0")

    @classmethod
    def off(cls) -> "PhotonSource":
        return cls(rep_rate_hz=625e3, mu=0.0)


@dataclass(frozen=True)
class HoldOffPolicy:
    holdoff_s: float = 100e-9
    mode: str = "count-off"

    def __post_init__(self):
        if not self.holdoff_s >= 0:
            raise ValueError("holdoff_s must be >= 0")
        if self.mode != "count-off":
            raise ValueError("only count-off hold-off is modelled")

    def gates(self, gate_freq_hz: float) -> int:
        if math.isinf(self.holdoff_s):
            return 2**62
        return int(round(self.holdoff_s * gate_freq_hz))


@dataclass(frozen=True)
class EngineState:
    trap_population: float = 0.0
    holdoff_until_gate: int = 0
    rng_state: object = None

    def __post_init__(self):
        if self.trap_population < 0:
            raise ValueError("trap_population must be >= 0")


@dataclass(frozen=True)
class EventRecord:
    gate_index: int
    t_s: float
    cause: str
    recorded: bool

    def to_json(self) -> str:
        return json.dumps(
            {"gate_index": self.gate_index, "t_s": self.t_s, "cause": self.cause,
             "recorded": self.recorded},
            separators=(",", ":"),
        )


@dataclass(frozen=True)
class CountsSummary:
    recorded: dict
    unrecorded: dict

    @property
    def recorded_total(self) -> int:
        return sum(self.recorded.values())

    @property
    def unrecorded_total(self) -> int:
        return sum(self.unrecorded.values())

    @property
    def total(self) -> int:
        return self.recorded_total + self.unrecorded_total


@dataclass
class RunResult:
    counts: CountsSummary
    n_gates: int
    seed: int
    gate_freq_hz: float
    phase_offset_s: float
    gate_index: np.ndarray | None = None
    cause: np.ndarray | None = None
    recorded: np.ndarray | None = None

    @property
    def duration_s(self) -> float:
        return self.n_gates / self.gate_freq_hz

    def recorded_gates(self) -> np.ndarray:
        if self.gate_index is None:
            raise ValueError("run was made without record_events")
        return self.gate_index[self.recorded]

    def events(self) -> Iterator[EventRecord]:
        if self.gate_index is None:
            return
        for g, c, r in zip(self.gate_index, self.cause, self.recorded):
            g = int(g)
            yield EventRecord(g, g / self.gate_freq_hz + self.phase_offset_s, CAUSES[c], bool(r))

    def write_ndjson(self, path) -> None:
        with open(path, "w") as fh:
            for ev in self.events():
                fh.write(ev.to_json() + "\n")


# ---------------------------------------------------------------------------
# per-gate probabilities


def gate_transmission(delay_s, fwhm_s: float, pulse_sigma_s: float = 0.0):
    """Gaussian gate profile, optionally convolved with a Gaussian optical pulse.

    Returns 1 at zero delay and 0.5 at ``fwhm_s / 2`` when the pulse is a delta.
    """
    d = np.asarray(delay_s, dtype=float)
    sg = fwhm_s / FWHM_PER_SIGMA
    st = math.hypot(sg, pulse_sigma_s)
    return (sg / st) * np.exp(-0.5 * (d / st) ** 2)


def _release_fraction(params: DetectorParams) -> float:
    """Probability a trapped carrier is released inside one gate's active window."""
    return -math.expm1(-params.gate_width / params.trap_model.tau_detrap_s)


def _check_width(params: DetectorParams, clock: GateClock) -> None:
    if not params.gate_width < clock.period_s:
        raise ValueError("gate width must be below the gate period")


def source_pulse_for_gate(clock: GateClock, source: PhotonSource, gate_index: int):
    """(pulse index, delay) of the source pulse apportioned to ``gate_index``, or None."""
    if source.mu <= 0:
        return None
    ratio = clock.gate_freq_hz / source.rep_rate_hz
    phi = clock.phase_offset_s * clock.gate_freq_hz
    k = round((gate_index + phi) / ratio)
    for kk in (k - 1, k, k + 1):
        if kk < 0:
            continue
        x = kk * ratio - phi
        n = round(x)
        if n == gate_index:
            return kk, (x - n) / clock.gate_freq_hz
    return None


def per_gate_probabilities(params: DetectorParams, clock: GateClock, source: PhotonSource,
                           state: EngineState, gate_index: int) -> tuple[float, float, float]:
    """(p_photon, p_dark, p_after) for one gate given the trap population in ``state``."""
    _check_width(params, clock)
    p_photon = 0.0
    hit = source_pulse_for_gate(clock, source, gate_index)
    if hit is not None:
        g = float(gate_transmission(hit[1], params.gate_width, source.pulse_sigma_s))
        p_photon = -math.expm1(-source.mu * params.pde * g)
    p_dark = min(params.dcr_cps / clock.gate_freq_hz, 1.0)
    tm = params.trap_model
    h_after = tm.p_trigger * state.trap_population * _release_fraction(params)
    p_after = 0.0 if h_after < EPS_TRAP else -math.expm1(-h_after)
    return p_photon, p_dark, p_after


def trap_update(state: EngineState, gate_index: int, avalanche_occurred: bool,
                params: DetectorParams, clock: GateClock | None = None,
                rng: np.random.Generator | None = None) -> EngineState:
    """Advance the trap population by one gate period, then fill on an avalanche.

    With ``rng`` the update is the exact integer mode (binomial survival,
    Poisson fill); otherwise expected values are used.
    """
    period = (clock or GateClock()).period_s
    tm = params.trap_model
    r = math.exp(-period / tm.tau_detrap_s)
    fill = tm.fill(params.pde)
    if rng is None:
        pop = state.trap_population * r + (fill if avalanche_occurred else 0.0)
    else:
        pop = float(rng.binomial(int(state.trap_population), r))
        if avalanche_occurred:
            pop += float(rng.poisson(fill))
    return dataclasses.replace(state, trap_population=pop)


# ---------------------------------------------------------------------------
# kernels


@numba.njit(cache=True)
def _pulse_gate(k, ratio, phi):
    x = k * ratio - phi
    n = np.floor(x + 0.5)
    return np.int64(n), x - n


@numba.njit(cache=True)
def _pulse_hazard(d, mu_eta_amp, inv2s2):
    return mu_eta_amp * np.exp(-d * d * inv2s2)


@numba.njit(cache=True)
def _first_pulse(start, ratio, phi):
    k = np.int64(max(np.floor((start + phi) / ratio) - 1.0, 0.0))
    n, d = _pulse_gate(k, ratio, phi)
    while n < start:
        k += 1
        n, d = _pulse_gate(k, ratio, phi)
    return k, n, d


@numba.njit(cache=True)
def _emit(g, cause, rec, n_ev, cap, ev_gate, ev_cause, ev_rec, record):
    if record:
        if n_ev < cap:
            ev_gate[n_ev] = g
            ev_cause[n_ev] = cause
            ev_rec[n_ev] = rec
        return n_ev + 1
    return n_ev


@numba.njit(cache=True)
def _pick_cause(h_p, h_d, h_a):
    v = np.random.random() * (h_p + h_d + h_a)
    if v < h_p:
        return 0
    if v < h_p + h_d:
        return 1
    return 2


@numba.njit(cache=True, nogil=True)
def _kernel_naive(n_gates, start, seed, lam_dark, q_trig, fill, decay_r, eps,
                  has_source, ratio, phi, mu_eta_amp, inv2s2, holdoff_gates, exact_traps,
                  record, cap, ev_gate, ev_cause, ev_rec, counts):
    np.random.seed(seed)
    pop = 0.0
    next_src = np.int64(-1)
    k = np.int64(0)
    d = 0.0
    if has_source:
        k, next_src, d = _first_pulse(start, ratio, phi)
    holdoff_until = np.int64(0)
    n_ev = np.int64(0)
    for i in range(n_gates):
        g = start + i
        if pop > 0.0:
            if exact_traps:
                pop = float(np.random.binomial(np.int64(pop), decay_r))
            else:
                pop *= decay_r
        h_a = q_trig * pop
        if h_a < eps:
            h_a = 0.0
            pop = 0.0
        h_p = 0.0
        if has_source and g == next_src:
            h_p = _pulse_hazard(d, mu_eta_amp, inv2s2)
            k += 1
            next_src, d = _pulse_gate(k, ratio, phi)
        h = lam_dark + h_a + h_p
        if h > 0.0 and np.random.random() < -np.expm1(-h):
            cause = _pick_cause(h_p, lam_dark, h_a)
            rec = g >= holdoff_until
            if rec:
                holdoff_until = g + 1 + holdoff_gates
                counts[cause] += 1
            else:
                counts[3 + cause] += 1
            n_ev = _emit(g, cause, rec, n_ev, cap, ev_gate, ev_cause, ev_rec, record)
            if exact_traps:
                pop += float(np.random.poisson(fill))
            else:
                pop += fill
    return n_ev


@numba.njit(cache=True)
def _cum_hazard(j, lam_dark, c, decay_r, log_r, one_minus_r, jc):
    """Hazard summed over gates 0..j of a stretch whose first gate sees c*r."""
    m = min(j + 1, jc)
    trap = 0.0
    if m > 0:
        trap = c * decay_r * (-np.expm1(m * log_r)) / one_minus_r
    return (j + 1) * lam_dark + trap


@numba.njit(cache=True, nogil=True)
def _kernel_skip(n_gates, start, seed, lam_dark, q_trig, fill, decay_r, eps,
                 has_source, ratio, phi, mu_eta_amp, inv2s2, holdoff_gates,
                 record, cap, ev_gate, ev_cause, ev_rec, counts):
    np.random.seed(seed)
    log_r = np.log(decay_r)
    one_minus_r = -np.expm1(log_r)
    end_all = start + n_gates
    # population after the most recently processed gate
    pop = 0.0
    next_src = end_all
    k = np.int64(0)
    d = 0.0
    if has_source:
        k, next_src, d = _first_pulse(start, ratio, phi)
    holdoff_until = np.int64(0)
    n_ev = np.int64(0)
    g = start
    while g < end_all:
        stop = min(next_src, end_all)
        if stop > g:
            length = stop - g
            c = q_trig * pop
            # number of leading gates whose release hazard stays >= eps
            jc = np.int64(0)
            if c * decay_r >= eps:
                jc = np.int64(np.floor(np.log(eps / c) / log_r))
                while jc > 0 and c * np.exp(jc * log_r) < eps:
                    jc -= 1
                while c * np.exp((jc + 1) * log_r) >= eps:
                    jc += 1
            e = np.random.exponential()
            hit = -1
            if _cum_hazard(length - 1, lam_dark, c, decay_r, log_r, one_minus_r, jc) >= e:
                if jc == 0:
                    hit = np.int64(np.ceil(e / lam_dark)) - 1
                    if hit < 0:
                        hit = 0
                    while hit > 0 and _cum_hazard(hit - 1, lam_dark, 0.0, decay_r, log_r, one_minus_r, 0) >= e:
                        hit -= 1
                    while _cum_hazard(hit, lam_dark, 0.0, decay_r, log_r, one_minus_r, 0) < e:
                        hit += 1
                else:
                    lo = np.int64(0)
                    hi = length - 1
                    while lo < hi:
                        mid = (lo + hi) // 2
                        if _cum_hazard(mid, lam_dark, c, decay_r, log_r, one_minus_r, jc) >= e:
                            hi = mid
                        else:
                            lo = mid + 1
                    hit = lo
            if hit < 0:
                if jc >= length:
                    pop = pop * np.exp(length * log_r)
                else:
                    pop = 0.0
                g = stop
            else:
                h_a = 0.0
                if hit < jc:
                    pop = pop * np.exp((hit + 1) * log_r)
                    h_a = q_trig * pop
                else:
                    pop = 0.0
                ge = g + hit
                cause = _pick_cause(0.0, lam_dark, h_a)
                rec = ge >= holdoff_until
                if rec:
                    holdoff_until = ge + 1 + holdoff_gates
                    counts[cause] += 1
                else:
                    counts[3 + cause] += 1
                n_ev = _emit(ge, cause, rec, n_ev, cap, ev_gate, ev_cause, ev_rec, record)
                pop += fill
                g = ge + 1
                continue
        if g >= end_all:
            break
        # source gate, handled exactly as in the per-gate loop
        pop *= decay_r
        h_a = q_trig * pop
        if h_a < eps:
            h_a = 0.0
            pop = 0.0
        h_p = _pulse_hazard(d, mu_eta_amp, inv2s2)
        k += 1
        next_src, d = _pulse_gate(k, ratio, phi)
        if next_src > end_all:
            next_src = end_all
        h = lam_dark + h_a + h_p
        if h > 0.0 and np.random.random() < -np.expm1(-h):
            cause = _pick_cause(h_p, lam_dark, h_a)
            rec = g >= holdoff_until
            if rec:
                holdoff_until = g + 1 + holdoff_gates
                counts[cause] += 1
            else:
                counts[3 + cause] += 1
            n_ev = _emit(g, cause, rec, n_ev, cap, ev_gate, ev_cause, ev_rec, record)
            pop += fill
        g += 1
    return n_ev


def kernel_seed(seed: int) -> int:
    """32-bit generator seed derived from an arbitrary non-negative integer seed."""
    return int(np.random.SeedSequence(int(seed)).generate_state(1, dtype=np.uint32)[0])


def spawn_seeds(master_seed: int, n: int) -> list[int]:
    """Independent per-run seeds derived from (master seed, run index)."""
    children = np.random.SeedSequence(int(master_seed)).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)) for c in children]


def run_sequence(params: DetectorParams, clock: GateClock, source: PhotonSource,
                 holdoff: HoldOffPolicy, n_gates: int, seed: int, record_events: bool = False,
                 method: str = "fast", trap_mode: str = "expected",
                 event_cap: int = 50_000_000) -> RunResult:
    """Simulate exactly ``n_gates`` gates starting at ``clock.gate_index``.

    ``method="naive"`` visits every gate; ``"fast"`` skip-samples between
    source pulses.  Both draw from the same distribution.  The integer trap
    mode (``trap_mode="exact"``) only exists in the per-gate loop.
    """
    n_gates = int(n_gates)
    if n_gates < 1:
        raise ValueError("n_gates must be >= 1")
    if method not in ("fast", "naive"):
        raise ValueError("method must be 'fast' or 'naive'")
    if trap_mode not in ("expected", "exact"):
        raise ValueError("trap_mode must be 'expected' or 'exact'")
    if trap_mode == "exact":
        method = "naive"
    _check_width(params, clock)

    f_g = clock.gate_freq_hz
    p_dark = params.dcr_cps / f_g
    if p_dark >= 1:
        raise ValueError("dark count probability per gate must be < 1")
    lam_dark = -math.log1p(-p_dark)
    tm = params.trap_model
    q_trig = tm.p_trigger * _release_fraction(params)
    fill = tm.fill(params.pde)
    decay_r = math.exp(-clock.period_s / tm.tau_detrap_s)

    has_source = source.mu > 0 and params.pde > 0
    ratio = f_g / source.rep_rate_hz if has_source else 1.0
    phi = clock.phase_offset_s * f_g
    sg = params.gate_width / FWHM_PER_SIGMA
    st = math.hypot(sg, source.pulse_sigma_s)
    mu_eta_amp = source.mu * params.pde * sg / st
    inv2s2 = 0.5 / (st * f_g) ** 2

    cap = int(event_cap) if record_events else 0
    ev_gate = np.empty(cap, dtype=np.int64)
    ev_cause = np.empty(cap, dtype=np.int8)
    ev_rec = np.empty(cap, dtype=np.bool_)
    counts = np.zeros(6, dtype=np.int64)
    hg = holdoff.gates(f_g)
    args = (n_gates, clock.gate_index, kernel_seed(seed), lam_dark, q_trig, fill, decay_r,
            EPS_TRAP, has_source, ratio, phi, mu_eta_amp, inv2s2, hg)
    if method == "naive":
        n_ev = _kernel_naive(*args, trap_mode == "exact", record_events, cap,
                             ev_gate, ev_cause, ev_rec, counts)
    else:
        n_ev = _kernel_skip(*args, record_events, cap, ev_gate, ev_cause, ev_rec, counts)
    if record_events and n_ev > cap:
        raise EventBufferOverflow(f"{n_ev} events exceed the buffer cap of {cap}")

    summary = CountsSummary(
        recorded={c: int(counts[i]) for i, c in enumerate(CAUSES)},
        unrecorded={c: int(counts[3 + i]) for i, c in enumerate(CAUSES)},
    )
    res = RunResult(summary, n_gates, int(seed), f_g, clock.phase_offset_s)
    if record_events:
        res.gate_index = ev_gate[:n_ev].copy()
        res.cause = ev_cause[:n_ev].copy()
        res.recorded = ev_rec[:n_ev].copy()
    return res
