"""Analog low-pass synthesis for the readout chain.

Designs are kept as cascades of real second-order analog sections in the
normalized complex frequency ``s = j f / ref_freq_hz``.  Each section is

    H_i(s) = (b0 + b1 s + b2 s^2) / (1 + a1 s + a2 s^2)

so first-order sections simply carry ``b2 = a2 = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal, special

FAMILIES = ("elliptic", "chebyshev-type-1")


class InfeasibleSpecError(ValueError):
    """No design of order <= max_order meets the attenuation requirement."""


@dataclass(frozen=True)
class FilterSpec:
    passband_edge_hz: float
    stopband_freq_hz: float
    min_stopband_atten_db: float
    max_passband_ripple_db: float = 1.0
    max_order: int = 12
    family: str = "elliptic"

    def __post_init__(self):
        if not 0 < self.passband_edge_hz < self.stopband_freq_hz:
            raise ValueError("need 0 < passband_edge_hz < stopband_freq_hz")
        if not self.min_stopband_atten_db > 0:
            raise ValueError("min_stopband_atten_db must be > 0")
        if not self.max_passband_ripple_db > 0:
            raise ValueError("max_passband_ripple_db must be > 0")
        if self.max_order < 1:
            raise ValueError("max_order must be >= 1")
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}")


@dataclass(frozen=True)
class FilterDesign:
    family: str
    order: int
    ref_freq_hz: float
    sections: tuple[tuple[float, float, float, float, float], ...]
    dc_gain_db: float
    ripple_db: float = field(default=0.0)
    stop_atten_db: float = field(default=0.0)

    def response(self, freqs_hz) -> np.ndarray:
        """Complex transfer function at the given frequencies."""
        s = 1j * np.asarray(freqs_hz, dtype=float) / self.ref_freq_hz
        h = np.ones_like(s)
        for b0, b1, b2, a1, a2 in self.sections:
            h = h * (b0 + s * (b1 + s * b2)) / (1.0 + s * (a1 + s * a2))
        return h

    def gain_db(self, freqs_hz) -> np.ndarray:
        return 20.0 * np.log10(np.abs(self.response(freqs_hz)))

    def section_poles(self) -> list[np.ndarray]:
        out = []
        for _, _, _, a1, a2 in self.sections:
            out.append(np.roots([a2, a1, 1.0]) if a2 != 0 else np.array([-1.0 / a1]))
        return out

    def is_stable(self) -> bool:
        return all(np.all(p.real < 0) for p in self.section_poles())


def identity_design(ref_freq_hz: float = 1.0) -> FilterDesign:
    """0 dB all-pass placeholder (no sections)."""
    return FilterDesign("elliptic", 0, ref_freq_hz, (), 0.0)


def _eps2(db: float) -> float:
    return 10.0 ** (db / 10.0) - 1.0


def chebyshev1_min_order(ripple_db: float, atten_db: float, selectivity: float) -> float:
    """Real-valued order at which a Chebyshev-I prototype just meets the spec.

    ``selectivity`` is stopband / passband edge (> 1).
    """
    d = math.sqrt(_eps2(atten_db) / _eps2(ripple_db))
    return math.acosh(d) / math.acosh(selectivity)


def elliptic_min_order(ripple_db: float, atten_db: float, selectivity: float) -> float:
    """Real-valued order from the elliptic degree equation N = K(k) K'(k1) / (K'(k) K(k1))."""
    m = (1.0 / selectivity) ** 2
    m1 = _eps2(ripple_db) / _eps2(atten_db)
    return (special.ellipk(m) * special.ellipkm1(m1)) / (special.ellipkm1(m) * special.ellipk(m1))


def _elliptic_atten_for_order(order: int, ripple_db: float, selectivity: float) -> float:
    """Stopband attenuation an order-N elliptic reaches at the given selectivity."""
    m = (1.0 / selectivity) ** 2
    q = math.exp(-math.pi * special.ellipkm1(m) / special.ellipk(m))
    q1 = q**order
    # modulus from the nome via theta functions
    num = sum(q1 ** (n * (n + 1)) for n in range(0, 8))
    den = 1.0 + 2.0 * sum(q1 ** (n * n) for n in range(1, 8))
    k1 = 4.0 * math.sqrt(q1) * (num / den) ** 2
    return 10.0 * math.log10(1.0 + _eps2(ripple_db) / k1**2)


def _zpk_to_sections(z, p, k):
    """Pair conjugate poles with the nearest zeros and emit normalized sections."""
    p = np.atleast_1d(np.asarray(p, dtype=complex))
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    upper_p = sorted([x for x in p if x.imag > 1e-12 * abs(x)], key=lambda x: abs(x.real))
    real_p = [x.real for x in p if abs(x.imag) <= 1e-12 * abs(x)]
    upper_z = sorted([x for x in z if x.imag > 0], key=lambda x: abs(x))

    sections = []
    # sharpest poles (closest to the jw axis) get the closest zeros
    zeros_left = list(upper_z)
    for pole in upper_p:
        w2 = abs(pole) ** 2
        a1 = -2.0 * pole.real / w2
        a2 = 1.0 / w2
        if zeros_left:
            zero = min(zeros_left, key=lambda x: abs(abs(x) - abs(pole)))
            zeros_left.remove(zero)
            zz = abs(zero) ** 2
            sections.append([1.0, 0.0, 1.0 / zz, a1, a2])
        else:
            sections.append([1.0, 0.0, 0.0, a1, a2])
    for pole in real_p:
        sections.append([1.0, 0.0, 0.0, -1.0 / pole, 0.0])

    h0 = k * np.prod(-z) / np.prod(-p) if len(p) else k
    sections[0][0] *= float(np.real(h0))
    sections[0][2] *= float(np.real(h0))
    return tuple(tuple(float(c) for c in sec) for sec in sections)


def design_lowpass(family: str, order: int, passband_edge_hz: float, ripple_db: float,
                   stop_atten_db: float | None = None, family_label: str | None = None) -> FilterDesign:
    """Fixed-order design with the passband edge (gain = -ripple) at ``passband_edge_hz``."""
    if family == "elliptic":
        if stop_atten_db is None:
            raise ValueError("elliptic design needs stop_atten_db")
        z, p, k = signal.ellipap(order, ripple_db, stop_atten_db)
    elif family == "chebyshev-type-1":
        z, p, k = signal.cheb1ap(order, ripple_db)
    else:
        raise ValueError(f"family must be one of {FAMILIES}")
    sections = _zpk_to_sections(z, p, k)
    h0 = 1.0
    for sec in sections:
        h0 *= sec[0]
    return FilterDesign(
        family=family_label or family,
        order=order,
        ref_freq_hz=passband_edge_hz,
        sections=sections,
        dc_gain_db=20.0 * math.log10(abs(h0)),
        ripple_db=ripple_db,
        stop_atten_db=stop_atten_db or 0.0,
    )


def synth_lowpass(spec: FilterSpec) -> FilterDesign:
    """Minimum-order low-pass meeting ``spec`` within its family.

    Slack left over from rounding the order up is split evenly, so the
    returned design clears both the passband and stopband bounds with margin.
    """
    sel = spec.stopband_freq_hz / spec.passband_edge_hz
    # keep the ripple minima off the bound itself
    rp = spec.max_passband_ripple_db * (1.0 - 1e-6)
    if spec.min_stopband_atten_db <= rp:
        # any monotone first-order roll-off already clears the stopband bound
        exact = 1.0
    elif spec.family == "elliptic":
        exact = elliptic_min_order(rp, spec.min_stopband_atten_db, sel)
    else:
        exact = chebyshev1_min_order(rp, spec.min_stopband_atten_db, sel)
    order = max(1, math.ceil(exact - 1e-9))
    if order > spec.max_order:
        raise InfeasibleSpecError(
            f"{spec.family} needs order {order} > max_order {spec.max_order} "
            f"for {spec.min_stopband_atten_db} dB at {sel:.4g}x the passband edge"
        )
    if spec.family == "elliptic" and order > 1:
        reach = _elliptic_atten_for_order(order, rp, sel)
        rs = spec.min_stopband_atten_db + 0.5 * max(reach - spec.min_stopband_atten_db, 0.0)
        return design_lowpass("elliptic", order, spec.passband_edge_hz, rp, rs)
    # first-order elliptic and Chebyshev prototypes coincide
    return design_lowpass("chebyshev-type-1", order, spec.passband_edge_hz, rp, family_label=spec.family)


def check_design(design: FilterDesign, spec: FilterSpec, n_points: int = 10_000) -> bool:
    """Grid check of the ripple and stopband bounds over [0, 2 * stopband]."""
    f = np.linspace(0.0, 2.0 * spec.stopband_freq_hz, n_points)
    g = design.gain_db(f)
    passband = f <= spec.passband_edge_hz
    stopband = f >= spec.stopband_freq_hz
    return bool(
        np.all(g[passband] >= -spec.max_passband_ripple_db)
        and np.all(g[stopband] <= -spec.min_stopband_atten_db)
    )
