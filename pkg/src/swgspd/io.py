"""Presets, run configs and result files.

Config grammar (INI, ``#`` comments, one ``key = value`` per line)::

    [run]                 # run configs only
    protocol = afterpulse
    preset = preset_223K  # bundled name or path
    output_dir = out

    [overrides]           # optional: pde, holdoff_ns, seed, gates, seconds, ...
    holdoff_ns = 100

    [detector]            # presets: temperature_k, pde
    [dcr]                 # dcr0_cps, k_pde
    [gate_width]          # a_s_per_unit_pde, b_s
    [traps]               # n_fill, tau_detrap_s, p_trigger, fill_exponent, pde_ref
"""

from __future__ import annotations

import configparser
import contextlib
import csv
import hashlib
import io as _io
import json
import math
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field, is_dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .chain import S21Curve, WaveformTrace
from .engine import DcrModel, DetectorParams, GateWidthModel, TrapModel
from .experiments import (
    AfterpulseResult,
    DcrPdePoint,
    DelayScanResult,
    Histogram,
    PapPoint,
    StabilitySeries,
)

PROTOCOLS = ("s21", "trace", "delay-scan", "dcr-curve", "afterpulse", "pap-curve", "stability",
             "calibrate")
OUTPUT_DIR_ENV = "SWGSPD_OUTPUT_DIR"

# key -> (type, lower bound, upper bound, inclusive lower)
OVERRIDE_KEYS = {
    "pde": (float, 0.0, 1.0, True),
    "holdoff_ns": (float, 0.0, math.inf, True),
    "seed": (int, 0, 2**64 - 1, True),
    "gates": (int, 1, math.inf, True),
    "seconds": (float, 0.0, math.inf, False),
    "n_points": (int, 16, math.inf, True),
    "photon_counts": (float, 0.0, math.inf, False),
    "minutes": (int, 20, math.inf, True),
    "drift_ps_per_hour": (float, -math.inf, math.inf, True),
    "mu": (float, 0.0, math.inf, True),
}
REQUIRED_OVERRIDES = {"afterpulse": ("holdoff_ns",), "pap-curve": ("holdoff_ns",)}

PRESET_SCHEMA = {
    "detector": {"temperature_k": (0.0, math.inf, False), "pde": (0.0, 1.0, True)},
    "dcr": {"dcr0_cps": (0.0, math.inf, True), "k_pde": (-math.inf, math.inf, True)},
    "gate_width": {"a_s_per_unit_pde": (-math.inf, math.inf, True), "b_s": (-math.inf, math.inf, True)},
    "traps": {
        "n_fill": (0.0, math.inf, True),
        "tau_detrap_s": (0.0, math.inf, False),
        "p_trigger": (0.0, 1.0, True),
        "fill_exponent": (-math.inf, math.inf, True),
        "pde_ref": (0.0, 1.0, False),
    },
}
OPTIONAL_TRAP_KEYS = {"fill_exponent": 0.0, "pde_ref": 0.10}


class ConfigError(ValueError):
    """Parse or validation failure; the message names file, line and key."""


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))  # shortest string that parses back to the same double


# ---------------------------------------------------------------------------
# parsing helpers


def _line_index(text: str) -> dict:
    """(section, key) -> 1-based line number."""
    out = {}
    section = None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith(("#", ";")):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            out[(section, None)] = no
        elif "=" in line and section is not None:
            out[(section, line.split("=", 1)[0].strip().lower())] = no
    return out


def _parse(path) -> tuple[configparser.ConfigParser, dict, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read: {e}") from e
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        cp.read_string(text, source=str(path))
    except configparser.Error as e:
        raise ConfigError(f"{path}: parse error: {e}") from e
    return cp, _line_index(text), str(path)


def _where(src, lines, section, key=None) -> str:
    no = lines.get((section, key)) or lines.get((section, None))
    return f"{src}:{no}" if no else src


def _number(cp, lines, src, section, key, typ, lo, hi, lo_inclusive=True):
    raw = cp.get(section, key)
    try:
        val = typ(raw) if typ is not int else int(raw, 0)
    except ValueError:
        raise ConfigError(f"{_where(src, lines, section, key)}: {key} = {raw!r} is not a valid {typ.__name__}")
    ok_lo = val >= lo if lo_inclusive else val > lo
    if not (ok_lo and val <= hi) or (typ is float and math.isnan(val)):
        lb = "[" if lo_inclusive else "("
        raise ConfigError(f"{_where(src, lines, section, key)}: {key} = {raw} outside {lb}{lo}, {hi}]")
    return val


# ---------------------------------------------------------------------------
# presets


def preset_path(name_or_path) -> Path:
    p = Path(name_or_path)
    if p.exists():
        return p
    bundled = resources.files("swgspd") / "presets" / str(name_or_path)
    if bundled.is_file():
        return Path(str(bundled))
    raise ConfigError(f"{name_or_path}: no such preset file")


def _preset_from_parser(cp, lines, src) -> DetectorParams:
    vals = {}
    for section, keys in PRESET_SCHEMA.items():
        if not cp.has_section(section):
            raise ConfigError(f"{src}: missing section [{section}]")
        for key, (lo, hi, inc) in keys.items():
            if not cp.has_option(section, key):
                if section == "traps" and key in OPTIONAL_TRAP_KEYS:
                    vals[key] = OPTIONAL_TRAP_KEYS[key]
                    continue
                raise ConfigError(f"{_where(src, lines, section)}: [{section}] missing key {key}")
            vals[key] = _number(cp, lines, src, section, key, float, lo, hi, inc)
    try:
        params = DetectorParams(
            temperature_k=vals["temperature_k"],
            pde=vals["pde"],
            dcr_model=DcrModel(vals["dcr0_cps"], vals["k_pde"]),
            gate_width_model=GateWidthModel(vals["a_s_per_unit_pde"], vals["b_s"]),
            trap_model=TrapModel(vals["n_fill"], vals["tau_detrap_s"], vals["p_trigger"],
                                 vals["fill_exponent"], vals["pde_ref"]),
        )
    except ValueError as e:
        raise ConfigError(f"{src}: {e}") from e
    w = params.gate_width
    if not w < 1 / 1.25e9:
        raise ConfigError(f"{_where(src, lines, 'gate_width')}: gate width {w:g} s not below the gate period")
    return params


def load_preset(path) -> DetectorParams:
    cp, lines, src = _parse(preset_path(path))
    return _preset_from_parser(cp, lines, src)


def preset_text(params: DetectorParams, comment: str = "") -> str:
    tm = params.trap_model
    out = [f"# {line}" for line in comment.splitlines()] if comment else []
    out += [
        "[detector]",
        f"temperature_k = {fmt(params.temperature_k)}",
        f"pde = {fmt(params.pde)}",
        "",
        "[dcr]",
        f"dcr0_cps = {fmt(params.dcr_model.dcr0_cps)}",
        f"k_pde = {fmt(params.dcr_model.k_pde)}",
        "",
        "[gate_width]",
        f"a_s_per_unit_pde = {fmt(params.gate_width_model.a_s_per_unit_pde)}",
        f"b_s = {fmt(params.gate_width_model.b_s)}",
        "",
        "[traps]",
        f"n_fill = {fmt(tm.n_fill)}",
        f"tau_detrap_s = {fmt(tm.tau_detrap_s)}",
        f"p_trigger = {fmt(tm.p_trigger)}",
        f"fill_exponent = {fmt(tm.fill_exponent)}",
        f"pde_ref = {fmt(tm.pde_ref)}",
    ]
    return "\n".join(out) + "\n"


def write_preset(params: DetectorParams, path, comment: str = "") -> None:
    atomic_write_text(path, preset_text(params, comment))


def bundled_presets() -> dict:
    """{temperature_k: DetectorParams} for the shipped presets."""
    out = {}
    for name in ("preset_223K", "preset_233K", "preset_243K"):
        p = load_preset(name)
        out[p.temperature_k] = p
    return out


# ---------------------------------------------------------------------------
# run configs


@dataclass
class RunConfig:
    protocol: str
    preset_path: str = "preset_223K"
    overrides: dict = field(default_factory=dict)
    output_dir: str = ""

    def __post_init__(self):
        if not self.output_dir:
            self.output_dir = os.environ.get(OUTPUT_DIR_ENV, "swgspd_out")

    def get(self, key, default=None):
        return self.overrides.get(key, default)


def validate_overrides(overrides: dict, protocol: str, where=lambda key: "overrides") -> dict:
    out = {}
    for key, val in overrides.items():
        if key not in OVERRIDE_KEYS:
            raise ConfigError(f"{where(key)}: unknown override key {key}")
        typ, lo, hi, inc = OVERRIDE_KEYS[key]
        if typ is int and isinstance(val, float) and val.is_integer():
            val = int(val)
        if typ is int and not isinstance(val, (int, np.integer)):
            raise ConfigError(f"{where(key)}: {key} must be an integer")
        val = typ(val)
        ok_lo = val >= lo if inc else val > lo
        if not (ok_lo and val <= hi):
            lb = "[" if inc else "("
            raise ConfigError(f"{where(key)}: {key} = {val} outside {lb}{lo}, {hi}]")
        out[key] = val
    for key in REQUIRED_OVERRIDES.get(protocol, ()):
        if key not in out:
            raise ConfigError(f"{where(key)}: protocol {protocol} requires {key}")
    return out


def load_config(path) -> RunConfig:
    cp, lines, src = _parse(path)
    if not cp.has_section("run"):
        raise ConfigError(f"{src}: missing section [run]")
    if not cp.has_option("run", "protocol"):
        raise ConfigError(f"{_where(src, lines, 'run')}: [run] missing key protocol")
    protocol = cp.get("run", "protocol").strip()
    if protocol not in PROTOCOLS:
        raise ConfigError(f"{_where(src, lines, 'run', 'protocol')}: unknown protocol {protocol!r}")
    raw = {}
    if cp.has_section("overrides"):
        for key in cp.options("overrides"):
            if key not in OVERRIDE_KEYS:
                raise ConfigError(f"{_where(src, lines, 'overrides', key)}: unknown override key {key}")
            typ, lo, hi, inc = OVERRIDE_KEYS[key]
            raw[key] = _number(cp, lines, src, "overrides", key, typ, lo, hi, inc)
    overrides = validate_overrides(raw, protocol, lambda key: _where(src, lines, "overrides", key))
    preset = cp.get("run", "preset", fallback="preset_223K").strip()
    # a config that carries its own detector sections is its own preset
    if cp.has_section("detector"):
        _preset_from_parser(cp, lines, src)
        if not cp.has_option("run", "preset"):
            preset = str(path)
    else:
        load_preset(preset)
    out_dir = cp.get("run", "output_dir", fallback="").strip()
    return RunConfig(protocol, preset, overrides, out_dir)


def config_text(cfg: RunConfig) -> str:
    lines = ["[run]", f"protocol = {cfg.protocol}", f"preset = {cfg.preset_path}",
             f"output_dir = {cfg.output_dir}"]
    if cfg.overrides:
        lines += ["", "[overrides]"]
        lines += [f"{k} = {fmt(v)}" for k, v in sorted(cfg.overrides.items())]
    return "\n".join(lines) + "\n"


def write_config(cfg: RunConfig, path) -> None:
    atomic_write_text(path, config_text(cfg))


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# result files


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


def csv_text(header, rows, comments=()) -> str:
    buf = _io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(x) if not isinstance(x, str) else x for x in row])
    return buf.getvalue()


CSV_HEADERS = {
    "s21": ("freq_hz", "mag_db"),
    "trace": ("t_s", "v"),
    "delay-scan": ("delay_s", "count_rate_cps"),
    "dcr-curve": ("pde", "dcr_cps", "dcr_per_gate", "duty_cycle", "dcr_normalized_cps"),
    "histogram": ("bin_start_s", "count"),
    "afterpulse": ("p_ap", "p_ap_per_gate", "window_s", "photon_counts", "afterpulse_counts",
                   "dcr_baseline_per_bin"),
    "pap-curve": ("temperature_k", "pde", "holdoff_s", "p_ap", "p_ap_per_gate"),
    "stability": ("t_min", "counts_10s", "rescan", "delay_s"),
}


def plot_data_text(result, kind: str | None = None) -> str:
    """CSV text for a protocol result; ``kind`` is needed only for empty lists."""
    if isinstance(result, S21Curve):
        return csv_text(CSV_HEADERS["s21"], zip(result.freqs_hz, result.mag_db))
    if isinstance(result, WaveformTrace):
        return csv_text(CSV_HEADERS["trace"], zip(result.times, result.samples))
    if isinstance(result, DelayScanResult):
        return csv_text(CSV_HEADERS["delay-scan"], zip(result.delays_s, result.count_rates_cps),
                         comments=[f"fwhm_s={fmt(result.fwhm_s)}"])
    if isinstance(result, Histogram):
        return csv_text(CSV_HEADERS["histogram"], zip(result.bin_starts, result.counts))
    if isinstance(result, AfterpulseResult):
        return csv_text(CSV_HEADERS["afterpulse"],
                         [[getattr(result, k) for k in CSV_HEADERS["afterpulse"]]])
    if isinstance(result, StabilitySeries):
        marks = np.isin(result.t_min, result.rescan_marks)
        delays = result.delays_s if len(result.delays_s) else np.zeros(len(result.t_min))
        return csv_text(CSV_HEADERS["stability"], zip(result.t_min, result.counts_10s, marks, delays),
                         comments=[f"rsd={fmt(result.rsd)}", f"poisson_rsd={fmt(result.poisson_rsd)}"])
    if isinstance(result, (list, tuple)):
        if not result:
            if kind not in CSV_HEADERS:
                raise ValueError("empty result needs an explicit kind")
            return csv_text(CSV_HEADERS[kind], [])
        first = result[0]
        if isinstance(first, DcrPdePoint):
            return csv_text(CSV_HEADERS["dcr-curve"],
                             [[getattr(p, k) for k in CSV_HEADERS["dcr-curve"]] for p in result])
        if isinstance(first, PapPoint):
            return csv_text(CSV_HEADERS["pap-curve"],
                             [[getattr(p, k) for k in CSV_HEADERS["pap-curve"]] for p in result])
    raise TypeError(f"no CSV format for {type(result).__name__}")


def emit_plot_data(result, path, kind: str | None = None) -> Path:
    path = Path(path)
    atomic_write_text(path, plot_data_text(result, kind))
    return path


def trace_metadata(chain, seed: int, noise_rms_v: float, avalanche_times) -> dict:
    lpf = chain.lpf
    return {
        "seed": int(seed),
        "noise_rms_v": float(noise_rms_v),
        "avalanche_times_s": [float(t) for t in avalanche_times],
        "chain": {
            "lpf": {"family": lpf.family, "order": lpf.order, "ref_freq_hz": lpf.ref_freq_hz,
                    "dc_gain_db": lpf.dc_gain_db, "sections": [list(s) for s in lpf.sections]},
            **{k: v for k, v in asdict(chain).items() if k != "lpf"},
        },
    }


def write_trace(trace: WaveformTrace, path, metadata: dict) -> tuple[Path, Path]:
    """Trace CSV plus a JSON sidecar with the same stem."""
    path = Path(path)
    emit_plot_data(trace, path)
    side = path.with_suffix(".json")
    atomic_write_text(side, json.dumps(metadata, indent=2, sort_keys=True) + "\n")
    return path, side


def _jsonable(x):
    if is_dataclass(x):
        return {k: _jsonable(v) for k, v in asdict(x).items()}
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return x


@dataclass
class RunManifest:
    config: dict
    master_seed: int
    point_seeds: list
    tool_version: str
    runtime_s: float
    config_hash: str
    params: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(_jsonable(self), indent=2, sort_keys=True) + "\n"


class StagedOutput:
    """Collects output files in a hidden staging dir and publishes them together.

    On exception nothing is left behind in the output directory.
    """

    def __init__(self, output_dir):
        self.output_dir = Path(output_dir)
        self.stage: Path | None = None

    def __enter__(self):
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.stage = Path(tempfile.mkdtemp(dir=self.output_dir, prefix=".staging-"))
        return self

    def path(self, name: str) -> Path:
        return self.stage / name

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                for f in sorted(self.stage.iterdir()):
                    os.replace(f, self.output_dir / f.name)
        finally:
            shutil.rmtree(self.stage, ignore_errors=True)
        return False
