"""Command line: one subcommand per characterization protocol.

    swgspd <protocol> --preset <path> [--pde f] [--holdoff-ns f] [--seed n]
           [--out dir] [--gates n | --seconds f] [--fast | --exact]

Exit status 0 on success, 1 on a protocol error, 2 on a configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from dataclasses import asdict

import numpy as np

from . import __version__
from .chain import ChainConfig, frequency_response, simulate_gate_waveform
from .engine import HoldOffPolicy, PhotonSource, spawn_seeds
from .experiments import (
    acquisition_for_counts,
    afterpulse_measurement,
    calibrate_presets,
    dcr_pde_curve,
    delay_scan,
    pap_vs_pde_curve,
    stability_run,
)
from .io import (
    PROTOCOLS,
    ConfigError,
    RunConfig,
    RunManifest,
    StagedOutput,
    config_hash,
    csv_text,
    emit_plot_data,
    load_config,
    load_preset,
    preset_text,
    trace_metadata,
    validate_overrides,
    write_trace,
)

F_G = 1.25e9
DEFAULT_PDE_GRID = (0.05, 0.10, 0.15, 0.20, 0.25, 0.275, 0.30)


def _params(cfg: RunConfig):
    p = load_preset(cfg.preset_path)
    if "pde" in cfg.overrides:
        p = p.with_pde(cfg.overrides["pde"])
    return p


def _gates(cfg: RunConfig, default_seconds: float) -> int:
    if "gates" in cfg.overrides:
        return int(cfg.overrides["gates"])
    return int(round(cfg.get("seconds", default_seconds) * F_G))


def _source(cfg: RunConfig) -> PhotonSource:
    return PhotonSource(625e3, cfg.get("mu", 1.0))


def _holdoff(cfg: RunConfig) -> HoldOffPolicy:
    return HoldOffPolicy(cfg.get("holdoff_ns", 100.0) * 1e-9)


def _run(cfg: RunConfig, stage: StagedOutput, method: str) -> tuple[list[int], dict]:
    """Run one protocol into the staging area; returns (per-point seeds, params record)."""
    seed = int(cfg.get("seed", 0))
    proto = cfg.protocol

    if proto == "s21":
        chain = ChainConfig()
        n = int(cfg.get("n_points", 3000))
        curve = frequency_response(chain, np.linspace(3e9 / n, 3e9, n))
        emit_plot_data(curve, stage.path("s21.csv"))
        return [], {"chain": trace_metadata(chain, seed, 0.0, [])["chain"]}

    if proto == "trace":
        chain = ChainConfig()
        duration = cfg.get("seconds", 2e-6)
        times = [duration / 2]
        trace = simulate_gate_waveform(chain, times, duration, 0.0, seed)
        meta = trace_metadata(chain, seed, 0.0, times)
        write_trace(trace, stage.path("trace.csv"), meta)
        return [seed], {"chain": meta["chain"]}

    params = _params(cfg)
    record = {"preset": asdict(params)}

    if proto == "delay-scan":
        n = int(cfg.get("n_points", 80))
        res = delay_scan(params, _source(cfg), n, _gates(cfg, 0.4), seed, _holdoff(cfg), method=method)
        emit_plot_data(res, stage.path("delay_scan.csv"))
        return spawn_seeds(seed, n + 1), record

    if proto == "dcr-curve":
        grid = [params.pde] if "pde" in cfg.overrides else list(DEFAULT_PDE_GRID)
        pts = dcr_pde_curve({params.temperature_k: params}, grid, _gates(cfg, 10.0), seed,
                            _holdoff(cfg), method=method)[params.temperature_k]
        emit_plot_data(pts, stage.path("dcr_curve.csv"), kind="dcr-curve")
        return spawn_seeds(seed, len(grid)), record

    if proto == "afterpulse":
        src = _source(cfg)
        if "gates" in cfg.overrides or "seconds" in cfg.overrides:
            acq = _gates(cfg, 0.0) / F_G
        else:
            acq = acquisition_for_counts(params, src, cfg.get("photon_counts", 1e5))
        hist, res = afterpulse_measurement(params, src, _holdoff(cfg), acq, seed=seed, method=method)
        emit_plot_data(hist, stage.path("afterpulse_histogram.csv"))
        emit_plot_data(res, stage.path("afterpulse.csv"))
        return [seed], record

    if proto == "pap-curve":
        grid = [params.pde] if "pde" in cfg.overrides else list(DEFAULT_PDE_GRID)
        pts = pap_vs_pde_curve({params.temperature_k: params}, grid, _holdoff(cfg), seed,
                               cfg.get("photon_counts", 1e5), _source(cfg), method=method)
        emit_plot_data(pts, stage.path("pap_curve.csv"), kind="pap-curve")
        return spawn_seeds(seed, len(grid)), record

    if proto == "stability":
        minutes = int(cfg.get("minutes", 60))
        series = stability_run(params, _source(cfg), minutes, seed,
                               drift_ps_per_hour=cfg.get("drift_ps_per_hour", 0.0),
                               holdoff=_holdoff(cfg), method=method)
        emit_plot_data(series, stage.path("stability.csv"))
        return spawn_seeds(seed, 2 * minutes), record

    if proto == "calibrate":
        presets = calibrate_presets(seed=seed, photon_counts=cfg.get("photon_counts", 3e5),
                                    holdoff=_holdoff(cfg),
                                    log=lambda m: print(m, file=sys.stderr))
        rows = []
        for T, p in sorted(presets.items()):
            stage.path(f"preset_{int(round(T))}K").write_text(
                preset_text(p, f"calibrated with seed {seed}"))
            tm = p.trap_model
            rows.append((T, p.dcr_model.dcr0_cps, p.dcr_model.k_pde, p.gate_width_model.a_s_per_unit_pde,
                         p.gate_width_model.b_s, tm.n_fill, tm.tau_detrap_s, tm.p_trigger,
                         tm.fill_exponent, tm.pde_ref))
        header = ("temperature_k", "dcr0_cps", "k_pde", "a_s_per_unit_pde", "b_s", "n_fill",
                  "tau_detrap_s", "p_trigger", "fill_exponent", "pde_ref")
        stage.path("calibration.csv").write_text(csv_text(header, rows))
        return [seed], {"presets": {str(T): asdict(p) for T, p in presets.items()}}

    raise ConfigError(f"unknown protocol {proto!r}")


def run_protocol(cfg: RunConfig, method: str = "fast") -> int:
    """Run ``cfg`` and publish its CSVs plus ``manifest.json``; returns the exit status."""
    t0 = time.perf_counter()
    try:
        with StagedOutput(cfg.output_dir) as stage:
            seeds, record = _run(cfg, stage, method)
            outputs = sorted(f.name for f in stage.stage.iterdir())
            manifest = RunManifest(
                config=asdict(cfg),
                master_seed=int(cfg.get("seed", 0)),
                point_seeds=seeds,
                tool_version=__version__,
                runtime_s=time.perf_counter() - t0,
                config_hash=config_hash(cfg),
                params={**record, "engine_method": method},
                outputs=outputs + ["manifest.json"],
            )
            stage.path("manifest.json").write_text(manifest.to_json())
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # protocol failures map to status 1
        print(f"{cfg.protocol} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="swgspd", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("protocol", choices=PROTOCOLS)
    ap.add_argument("--config", help="run config file; flags given here override it")
    ap.add_argument("--preset", help="preset file or bundled name (preset_223K, ...)")
    ap.add_argument("--pde", type=float)
    ap.add_argument("--holdoff-ns", type=float, dest="holdoff_ns")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", help="output directory (default $SWGSPD_OUTPUT_DIR or ./swgspd_out)")
    dur = ap.add_mutually_exclusive_group()
    dur.add_argument("--gates", type=int)
    dur.add_argument("--seconds", type=float)
    ap.add_argument("--n-points", type=int, dest="n_points")
    ap.add_argument("--photon-counts", type=float, dest="photon_counts")
    ap.add_argument("--minutes", type=int)
    ap.add_argument("--drift-ps-per-hour", type=float, dest="drift_ps_per_hour")
    eng = ap.add_mutually_exclusive_group()
    eng.add_argument("--fast", action="store_true", help="skip-sampling engine (default)")
    eng.add_argument("--exact", action="store_true", help="naive per-gate engine")
    return ap


def config_from_args(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
        if cfg.protocol != args.protocol:
            raise ConfigError(f"{args.config}: protocol {cfg.protocol} does not match {args.protocol}")
    else:
        cfg = RunConfig(args.protocol)
    keys = ("pde", "holdoff_ns", "seed", "gates", "seconds", "n_points", "photon_counts", "minutes",
            "drift_ps_per_hour")
    flags = {k: getattr(args, k) for k in keys if getattr(args, k) is not None}
    overrides = validate_overrides({**cfg.overrides, **flags}, args.protocol,
                                   lambda key: f"--{key.replace('_', '-')}")
    cfg = dataclasses.replace(cfg, overrides=overrides)
    if args.preset:
        cfg.preset_path = args.preset
    if args.out:
        cfg.output_dir = args.out
    if args.protocol not in ("s21", "trace", "calibrate"):
        load_preset(cfg.preset_path)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    return run_protocol(cfg, "naive" if args.exact else "fast")


if __name__ == "__main__":
    sys.exit(main())
