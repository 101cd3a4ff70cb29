"""Command-line front end: simulate | estimate | extract | evaluate | demo.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError
from scipy.signal import fftconvolve

from . import fileio
from .echoes import echoes_from_csv, echoes_from_json, echoes_to_csv, echoes_to_json, temporal_norm
from .evalkit import (GroundTruth, ground_truth_from_rir, ground_truth_from_scene, reports_table,
                      score)
from .gfvv import (EstimationError, SeriesDivergence, analytic_gfvv, gfvv_to_gtvv)
from .ism_sim import (AmbisonicSignal, load_scene, render_recording, scene_from_relative, scene_to_dict,
                      speech_like_noise, white_noise)
from .pipeline import METHODS, ConfigError, PipelineConfig, estimate_gtvv_stage, extract_stage
from .rdrir import NumericalError, solve_admm
from .sh_ambi import Direction, build_grid, max_directivity_beamformer, omni_beamformer

log = logging.getLogger("ambirir")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _load_config(args) -> PipelineConfig:
    base = fileio.read_json(args.config) if getattr(args, "config", None) else {}
    cfg = PipelineConfig.from_dict(base)
    flat = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            flat[k] = json.loads(v)
        except json.JSONDecodeError:
            flat[k] = v
    for attr, key in (("method", "method"), ("j_max_ms", "j_max_ms"), ("P", "peaks.P"),
                      ("tolerance", "peaks.tolerance"), ("snr", "snr_db"), ("seed", "seed"),
                      ("grid_res", "grid_resolution_deg")):
        val = getattr(args, attr, None)
        if val is not None:
            flat[key] = val
    return cfg.with_overrides(**flat)


def _excitation(spec: str, duration: float, fs: float, seed: int) -> np.ndarray:
    if spec == "white":
        return white_noise(duration, fs, seed)
    if spec == "speech":
        return speech_like_noise(duration, fs, seed)
    from scipy.io import wavfile
    rate, x = wavfile.read(spec)
    if rate != int(round(fs)):
        raise ConfigError(f"excitation sample rate {rate} differs from {fs}")
    x = np.asarray(x, dtype=float)
    return x if x.ndim == 1 else x[:, 0]


# --- commands ------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    scene = load_scene(args.scene)
    fs = scene.sample_rate
    x = _excitation(args.excitation, args.duration, fs, cfg["seed"])
    rec = render_recording(scene, x, snr_db=cfg["snr_db"], seed=cfg["seed"])
    gt = ground_truth_from_scene(scene)
    fileio.write_ambisonic_wav(args.out, rec.signal, args.normalization,
                               {"scene": scene_to_dict(scene), "ground_truth": gt.to_dict(),
                                "snr_db": cfg["snr_db"]})
    print(f"wrote {args.out} ({rec.signal.n_samples} samples, {rec.signal.data.shape[0]} channels)")
    return EXIT_OK


def cmd_estimate(args) -> int:
    cfg = _load_config(args)
    sig, _ = fileio.read_ambisonic_wav(args.input)
    cfg = cfg.with_overrides(sample_rate=sig.sample_rate)
    omni = cfg["method"] == "tdvv"
    doa = estimate_gtvv_stage(sig, cfg, omni=omni)
    trace = [list(d.degrees) for d in doa.trace]
    fileio.write_gtvv(args.out, doa.gtvv, {"doa_deg": list(doa.direction.degrees),
                                           "doa_trace_deg": trace, "converged": doa.converged,
                                           "reference": "omni" if omni else "refined"})
    az, el = doa.direction.degrees
    print(f"DoA azimuth {az:.1f} deg, elevation {el:.1f} deg after {doa.iterations} iteration(s)")
    return EXIT_OK


def cmd_extract(args) -> int:
    cfg = _load_config(args)
    V, _ = fileio.read_gtvv(args.input)
    cfg = cfg.with_overrides(sample_rate=V.sample_rate)
    est, echoes = extract_stage(V, cfg)
    if est is not None and args.rdrir:
        fileio.write_rdrir(args.rdrir, est)
    text = echoes_to_json(echoes, V.sample_rate) if str(args.echoes).endswith(".json") \
        else echoes_to_csv(echoes, V.sample_rate)
    Path(args.echoes).write_text(text)
    print(f"{len(echoes)} wavefront(s) written to {args.echoes}")
    return EXIT_OK


def _read_truth(path) -> GroundTruth:
    d = fileio.read_json(path)
    return GroundTruth.from_dict(d.get("ground_truth", d))


def _read_echoes(path):
    text = Path(path).read_text()
    return echoes_from_json(text) if str(path).endswith(".json") else echoes_from_csv(text)


def _dataset_rows(args, cfg: PipelineConfig) -> list[dict]:
    root = Path(args.dataset)
    files = sorted(root.glob("*.wav"))
    if not files:
        raise ConfigError(f"no RIR WAV files in {root}")
    methods = args.methods or list(METHODS)
    rows = []
    for f in files:
        rir, meta = fileio.read_ambisonic_wav(f)
        cfg_f = cfg.with_overrides(sample_rate=rir.sample_rate)
        x = _excitation(args.excitation, args.duration, rir.sample_rate, cfg["seed"])
        for order in args.orders or [rir.order]:
            if order > rir.order:
                raise ConfigError(f"{f.name}: order {order} exceeds the RIR order {rir.order}")
            sub = AmbisonicSignal(rir.data[: (order + 1) ** 2], rir.sample_rate)
            clean = fftconvolve(sub.data, x[None, :], axes=1)[:, : x.size]
            rng = np.random.default_rng(cfg["seed"])
            noise = rng.standard_normal(clean.shape)
            p = np.mean(clean[0] ** 2) / np.mean(noise[0] ** 2) * 10 ** (-cfg["snr_db"] / 10)
            sig = AmbisonicSignal(clean + np.sqrt(p) * noise, rir.sample_rate)
            grid = build_grid(cfg["grid_resolution_deg"], order)
            gt = ground_truth_from_rir(sub, grid, cfg["peaks"]["P"], cfg["peaks"]["min_separation"],
                                       cfg_f.window_len, cfg_f.j_max)
            refined = None
            for m in methods:
                if m == "tdvv":
                    doa = estimate_gtvv_stage(sig, cfg_f, grid, omni=True)
                else:
                    refined = refined or estimate_gtvv_stage(sig, cfg_f, grid)
                    doa = refined
                _, ech = extract_stage(doa.gtvv, cfg_f, m, grid)
                rep = score(gt, ech, cfg["peaks"]["tolerance"], cfg["peaks"]["P"])
                row = {"scene": f.stem, "method": m, "order": order,
                       "condition": meta.get("condition", "")}
                row.update({k: v for k, v in rep.to_dict().items() if k != "per_wavefront"})
                rows.append(row)
                log.info("%s L=%d %s: %.2f deg, det %.2f", f.stem, order, m,
                         rep.angular_error_deg, rep.detection_rate)
    return rows


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    if args.dataset:
        rows = _dataset_rows(args, cfg)
        reports = rows
    else:
        if not args.echoes or not args.truth:
            raise ConfigError("evaluate needs --echoes and --truth (or --dataset)")
        gt = _read_truth(args.truth)
        labels = args.labels or [Path(p).stem for p in args.echoes]
        if len(labels) != len(args.echoes):
            raise ConfigError("--labels must match --echoes one to one")
        rows, reports = [], []
        for lab, path in zip(labels, args.echoes):
            rep = score(gt, _read_echoes(path), cfg["peaks"]["tolerance"], cfg["peaks"]["P"])
            reports.append({"label": lab, **rep.to_dict()})
            row = {"scene": Path(args.truth).stem, "method": lab, "order": "", "condition": ""}
            row.update({k: v for k, v in rep.to_dict().items() if k != "per_wavefront"})
            rows.append(row)
    if args.out:
        fileio.write_json(args.out, {"config": cfg.to_dict(), "reports": reports})
    table = reports_table(rows)
    if args.table:
        Path(args.table).write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


def _zeta_csv(columns: dict, zero: int, fs: float) -> str:
    names = list(columns)
    n = len(next(iter(columns.values())))
    lines = ["lag,ms," + ",".join(names)]
    for i in range(n):
        lag = i - zero
        lines.append(f"{lag},{1e3 * lag / fs!r}," + ",".join(repr(float(columns[k][i])) for k in names))
    return "\n".join(lines) + "\n"


def cmd_demo(args) -> int:
    """Temporal-norm curves: GTVV with omni vs steered reference, and the
    ADMM RdRIR recovered from an acausal GTVV."""
    out = Path(args.out_dir)
    cfg = _load_config(args)
    fs, J = 16000.0, 2048
    doa = Direction.from_degrees(30, 10)
    refl = [(37 / fs, 0.8, Direction.from_degrees(120, 0)), (90 / fs, 0.6, Direction.from_degrees(-60, 20)),
            (201 / fs, 0.5, Direction.from_degrees(-160, -30)), (350 / fs, 0.45, Direction.from_degrees(10, 60))]
    scene = scene_from_relative(3, doa, refl, fs, direct_toa=0.005)
    omni = gfvv_to_gtvv(analytic_gfvv(scene, omni_beamformer(3), J))
    steer = gfvv_to_gtvv(analytic_gfvv(scene, max_directivity_beamformer(doa, 3), J))
    strong = scene_from_relative(3, doa, [(25 / fs, 1.5, Direction.from_degrees(-100, 20))], fs,
                                 direct_toa=0.005)
    acausal = gfvv_to_gtvv(analytic_gfvv(strong, omni_beamformer(3), J))
    est = solve_admm(acausal, 100, cfg.admm_config())
    zero = J // 2 - 1
    out.mkdir(parents=True, exist_ok=True)
    (out / "gtvv_reference.csv").write_text(
        _zeta_csv({"zeta_omni": temporal_norm(omni.m), "zeta_steered": temporal_norm(steer.m)}, zero, fs))
    (out / "rdrir_from_acausal.csv").write_text(
        _zeta_csv({"zeta_gtvv": temporal_norm(acausal.m), "zeta_rdrir": temporal_norm(est.h)}, zero, fs))
    print(f"wrote {out / 'gtvv_reference.csv'} and {out / 'rdrir_from_acausal.csv'}")
    return EXIT_OK


# --- parser ----------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry (dotted key, JSON value)")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ambirir", description="Early reflection analysis of Ambisonic recordings")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a scene to an Ambisonic WAV with ground truth")
    p.add_argument("scene")
    p.add_argument("--out", required=True)
    p.add_argument("--excitation", default="white", help="white | speech | path to a mono WAV")
    p.add_argument("--duration", type=float, default=10.0)
    p.add_argument("--snr", type=float)
    p.add_argument("--normalization", choices=("N3D", "SN3D"), default="N3D")
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="GTVV with DoA refinement from a recording")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=METHODS)
    _common(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("extract", help="RdRIR and echo list from a GTVV file")
    p.add_argument("input")
    p.add_argument("--echoes", required=True, help="output echo table (.csv or .json)")
    p.add_argument("--rdrir", help="output RdRIR container")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--j-max-ms", dest="j_max_ms", type=float)
    p.add_argument("--P", type=int)
    p.add_argument("--grid-res", dest="grid_res", type=float)
    _common(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("evaluate", help="score echo lists against ground truth")
    p.add_argument("--echoes", nargs="+")
    p.add_argument("--truth")
    p.add_argument("--labels", nargs="+")
    p.add_argument("--dataset", help="directory of measured RIR WAVs with sidecars")
    p.add_argument("--methods", nargs="+", choices=METHODS)
    p.add_argument("--orders", nargs="+", type=int)
    p.add_argument("--excitation", default="white")
    p.add_argument("--duration", type=float, default=10.0)
    p.add_argument("--out", help="report JSON")
    p.add_argument("--table", help="summary CSV")
    p.add_argument("--P", type=int)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--snr", type=float)
    p.add_argument("--grid-res", dest="grid_res", type=float)
    _common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("demo", help="write temporal-norm curves of synthetic scenes")
    p.add_argument("--out-dir", required=True)
    _common(p)
    p.set_defaults(func=cmd_demo)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (NumericalError, EstimationError, SeriesDivergence, LinAlgError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, fileio.FormatError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
