"""End-to-end analysis: STFT, GTVV with DoA refinement, RdRIR solving and
echo extraction, driven by one configuration object."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .echoes import EchoEstimate, extract_echoes
from .gfvv import DoaResult, GtvvMatrix, refine_doa
from .ism_sim import AmbisonicSignal
from .rdrir import AdmmConfig, RdRirEstimate, solve
from .sh_ambi import DirectionGrid, build_grid
from .spectral import cross_periodograms, stft

METHODS = ("ac", "cov", "admm", "gtvv", "tdvv")


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "order": 3,
    "sample_rate": 16000.0,
    "stft": {"window_s": 0.128, "overlap": 0.75, "taper": 0.25},
    "buffer_s": 0.5,
    "stride_s": 0.25,
    "vad_threshold": 1.0,
    "j_max_ms": 50.0,
    "method": "admm",
    "admm": {"mu": None, "max_iter": 100, "tol": 1e-6},
    "doa": {"max_iter": 10, "tol_deg": 1.0},
    "grid_resolution_deg": 2.0,
    "peaks": {"P": 15, "min_separation": 2, "tolerance": 2, "corrected": False},
    "snr_db": 20.0,
    "seed": 0,
}


def _merge(base: dict, over: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {path + k!r} must be an object")
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = v
    return out


@dataclass(frozen=True)
class PipelineConfig:
    values: dict

    @classmethod
    def from_dict(cls, d: Optional[dict] = None) -> "PipelineConfig":
        cfg = cls(_merge(DEFAULTS, d or {}))
        cfg.validate()
        return cfg

    def with_overrides(self, **flat) -> "PipelineConfig":
        """Overrides given as dotted keys, e.g. ``{"peaks.P": 6}``."""
        d = copy.deepcopy(self.values)
        for key, val in flat.items():
            if val is None:
                continue
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = val
        cfg = PipelineConfig(d)
        cfg.validate()
        return cfg

    def __getitem__(self, k):
        return self.values[k]

    def validate(self):
        v = self.values

        def positive(name, x, allow_none=False):
            if x is None and allow_none:
                return
            if not isinstance(x, (int, float)) or isinstance(x, bool) or not x > 0:
                raise ConfigError(f"{name} must be a positive number, got {x!r}")

        if not isinstance(v["order"], int) or v["order"] < 0:
            raise ConfigError("order must be a non-negative integer")
        positive("sample_rate", v["sample_rate"])
        positive("stft.window_s", v["stft"]["window_s"])
        ov = v["stft"]["overlap"]
        if not isinstance(ov, (int, float)) or not 0 <= ov < 1:
            raise ConfigError("stft.overlap must lie in [0, 1)")
        if not 0 <= v["stft"]["taper"] <= 1:
            raise ConfigError("stft.taper must lie in [0, 1]")
        positive("buffer_s", v["buffer_s"], allow_none=True)
        positive("stride_s", v["stride_s"], allow_none=True)
        positive("vad_threshold", v["vad_threshold"], allow_none=True)
        if not isinstance(v["j_max_ms"], (int, float)) or v["j_max_ms"] < 0:
            raise ConfigError("j_max_ms must be >= 0")
        if v["method"] not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {v['method']!r}")
        positive("admm.mu", v["admm"]["mu"], allow_none=True)
        positive("admm.tol", v["admm"]["tol"])
        if not isinstance(v["admm"]["max_iter"], int) or v["admm"]["max_iter"] < 1:
            raise ConfigError("admm.max_iter must be a positive integer")
        if not isinstance(v["doa"]["max_iter"], int) or v["doa"]["max_iter"] < 1:
            raise ConfigError("doa.max_iter must be a positive integer")
        positive("doa.tol_deg", v["doa"]["tol_deg"])
        g = v["grid_resolution_deg"]
        if not isinstance(g, (int, float)) or not 0.5 <= g <= 30:
            raise ConfigError("grid_resolution_deg must lie in [0.5, 30]")
        pk = v["peaks"]
        if not isinstance(pk["P"], int) or pk["P"] < 1:
            raise ConfigError("peaks.P must be a positive integer")
        if not isinstance(pk["min_separation"], int) or pk["min_separation"] < 1:
            raise ConfigError("peaks.min_separation must be a positive integer")
        if not isinstance(pk["tolerance"], (int, float)) or pk["tolerance"] < 0:
            raise ConfigError("peaks.tolerance must be >= 0")
        if not isinstance(v["snr_db"], (int, float)):
            raise ConfigError("snr_db must be a number")
        if not isinstance(v["seed"], int):
            raise ConfigError("seed must be an integer")

    # derived quantities
    @property
    def window_len(self) -> int:
        n = int(round(self["stft"]["window_s"] * self["sample_rate"]))
        return n + n % 2

    @property
    def hop(self) -> int:
        return max(int(round(self.window_len * (1 - self["stft"]["overlap"]))), 1)

    @property
    def j_max(self) -> int:
        jm = int(round(self["j_max_ms"] * 1e-3 * self["sample_rate"]))
        return min(jm, self.window_len // 2 - 1)

    def frames(self, seconds: Optional[float]) -> Optional[int]:
        if seconds is None:
            return None
        return max(int(round(seconds * self["sample_rate"] / self.hop)), 1)

    def admm_config(self) -> AdmmConfig:
        a = self["admm"]
        return AdmmConfig(mu=a["mu"], max_iter=a["max_iter"], tol_primal=a["tol"], tol_dual=a["tol"])

    def to_dict(self) -> dict:
        return copy.deepcopy(self.values)


@dataclass
class PipelineResult:
    doa: DoaResult
    gtvv: GtvvMatrix
    rdrir: Optional[RdRirEstimate]
    echoes: list
    method: str


def estimate_gtvv_stage(signal: AmbisonicSignal, cfg: PipelineConfig,
                        grid: Optional[DirectionGrid] = None, omni: bool = False) -> DoaResult:
    """STFT and GTVV with DoA refinement (a single omni pass when ``omni``)."""
    if abs(signal.sample_rate - cfg["sample_rate"]) > 1e-9:
        raise ConfigError(f"signal sample rate {signal.sample_rate} differs from config "
                          f"{cfg['sample_rate']}")
    st = cfg["stft"]
    S = stft(signal, cfg.window_len, st["overlap"], "tukey", st["taper"])
    cs = cross_periodograms(S, cfg["vad_threshold"])
    grid = grid or build_grid(cfg["grid_resolution_deg"], signal.order)
    max_iter = 1 if omni else cfg["doa"]["max_iter"]
    return refine_doa(cs, signal.order, grid, max_iter=max_iter, tol_deg=cfg["doa"]["tol_deg"],
                      buffer_frames=cfg.frames(cfg["buffer_s"]),
                      stride_frames=cfg.frames(cfg["stride_s"]))


def extract_stage(V: GtvvMatrix, cfg: PipelineConfig, method: Optional[str] = None,
                  grid: Optional[DirectionGrid] = None) -> tuple[Optional[RdRirEstimate], list]:
    method = method or cfg["method"]
    grid = grid or build_grid(cfg["grid_resolution_deg"], V.order)
    pk = cfg["peaks"]
    if method in ("gtvv", "tdvv"):
        ech = extract_echoes(V, grid, pk["P"], pk["min_separation"], pk["corrected"],
                             j_max=cfg.j_max)
        return None, ech
    est = solve(V, cfg.j_max, method, cfg.admm_config())
    return est, extract_echoes(est, grid, pk["P"], pk["min_separation"], pk["corrected"])


def run_pipeline(signal: AmbisonicSignal, cfg: PipelineConfig, method: Optional[str] = None,
                 grid: Optional[DirectionGrid] = None, doa: Optional[DoaResult] = None) -> PipelineResult:
    """Analyse one Ambisonic recording with the configured method.

    ``tdvv`` extracts echoes from the omni-referenced GTVV, ``gtvv`` from
    the refined-reference GTVV, and ``ac``/``cov``/``admm`` from the
    RdRIR computed on the refined GTVV.  A precomputed refined ``doa``
    may be passed to share it between methods.
    """
    method = method or cfg["method"]
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    grid = grid or build_grid(cfg["grid_resolution_deg"], signal.order)
    if method == "tdvv":
        doa = estimate_gtvv_stage(signal, cfg, grid, omni=True)
    elif doa is None:
        doa = estimate_gtvv_stage(signal, cfg, grid)
    est, ech = extract_stage(doa.gtvv, cfg, method, grid)
    return PipelineResult(doa, doa.gtvv, est, ech, method)


def echo_delays(echoes: list[EchoEstimate]) -> np.ndarray:
    return np.array([e.delay for e in echoes], dtype=int)
