"""Wavefront extraction from a GTVV or RdRIR matrix: temporal-norm peak
picking, SH direction fitting and echo-list serialization."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .gfvv import GtvvMatrix
from .rdrir import RdRirEstimate
from .sh_ambi import Beamformer, Direction, DirectionGrid, nearest_direction


@dataclass(frozen=True)
class EchoEstimate:
    delay: int                 # samples relative to the direct path
    direction: Direction
    gain: float                # zeta(delay) / zeta(0)
    raw_column: np.ndarray
    correlation: float


def temporal_norm(m) -> np.ndarray:
    """Column-wise Euclidean norm ``zeta(j) = ||m(:, j)||``."""
    return np.linalg.norm(np.asarray(m, dtype=float), axis=0)


def pick_peaks(zeta: np.ndarray, count: int, min_separation: int = 2,
               window: Optional[tuple] = None) -> list[int]:
    """Indices of the ``count`` largest local maxima of ``zeta``.

    A sample is a peak when it is strictly larger than its left neighbour
    and not smaller than its right one (so a plateau is claimed by its
    earliest sample).  Peaks are taken greedily by decreasing magnitude,
    ties going to the earlier index; anything within ``min_separation``
    samples of an accepted peak is skipped.

    Parameters
    ----------
    zeta : ndarray
    count : int
    min_separation : int
    window : (lo, hi), optional
        Inclusive index range searched.

    Returns
    -------
    list of int, sorted ascending.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    z = np.asarray(zeta, dtype=float)
    lo, hi = (0, z.size - 1) if window is None else window
    lo, hi = max(int(lo), 0), min(int(hi), z.size - 1)
    if hi < lo:
        return []
    pad = np.concatenate([[-np.inf], z, [-np.inf]])
    idx = np.arange(lo, hi + 1)
    is_peak = (pad[idx + 1] > pad[idx]) & (pad[idx + 1] >= pad[idx + 2]) & (z[idx] > 0)
    cand = idx[is_peak]
    order = np.lexsort((cand, -z[cand]))
    chosen: list[int] = []
    for c in cand[order]:
        if all(abs(int(c) - p) >= min_separation for p in chosen):
            chosen.append(int(c))
            if len(chosen) == count:
                break
    return sorted(chosen)


def fit_direction(column, grid: DirectionGrid) -> tuple[Direction, float]:
    return nearest_direction(column, grid)


def fit_direction_corrected(column, y0, w: Beamformer, grid: DirectionGrid) -> tuple[Direction, float]:
    """Direction fit that removes the reference leakage of the direct path.

    A GTVV column at an echo delay behaves like ``g (y_n - beta_n y_0)``
    with ``beta_n = w^T y_n``.  Each atom ``y`` is mapped through
    ``M = I - y0 w^T`` (which annihilates its own ``y0`` component) and
    scored by ``|c^T M y| / ||M y||``; the most correlated atom wins.

    Normalizing by ``||M y||`` matters: for a maximum-directivity ``w``
    the unnormalized score reduces to ``c^T y`` up to a constant.
    """
    c = np.asarray(column, dtype=float)
    nc = np.linalg.norm(c)
    if nc == 0:
        raise ValueError("cannot fit a direction to a zero vector")
    y0 = np.asarray(y0, dtype=float)
    wv = w.weights
    A = grid.atoms
    MA = A - np.outer(y0, wv @ A)
    norms = np.linalg.norm(MA, axis=0)
    score = np.abs(c @ MA) / (nc * np.where(norms > 1e-12, norms, np.inf))
    idx = int(np.argmax(score))
    return grid.direction(idx), float(min(score[idx], 1.0))


def _as_matrix(est) -> tuple[np.ndarray, int, Optional[Beamformer], Optional[int]]:
    if isinstance(est, RdRirEstimate):
        return est.h, est.zero, est.beamformer, est.j_max
    if isinstance(est, GtvvMatrix):
        return est.m, est.zero, est.beamformer, None
    raise TypeError("expected a GtvvMatrix or RdRirEstimate")


def extract_echoes(est: Union[RdRirEstimate, GtvvMatrix], grid: DirectionGrid, P: int = 15,
                   min_separation: int = 2, corrected: bool = False,
                   j_max: Optional[int] = None, floor: float = 1e-3) -> list[EchoEstimate]:
    """Delays, directions and relative gains of the dominant wavefronts.

    The lag-0 wavefront is always returned first and counts towards
    ``P``.  Further peaks are searched in lags ``[1, j_max]`` (the RdRIR
    window, or the whole causal half for a GTVV) and must exceed
    ``floor * zeta(0)``, which keeps numerical dust from being reported.
    """
    m, zero, w, jm = _as_matrix(est)
    if j_max is None:
        j_max = jm if jm is not None else m.shape[1] - 1 - zero
    zeta = temporal_norm(m)
    z0 = zeta[zero]
    if z0 == 0:
        raise ValueError("the lag-0 column is zero; nothing to normalize by")
    causal = zeta[zero:zero + j_max + 1].copy()
    causal[causal < floor * z0] = 0.0
    causal[0] = np.inf  # keep lag 0 and its exclusion zone
    lags = pick_peaks(causal, P, min_separation)
    y0 = m[:, zero] / (w.weights @ m[:, zero]) if (corrected and w is not None) else None
    out = []
    for lag in lags:
        col = m[:, zero + lag]
        if lag > 0 and y0 is not None:
            d, corr = fit_direction_corrected(col, y0, w, grid)
        else:
            d, corr = fit_direction(col, grid)
        out.append(EchoEstimate(lag, d, float(zeta[zero + lag] / z0), col.copy(), corr))
    return out


_FIELDS = ["delay_samples", "delay_ms", "azimuth_deg", "elevation_deg", "gain", "correlation"]


def echoes_to_rows(echoes: Sequence[EchoEstimate], sample_rate: float) -> list[dict]:
    rows = []
    for e in echoes:
        az, el = e.direction.degrees
        row = {"delay_samples": e.delay, "delay_ms": 1e3 * e.delay / sample_rate,
               "azimuth_deg": az, "elevation_deg": el, "gain": e.gain,
               "correlation": e.correlation}
        row.update({f"raw_{i}": float(x) for i, x in enumerate(e.raw_column)})
        rows.append(row)
    return rows


def echoes_to_csv(echoes: Sequence[EchoEstimate], sample_rate: float) -> str:
    rows = echoes_to_rows(echoes, sample_rate)
    n_raw = len(echoes[0].raw_column) if echoes else 0
    buf = io.StringIO()
    wr = csv.DictWriter(buf, _FIELDS + [f"raw_{i}" for i in range(n_raw)], lineterminator="\n")
    wr.writeheader()
    for r in rows:
        wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def echoes_to_json(echoes: Sequence[EchoEstimate], sample_rate: float) -> str:
    return json.dumps({"sample_rate": sample_rate, "echoes": echoes_to_rows(echoes, sample_rate)},
                      indent=2)


def _row_to_echo(r: dict) -> EchoEstimate:
    raw = []
    i = 0
    while f"raw_{i}" in r and r[f"raw_{i}"] not in ("", None):
        raw.append(float(r[f"raw_{i}"]))
        i += 1
    return EchoEstimate(int(round(float(r["delay_samples"]))),
                        Direction.from_degrees(float(r["azimuth_deg"]), float(r["elevation_deg"])),
                        float(r.get("gain") or 0.0), np.array(raw),
                        float(r.get("correlation") or 0.0))


def echoes_from_csv(text: str) -> list[EchoEstimate]:
    """Parse an echo table; only delay and direction columns are required,
    so externally produced lists can be scored too."""
    rd = csv.DictReader(io.StringIO(text))
    missing = {"delay_samples", "azimuth_deg", "elevation_deg"} - set(rd.fieldnames or [])
    if missing:
        raise ValueError(f"echo table lacks columns {sorted(missing)}")
    return [_row_to_echo(r) for r in rd]


def echoes_from_json(text: str) -> list[EchoEstimate]:
    return [_row_to_echo(r) for r in json.loads(text)["echoes"]]
