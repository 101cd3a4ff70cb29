"""Evaluation protocol: ground-truth alignment, delay matching, angular
error, coherence and detection rate."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .echoes import EchoEstimate, fit_direction, pick_peaks, temporal_norm
from .ism_sim import AmbisonicSignal, IsmScene, synthesize_rir
from .sh_ambi import Direction, DirectionGrid, angular_distance


def align_ground_truth(rir: AmbisonicSignal, J: int = 2048) -> tuple[np.ndarray, int, float]:
    """Shift a multichannel RIR so its strongest column sits at lag 0 and
    scale it so that entry (channel 0, lag 0) equals 1.

    Returns
    -------
    m : ndarray (channels, J), centred lag axis (column J/2-1 is lag 0)
    shift : int, samples added to the time axis (minus the peak index)
    scale : float
    """
    data = np.asarray(rir.data, dtype=float)
    zeta = temporal_norm(data)
    if not np.any(zeta > 0):
        raise ValueError("ground-truth RIR is all zeros")
    if J % 2:
        raise ValueError("J must be even")
    peak = int(np.argmax(zeta))
    ref = data[0, peak]
    if ref == 0:
        raise ValueError("channel 0 vanishes at the strongest column; cannot normalize")
    zero = J // 2 - 1
    m = np.zeros((data.shape[0], J))
    lo = peak - zero
    src_lo, src_hi = max(lo, 0), min(lo + J, data.shape[1])
    m[:, src_lo - lo:src_hi - lo] = data[:, src_lo:src_hi]
    scale = 1.0 / ref
    return m * scale, -peak, scale


@dataclass
class GroundTruth:
    delays: list            # samples relative to the direct path, ascending
    directions: list        # Direction per delay
    matrix: Optional[np.ndarray] = None   # aligned RIR on the centred axis
    sample_rate: float = 16000.0

    @property
    def zero(self) -> int:
        return self.matrix.shape[1] // 2 - 1

    def column(self, delay: int) -> Optional[np.ndarray]:
        if self.matrix is None:
            return None
        return self.matrix[:, self.zero + delay]

    def to_dict(self) -> dict:
        return {"sample_rate": self.sample_rate,
                "wavefronts": [{"delay_samples": int(d), "azimuth_deg": dr.degrees[0],
                                "elevation_deg": dr.degrees[1]}
                               for d, dr in zip(self.delays, self.directions)]}

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        try:
            wf = d["wavefronts"]
            return cls([int(w["delay_samples"]) for w in wf],
                       [Direction.from_degrees(w["azimuth_deg"], w["elevation_deg"]) for w in wf],
                       None, float(d.get("sample_rate", 16000.0)))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed ground truth: {exc}") from None


def ground_truth_from_scene(scene: IsmScene, J: int = 2048) -> GroundTruth:
    """Exact delays and directions of a simulated scene, with the aligned
    noiseless RIR attached for coherence."""
    fs = scene.sample_rate
    delays = [int(round(t * fs)) for t in scene.relative_delays()]
    dirs = [w.direction for w in scene.wavefronts]
    length = int(np.ceil(scene.wavefronts[-1].toa * fs)) + 4 * scene.pulse_halfwidth + 2
    rir = synthesize_rir(scene, length)
    rir = AmbisonicSignal(rir.data, fs)
    m, _, _ = align_ground_truth(rir, J)
    return GroundTruth(delays, dirs, m, fs)


def ground_truth_from_rir(rir: AmbisonicSignal, grid: DirectionGrid, P: int = 15,
                          min_separation: int = 2, J: int = 2048,
                          j_max: Optional[int] = None) -> GroundTruth:
    """Ground truth of a measured RIR: the P dominant peaks of the aligned
    RIR's temporal norm with directions fitted on the grid."""
    m, _, _ = align_ground_truth(rir, J)
    zero = J // 2 - 1
    j_max = J // 2 if j_max is None else j_max
    zeta = temporal_norm(m)[zero:zero + j_max + 1]
    zeta[0] = np.inf
    delays = pick_peaks(zeta, P, min_separation)
    dirs = [fit_direction(m[:, zero + d], grid)[0] for d in delays]
    return GroundTruth(delays, dirs, m, rir.sample_rate)


def match_peaks(gt_delays: Sequence[int], est_delays: Sequence[int],
                tolerance: float = 2) -> list[tuple[int, Optional[int]]]:
    """Greedy one-to-one matching by ascending delay distance.

    Candidate pairs within ``tolerance`` are accepted in order of
    (distance, gt index, est index).

    Returns
    -------
    list of (gt_index, est_index or None), one entry per ground-truth delay.
    """
    pairs = [(abs(g - e), i, k) for i, g in enumerate(gt_delays)
             for k, e in enumerate(est_delays) if abs(g - e) <= tolerance]
    pairs.sort()
    gt_used: dict[int, int] = {}
    est_used = set()
    for _, i, k in pairs:
        if i not in gt_used and k not in est_used:
            gt_used[i] = k
            est_used.add(k)
    return [(i, gt_used.get(i)) for i in range(len(gt_delays))]


def coherence(a, b) -> float:
    """``|<a, b>| / (||a|| ||b||)``; NaN when either vector is missing or zero."""
    if a is None or b is None:
        return float("nan")
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0 or a.shape != b.shape:
        return float("nan")
    den = np.linalg.norm(a) * np.linalg.norm(b)
    return float(abs(a @ b) / den) if den > 0 else float("nan")


@dataclass
class WavefrontResult:
    gt_delay: int
    matched: bool
    est_delay: Optional[int]
    angular_err: Optional[float]
    coherence: Optional[float]


@dataclass
class EvalReport:
    angular_error_deg: float
    median_angular_error_deg: float
    coherence: float
    detection_rate: float
    matched: int
    P: int
    tolerance: float
    per_wavefront: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["gt_delay", "matched", "est_delay", "angular_err_deg", "coherence"])
        for w in self.per_wavefront:
            wr.writerow([w.gt_delay, int(w.matched), "" if w.est_delay is None else w.est_delay,
                         "" if w.angular_err is None else repr(w.angular_err),
                         "" if w.coherence is None else repr(w.coherence)])
        return buf.getvalue()


def _nanmean(x) -> float:
    x = np.asarray([v for v in x if v is not None and np.isfinite(v)], dtype=float)
    return float(x.mean()) if x.size else float("nan")


def _nanmedian(x) -> float:
    x = np.asarray([v for v in x if v is not None and np.isfinite(v)], dtype=float)
    return float(np.median(x)) if x.size else float("nan")


def score(gt: GroundTruth, est: Sequence[EchoEstimate], tolerance: float = 2,
          P: Optional[int] = None) -> EvalReport:
    """Compare an estimated echo list to the ground truth.

    The first ``P`` ground-truth wavefronts (all when None) are matched
    against the estimates.  Angular error is measured between directions
    of matched pairs and coherence between their raw SH columns; the
    detection rate is ``matched / P``.
    """
    P = len(gt.delays) if P is None else min(P, len(gt.delays))
    if P == 0:
        raise ValueError("ground truth has no wavefronts")
    gt_delays = list(gt.delays[:P])
    # order-independent view of the estimates
    est = sorted(est, key=lambda e: (e.delay, e.direction.azimuth, e.direction.elevation))
    pairs = match_peaks(gt_delays, [e.delay for e in est], tolerance)
    rows = []
    for i, k in pairs:
        if k is None:
            rows.append(WavefrontResult(gt_delays[i], False, None, None, None))
            continue
        e = est[k]
        err = angular_distance(gt.directions[i], e.direction)
        coh = coherence(gt.column(gt_delays[i]), e.raw_column)
        rows.append(WavefrontResult(gt_delays[i], True, e.delay, err,
                                    None if not np.isfinite(coh) else coh))
    matched = sum(r.matched for r in rows)
    errs = [r.angular_err for r in rows if r.matched]
    cohs = [r.coherence for r in rows if r.matched]
    return EvalReport(_nanmean(errs), _nanmedian(errs), _nanmean(cohs), matched / P,
                      matched, P, float(tolerance), rows)


def reports_table(rows: Sequence[dict]) -> str:
    """CSV with one row per (scene, method, order, condition) entry."""
    cols = ["scene", "method", "order", "condition", "angular_error_deg",
            "median_angular_error_deg", "coherence", "detection_rate", "P", "tolerance"]
    buf = io.StringIO()
    wr = csv.DictWriter(buf, cols, extrasaction="ignore", lineterminator="\n")
    wr.writeheader()
    for r in rows:
        wr.writerow(r)
    return buf.getvalue()
