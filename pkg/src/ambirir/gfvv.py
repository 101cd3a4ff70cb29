"""Generalized velocity vectors: least-squares estimation in the STFT
domain, transformation to the time domain, iterative DoA refinement, the
closed-form geometric series of a well-behaved GTVV and the
pseudointensity baseline.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .ism_sim import IsmScene
from .sh_ambi import (Beamformer, Direction, DirectionGrid, angular_distance,
                      max_directivity_beamformer, nearest_direction, omni_beamformer)
from .spectral import CrossSpectra, StftTensor


class EstimationError(RuntimeError):
    """Raised when a GFVV cannot be estimated from the given frames."""


class SeriesDivergence(ValueError):
    """Raised when the reference filter violates the minimum-phase (Taylor)
    condition, so the geometric series does not converge."""


@dataclass(frozen=True)
class GfvvSpectrum:
    v: np.ndarray          # (channels, bins)
    sigma: np.ndarray      # (channels, bins)
    valid: np.ndarray      # (bins,) bool
    beamformer: Beamformer
    frame_center: Optional[int]
    sample_rate: float

    @property
    def window_len(self) -> int:
        return 2 * (self.v.shape[1] - 1)

    def reference_residual(self) -> np.ndarray:
        """``|w^H v(f) - 1|`` per bin."""
        return np.abs(self.beamformer.weights @ self.v - 1.0)


@dataclass(frozen=True)
class GtvvMatrix:
    """Real (channels x J) matrix on the centred lag axis
    ``j = -J/2+1, ..., J/2``; column ``J/2 - 1`` holds lag 0."""

    m: np.ndarray
    sample_rate: float
    beamformer: Optional[Beamformer] = None
    valid: Optional[np.ndarray] = None
    frame_center: Optional[int] = None

    def __post_init__(self):
        if self.m.ndim != 2 or self.m.shape[1] % 2:
            raise ValueError("GTVV matrix must be 2-D with an even number of columns")

    @property
    def J(self) -> int:
        return self.m.shape[1]

    @property
    def order(self) -> int:
        return int(round(np.sqrt(self.m.shape[0]))) - 1

    @property
    def zero(self) -> int:
        return self.J // 2 - 1

    @property
    def lags(self) -> np.ndarray:
        return np.arange(self.J) - self.zero

    def column(self, lag: int) -> np.ndarray:
        return self.m[:, self.zero + lag]

    def with_matrix(self, m: np.ndarray) -> "GtvvMatrix":
        return replace(self, m=m)


def to_centered(x: np.ndarray) -> np.ndarray:
    """Circular sequence (index 0 = lag 0) to the centred axis."""
    J = x.shape[-1]
    return np.roll(x, J // 2 - 1, axis=-1)


def from_centered(x: np.ndarray) -> np.ndarray:
    J = x.shape[-1]
    return np.roll(x, -(J // 2 - 1), axis=-1)


def acausal_energy_fraction(g: GtvvMatrix) -> float:
    e = np.sum(g.m ** 2, axis=0)
    total = e.sum()
    return float(e[: g.zero].sum() / total) if total > 0 else 0.0


# --- estimation ------------------------------------------------------------

def _frame_selection(cs: CrossSpectra, t0: Optional[int], T: Optional[int]) -> np.ndarray:
    n = cs.stft.n_frames
    if t0 is None or T is None:
        idx = np.arange(n)
    else:
        if T % 2:
            raise ValueError("the frame neighbourhood T must be even")
        lo, hi = max(t0 - T // 2, 0), min(t0 + T // 2, n - 1)
        idx = np.arange(lo, hi + 1)
    return idx[cs.active[idx]]


def band_mask(freqs: np.ndarray, low_hz: Optional[float], high_frac: Optional[float],
              sample_rate: float) -> np.ndarray:
    mask = np.ones(freqs.size, dtype=bool)
    if low_hz:
        mask &= freqs >= low_hz
    if high_frac is not None and high_frac < 1:
        mask &= freqs <= high_frac * sample_rate / 2
    return mask


def estimate_gfvv(cs: CrossSpectra, w: Beamformer, t0: Optional[int] = None,
                  T: Optional[int] = None, ridge: float = 1e-10, min_frames: int = 4,
                  band: tuple = (None, None)) -> GfvvSpectrum:
    """Joint least-squares estimate of the GFVV and the noise cross-term.

    For every channel ``l`` and bin ``f`` the per-frame relation
    ``|b_l|^2 = v_l * (w^H b) conj(b_l) + sigma_l`` is stacked over the
    active frames of ``[t0 - T/2, t0 + T/2]`` (all frames when ``t0`` or
    ``T`` is None) and the 2x2 normal equations are solved in closed form
    with a relative ridge on each diagonal entry.  Each valid bin is finally rescaled
    so that ``w^T v = 1`` holds exactly.

    Parameters
    ----------
    cs : CrossSpectra
    w : Beamformer
        Wideband reference beamformer.
    t0, T : int, optional
        Centre frame and (even) neighbourhood size.
    band : (low_hz, high_frac)
        Bins below ``low_hz`` or above ``high_frac`` x Nyquist are marked
        invalid; either entry may be None.  Off by default: filling
        masked bins smears long delays.

    Raises
    ------
    EstimationError
        If fewer than ``min_frames`` active frames are available.
    """
    frames = _frame_selection(cs, t0, T)
    if frames.size < min_frames:
        raise EstimationError(f"only {frames.size} active frames, need {min_frames}")
    x = cs.steered(w.weights, frames)          # regressor, (C, T, F)
    y = cs.power(frames)                       # (C, T, F)
    n = float(frames.size)
    a = np.sum(np.abs(x) ** 2, axis=1)
    b = np.sum(np.conj(x), axis=1)
    c1 = np.sum(np.conj(x) * y, axis=1)
    c2 = np.sum(y, axis=1)
    # ridge on the column-equilibrated system, so the solve is scale invariant
    aa, nn = a * (1 + ridge), n * (1 + ridge)
    det = aa * nn - np.abs(b) ** 2
    ok = det > 1e-12 * aa * nn
    safe = np.where(ok, det, 1.0)
    v = np.where(ok, (nn * c1 - b * c2) / safe, 0.0)
    sigma = np.where(ok, (aa * c2 - np.conj(b) * c1) / safe, 0.0)

    freqs = cs.stft.frequencies
    ref_energy = np.sum(np.abs(np.tensordot(w.weights, cs.bins[:, frames], axes=(0, 0))) ** 2, axis=0)
    valid = ok.all(axis=0) & (ref_energy > 1e-12 * max(ref_energy.max(), 1e-300))
    valid &= band_mask(freqs, band[0], band[1], cs.stft.sample_rate)
    ref = w.weights @ v
    valid &= np.abs(ref) > 1e-6
    v = v / np.where(valid, ref, 1.0)[None, :]
    v[:, ~valid] = 0.0
    sigma[:, ~valid] = 0.0
    center = None if t0 is None else int(t0)
    return GfvvSpectrum(v, sigma, valid, w, center, cs.stft.sample_rate)


def _fill_invalid(v: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Linear interpolation of complex bins across invalid gaps; edge gaps
    hold the nearest valid value."""
    if valid.all() or not valid.any():
        return v
    idx = np.arange(v.shape[1])
    good = idx[valid]
    out = v.copy()
    for ch in range(v.shape[0]):
        out[ch, ~valid] = (np.interp(idx[~valid], good, v[ch, valid].real)
                           + 1j * np.interp(idx[~valid], good, v[ch, valid].imag))
    return out


def gfvv_to_gtvv(g: GfvvSpectrum, J: Optional[int] = None) -> GtvvMatrix:
    """Channel-wise inverse FFT of a one-sided GFVV onto the centred lag
    axis."""
    n_bins = g.v.shape[1]
    if J is None:
        J = 2 * (n_bins - 1)
    if J // 2 + 1 != n_bins:
        raise ValueError(f"J={J} is inconsistent with {n_bins} frequency bins")
    v = _fill_invalid(g.v, g.valid)
    m = to_centered(np.fft.irfft(v, n=J, axis=-1))
    return GtvvMatrix(m, g.sample_rate, g.beamformer, g.valid.copy(), g.frame_center)


def estimate_gtvv(cs: CrossSpectra, w: Beamformer, buffer_frames: Optional[int] = None,
                  stride_frames: Optional[int] = None, **kwargs) -> GtvvMatrix:
    """GTVV of a whole recording.

    With ``buffer_frames`` set, one GFVV is estimated per buffer (centres
    spaced by ``stride_frames``) and the estimates are averaged bin-wise
    over the buffers where the bin is valid; otherwise a single estimate
    spans every active frame.
    """
    if buffer_frames is None:
        return gfvv_to_gtvv(estimate_gfvv(cs, w, **kwargs))
    T = buffer_frames + buffer_frames % 2
    stride = stride_frames or max(T // 2, 1)
    n = cs.stft.n_frames
    acc = None
    count = None
    template = None
    for t0 in range(T // 2, max(n - T // 2, T // 2 + 1), stride):
        try:
            g = estimate_gfvv(cs, w, t0, T, **kwargs)
        except EstimationError:
            continue
        if acc is None:
            acc = np.zeros_like(g.v)
            count = np.zeros(g.v.shape[1])
            template = g
        acc[:, g.valid] += g.v[:, g.valid]
        count += g.valid
    if acc is None:
        raise EstimationError("no buffer had enough active frames")
    valid = count > 0
    v = np.where(valid, acc / np.maximum(count, 1), 0.0)
    mean = replace(template, v=v, sigma=np.zeros_like(v), valid=valid, frame_center=None)
    return gfvv_to_gtvv(mean)


@dataclass
class DoaResult:
    direction: Direction
    gtvv: GtvvMatrix
    trace: list
    converged: bool

    @property
    def iterations(self) -> int:
        return len(self.trace)


def refine_doa(cs: CrossSpectra, order: int, grid: DirectionGrid, max_iter: int = 10,
               tol_deg: float = 1.0, initial: Optional[Direction] = None,
               buffer_frames: Optional[int] = None, stride_frames: Optional[int] = None,
               **kwargs) -> DoaResult:
    """Iteratively re-steer a maximum-directivity reference towards the
    direction read from the GTVV at lag 0.

    Iteration 0 uses the omnidirectional reference (or a beam steered to
    ``initial``).  The loop stops when consecutive directions differ by
    less than ``tol_deg`` or after ``max_iter`` GTVV evaluations.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    w = omni_beamformer(order) if initial is None else max_directivity_beamformer(initial, order)
    trace = []
    converged = False
    while True:
        g = estimate_gtvv(cs, w, buffer_frames, stride_frames, **kwargs)
        d, _ = nearest_direction(g.column(0), grid)
        if trace and angular_distance(d, trace[-1]) < tol_deg:
            trace.append(d)
            converged = True
            break
        trace.append(d)
        if len(trace) >= max_iter:
            break
        w = max_directivity_beamformer(d, order)
    return DoaResult(d, g, trace, converged)


# --- analytic model ----------------------------------------------------------

def _reflection_response(scene: IsmScene, freqs: np.ndarray) -> np.ndarray:
    """Complex relative transfer factors ``g_n(f) exp(-j 2 pi f tau_n)``,
    shape (N, F) for the reflections n >= 1."""
    tau = scene.relative_delays()[1:]
    g = scene.relative_gains()[1:]
    ph = np.exp(-2j * np.pi * np.outer(tau, freqs))
    resp = g[:, None] * ph
    c = scene.reflection_lowpass
    if c > 0:
        z = np.exp(-2j * np.pi * freqs / scene.sample_rate)
        resp = resp * ((1 - c) / (1 - c * z))[None, :]
    return resp


def analytic_gfvv(scene: IsmScene, w: Beamformer, J: int) -> GfvvSpectrum:
    """Noiseless GFVV ratio of the scene's early wavefronts on the J-point
    one-sided frequency grid."""
    freqs = np.fft.rfftfreq(J, 1 / scene.sample_rate)
    Y = scene.encodings()
    beta = w.weights @ Y
    beta0 = beta[0]
    resp = _reflection_response(scene, freqs)
    num = Y[:, :1] + Y[:, 1:] @ resp
    den = 1.0 + (beta[1:] / beta0) @ resp
    v = num / (beta0 * den[None, :])
    valid = np.ones(freqs.size, dtype=bool)
    return GfvvSpectrum(v, np.zeros_like(v), valid, w, None, scene.sample_rate)


def reference_spectrum(scene: IsmScene, w: Beamformer, J: int = 4096) -> np.ndarray:
    """``a(f) = 1 + sum_n kappa_n(f) exp(-j 2 pi f tau_n)`` on a J-point grid."""
    freqs = np.fft.rfftfreq(J, 1 / scene.sample_rate)
    beta = w.weights @ scene.encodings()
    return 1.0 + (beta[1:] / beta[0]) @ _reflection_response(scene, freqs)


def scene_kappas(scene: IsmScene, w: Beamformer) -> np.ndarray:
    """Flat ``kappa_n = g_n * beta_n`` of every reflection."""
    beta = w.weights @ scene.encodings()
    return scene.relative_gains()[1:] * beta[1:] / beta[0]


@dataclass(frozen=True)
class TaylorMargin:
    margin: float
    satisfied: bool
    strong_bound: Optional[float] = None

    @property
    def strong_satisfied(self) -> Optional[bool]:
        return None if self.strong_bound is None else self.strong_bound < 1


def taylor_condition_margin(reference, kappas: Optional[Sequence[float]] = None) -> TaylorMargin:
    """Check that the reference filter admits a convergent geometric series.

    Parameters
    ----------
    reference : array_like
        Reference spectrum ``a(f)`` (normalized so the direct term is 1).
    kappas : sequence of float, optional
        Per-reflection ``kappa_n``; enables the stronger sufficient bound
        ``sum_n |kappa_n| < 1``.
    """
    a = np.asarray(reference)
    margin = float(np.max(np.abs(a - 1.0))) if a.size else 0.0
    strong = None if kappas is None else float(np.sum(np.abs(kappas)))
    return TaylorMargin(margin, margin < 1, strong)


def scene_taylor_margin(scene: IsmScene, w: Beamformer, J: int = 4096) -> TaylorMargin:
    return taylor_condition_margin(reference_spectrum(scene, w, J), scene_kappas(scene, w))


@dataclass(frozen=True)
class SeriesTerm:
    wavefront: int
    k: int
    coefficient: np.ndarray   # SH-domain vector multiplying the delayed impulse
    delay: float              # samples, k * tau_n


@dataclass(frozen=True)
class ClosedFormSeries:
    terms: list
    truncation_k: int
    residual_bound: float


def _place_delayed(out: np.ndarray, coeff: np.ndarray, delay: float):
    J = out.shape[1]
    rd = round(delay)
    if abs(delay - rd) < 1e-9:
        out[:, int(rd) % J] += coeff
    else:
        freqs = np.fft.rfftfreq(J)
        kernel = np.fft.irfft(np.exp(-2j * np.pi * freqs * delay), n=J)
        out += np.outer(coeff, kernel)


def closed_form_gtvv(scene: IsmScene, w: Beamformer, truncation_k: int, J: int):
    """Truncated closed-form series of the GTVV for a wideband reference.

    Each reflection contributes
    ``sum_{k=1..K} (-kappa_n)^k delta(t - k tau_n) (y_0 - y_n / beta_n)``;
    cross-terms between reflections are omitted and accounted for in
    ``residual_bound`` (an l1 bound on everything dropped).

    Returns
    -------
    (GtvvMatrix, ClosedFormSeries)

    Raises
    ------
    SeriesDivergence
        If the reference violates the Taylor condition.
    """
    if scene.reflection_lowpass:
        raise ValueError("the closed form assumes frequency-flat reflections")
    tm = scene_taylor_margin(scene, w)
    if not tm.satisfied:
        raise SeriesDivergence(f"Taylor condition violated (margin {tm.margin:.3f} >= 1)")
    Y = scene.encodings()
    beta = w.weights @ Y
    y0 = Y[:, 0] / beta[0]
    g = scene.relative_gains()
    tau = scene.relative_delays() * scene.sample_rate
    kap = scene_kappas(scene, w)
    out = np.zeros((Y.shape[0], J))
    out[:, 0] = y0
    terms = [SeriesTerm(0, 0, y0, 0.0)]
    tail = 0.0
    for n in range(1, len(scene.wavefronts)):
        kn, gn, yn = kap[n - 1], g[n], Y[:, n]
        for k in range(1, truncation_k + 1):
            # (-kappa)^k (y0 - yn/beta) written without dividing by beta
            coeff = (-1) ** k * (kn ** k * y0 - gn * kn ** (k - 1) * yn / beta[0])
            _place_delayed(out, coeff, k * tau[n])
            terms.append(SeriesTerm(n, k, coeff, k * tau[n]))
        ak = abs(kn)
        if ak < 1:
            tail += ak ** (truncation_k + 1) / (1 - ak) * np.abs(y0).sum()
            tail += gn * ak ** truncation_k / (1 - ak) * np.abs(yn).sum() / abs(beta[0])
        else:
            tail = np.inf
    S = float(np.sum(np.abs(kap)))
    if len(kap) > 1:
        if S < 1:
            h_l1 = np.abs(y0).sum() + np.sum(g[1:] * np.abs(Y[:, 1:]).sum(axis=0)) / abs(beta[0])
            cross = 1 / (1 - S) - np.sum(1 / (1 - np.abs(kap))) + (len(kap) - 1)
            tail += h_l1 * max(cross, 0.0)
        else:
            tail = np.inf
    gt = GtvvMatrix(to_centered(out), scene.sample_rate, w)
    return gt, ClosedFormSeries(terms, truncation_k, float(tail))


# --- pseudointensity -----------------------------------------------------------

@dataclass(frozen=True)
class PivResult:
    frame_vectors: np.ndarray  # (frames, 3) in Cartesian x, y, z
    pooled: np.ndarray         # (3,)
    direction: Direction


def pseudointensity(t: StftTensor, active: Optional[np.ndarray] = None) -> PivResult:
    """Pseudointensity ``Re(conj(b_0) b_{1:3})`` pooled over bins and frames.

    ACN channels 1, 2, 3 carry the y, z and x dipoles, so the Cartesian
    vector is ``(b_3, b_1, b_2)``.  Pooling weights each bin-frame's
    normalized intensity ``i / |b_0|^2`` by ``|b_0|^2``, i.e. the plain sum
    of intensities.
    """
    if t.bins.shape[0] < 4:
        raise ValueError("pseudointensity needs at least first-order input")
    b = t.bins if active is None else t.bins[:, active]
    inten = np.real(np.conj(b[0])[None] * b[1:4])     # (3, frames, bins)
    xyz = inten[[2, 0, 1]]
    per_frame = np.sum(xyz, axis=2).T
    pooled = per_frame.sum(axis=0)
    return PivResult(per_frame, pooled, Direction.from_cartesian(pooled))
