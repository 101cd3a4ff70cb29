"""STFT analysis/synthesis and per-frame cross-periodograms."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

from .ism_sim import AmbisonicSignal

WINDOWS = ("tukey", "hann", "rect")


def make_window(kind: str, length: int, taper: float = 0.25) -> np.ndarray:
    if kind == "tukey":
        return get_window(("tukey", taper), length, fftbins=True)
    if kind == "hann":
        return get_window("hann", length, fftbins=True)
    if kind in ("rect", "boxcar"):
        return np.ones(length)
    raise ValueError(f"unknown window kind {kind!r}")


@dataclass(frozen=True)
class StftTensor:
    """One-sided STFT, ``bins`` has shape (channels, frames, J/2+1).

    Frames are centred: frame ``t`` covers input samples
    ``[t*hop - J/2, t*hop + J/2)`` (the input is zero-padded by J/2 on
    both sides).
    """

    bins: np.ndarray
    window_len: int
    hop: int
    sample_rate: float
    window_kind: str
    window: np.ndarray
    n_samples: int

    @property
    def n_frames(self) -> int:
        return self.bins.shape[1]

    @property
    def n_bins(self) -> int:
        return self.bins.shape[2]

    @property
    def frequencies(self) -> np.ndarray:
        return np.fft.rfftfreq(self.window_len, 1 / self.sample_rate)


def stft(x: AmbisonicSignal, window_len: int = 2048, overlap: float = 0.75,
         window_kind: str = "tukey", taper: float = 0.25) -> StftTensor:
    """Short-time Fourier transform of every channel.

    Raises
    ------
    ValueError
        For an odd window length, an overlap outside [0, 1) or a signal
        shorter than one window.
    """
    if window_len <= 0 or window_len % 2:
        raise ValueError("window_len must be a positive even integer")
    if not 0 <= overlap < 1:
        raise ValueError("overlap must lie in [0, 1)")
    data = x.data
    if data.shape[1] < window_len:
        raise ValueError("signal shorter than one analysis window")
    hop = max(int(round(window_len * (1 - overlap))), 1)
    win = make_window(window_kind, window_len, taper)
    half = window_len // 2
    n = data.shape[1]
    n_frames = int(np.ceil(n / hop)) + 1
    total = (n_frames - 1) * hop + window_len
    padded = np.zeros((data.shape[0], total))
    padded[:, half:half + n] = data
    frames = sliding_window_view(padded, window_len, axis=1)[:, ::hop][:, :n_frames]
    bins = np.fft.rfft(frames * win, axis=-1)
    return StftTensor(bins, window_len, hop, x.sample_rate, window_kind, win, n)


def istft(t: StftTensor) -> AmbisonicSignal:
    """Weighted overlap-add inverse of :func:`stft`.

    Raises
    ------
    ValueError
        If the squared window does not overlap-add to a positive sum over
        every output sample.
    """
    J, hop, win = t.window_len, t.hop, t.window
    frames = np.fft.irfft(t.bins, n=J, axis=-1) * win
    n_frames = t.n_frames
    total = (n_frames - 1) * hop + J
    out = np.zeros((t.bins.shape[0], total))
    norm = np.zeros(total)
    for k in range(n_frames):
        out[:, k * hop:k * hop + J] += frames[:, k]
        norm[k * hop:k * hop + J] += win ** 2
    half = J // 2
    norm = norm[half:half + t.n_samples]
    if np.any(norm < 1e-10 * np.max(win ** 2)):
        raise ValueError("window/hop combination does not satisfy the overlap-add condition")
    return AmbisonicSignal(out[:, half:half + t.n_samples] / norm, t.sample_rate)


def frame_activity(t: StftTensor, threshold: float = 1.0, channel: int = 0) -> np.ndarray:
    """Energy VAD: a frame is active when its channel energy exceeds
    ``threshold`` times the median frame energy."""
    e = np.sum(np.abs(t.bins[channel]) ** 2, axis=-1)
    med = np.median(e)
    active = e > threshold * med
    if not active.any():
        active = e > 0
    return active


@dataclass(frozen=True)
class CrossSpectra:
    """Instantaneous cross-periodograms ``phi[l', l](f, t) = b_l' conj(b_l)``.

    Each per-frame cross-spectral matrix is rank one, so it is stored in
    factored form (the STFT coefficients themselves); the full
    ``channels x channels x frames x bins`` array is available through
    :attr:`phi` and reduced forms through :meth:`power` and
    :meth:`steered`.
    """

    stft: StftTensor
    active: np.ndarray

    @property
    def bins(self) -> np.ndarray:
        return self.stft.bins

    @property
    def n_channels(self) -> int:
        return self.bins.shape[0]

    @property
    def phi(self) -> np.ndarray:
        b = self.bins
        p = b[:, None] * np.conj(b[None, :])
        # symmetrize so Hermitian symmetry holds bitwise (real diagonal)
        return (p + np.conj(np.swapaxes(p, 0, 1))) / 2

    def power(self, frames=slice(None)) -> np.ndarray:
        """Diagonal ``phi_l^2``, shape (channels, frames, bins)."""
        return np.abs(self.bins[:, frames]) ** 2

    def steered(self, w: np.ndarray, frames=slice(None)) -> np.ndarray:
        """``sum_l' conj(w_l') phi[l', l]`` for every channel l."""
        b = self.bins[:, frames]
        ref = np.tensordot(np.conj(np.asarray(w)), b, axes=(0, 0))
        return ref[None] * np.conj(b)

    def welch(self, frames=slice(None)) -> np.ndarray:
        """Frame-averaged full cross-spectral matrix."""
        return np.mean(self.phi[:, :, frames], axis=2)


def cross_periodograms(t: StftTensor, vad_threshold: Optional[float] = 1.0) -> CrossSpectra:
    if vad_threshold is None:
        active = np.ones(t.n_frames, dtype=bool)
    else:
        active = frame_activity(t, vad_threshold)
    return CrossSpectra(t, active)
