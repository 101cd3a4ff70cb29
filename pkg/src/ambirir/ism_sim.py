"""Image-source style synthesis of Ambisonic room impulse responses and
rendering of noisy multichannel recordings with exact ground truth.

Geometry is given directly as a list of wavefronts (time of arrival,
attenuation, direction); every wavefront is rendered as a band-limited
pulse (Hann-windowed sinc), which reduces to a Kronecker delta for
integer-sample arrival times.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy import signal as ssignal

from .sh_ambi import Direction, encode, fibonacci_directions, n_channels, sh_matrix

SPEED_OF_SOUND = 343.0


@dataclass(frozen=True)
class AmbisonicSignal:
    """Multichannel SH-domain time series, shape ``(channels, samples)``."""

    data: np.ndarray
    sample_rate: float

    def __post_init__(self):
        d = np.atleast_2d(np.asarray(self.data, dtype=float))
        order = int(round(np.sqrt(d.shape[0]))) - 1
        if n_channels(order) != d.shape[0]:
            raise ValueError(f"{d.shape[0]} channels is not a square number")
        object.__setattr__(self, "data", d)

    @property
    def order(self) -> int:
        return int(round(np.sqrt(self.data.shape[0]))) - 1

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    def scaled(self, alpha: float) -> "AmbisonicSignal":
        return AmbisonicSignal(alpha * self.data, self.sample_rate)


@dataclass(frozen=True)
class Wavefront:
    toa: float  # seconds, absolute
    gain: float
    direction: Direction

    def __post_init__(self):
        if self.toa < 0:
            raise ValueError("time of arrival must be >= 0")
        if not self.gain > 0:
            raise ValueError("wavefront gains must be positive")


@dataclass(frozen=True)
class DiffuseTail:
    onset: float
    rt60: float
    level: float

    def __post_init__(self):
        if self.rt60 <= 0:
            raise ValueError("rt60 must be positive")
        if self.onset < 0 or self.level < 0:
            raise ValueError("onset and level must be nonnegative")


@dataclass(frozen=True)
class IsmScene:
    """Ordered wavefronts (index 0 is the direct sound) plus rendering
    parameters.

    ``pulse_halfwidth`` is the half-support of the windowed-sinc pulse in
    samples (0 rounds every arrival to the nearest sample).
    ``reflection_lowpass`` is an optional one-pole coefficient in [0, 1)
    applied to every reflection, making its attenuation frequency dependent.
    """

    wavefronts: tuple
    order: int
    sample_rate: float = 16000.0
    pulse_halfwidth: int = 8
    diffuse: Optional[DiffuseTail] = None
    reflection_lowpass: float = 0.0
    seed: int = 0

    def __post_init__(self):
        wf = tuple(self.wavefronts)
        if not wf:
            raise ValueError("a scene needs at least one wavefront")
        toas = [w.toa for w in wf]
        if any(t <= toas[0] for t in toas[1:]):
            raise ValueError("the direct wavefront must arrive strictly first")
        if any(b < a for a, b in zip(toas, toas[1:])):
            raise ValueError("wavefronts must be sorted by time of arrival")
        if self.order < 0 or self.sample_rate <= 0 or self.pulse_halfwidth < 0:
            raise ValueError("invalid scene parameters")
        if not 0 <= self.reflection_lowpass < 1:
            raise ValueError("reflection_lowpass must lie in [0, 1)")
        if self.diffuse is not None and self.diffuse.onset < toas[-1]:
            raise ValueError("diffuse onset must not precede the last wavefront")
        object.__setattr__(self, "wavefronts", wf)

    @property
    def direct(self) -> Wavefront:
        return self.wavefronts[0]

    def relative_delays(self) -> np.ndarray:
        """``tau_n = toa_n - toa_0`` in seconds."""
        t = np.array([w.toa for w in self.wavefronts])
        return t - t[0]

    def relative_gains(self) -> np.ndarray:
        g = np.array([w.gain for w in self.wavefronts])
        return g / g[0]

    def encodings(self) -> np.ndarray:
        """SH vectors of all wavefronts, one column per wavefront."""
        return np.stack([encode(w.direction, self.order).coeffs for w in self.wavefronts], axis=1)


def scene_from_relative(order: int, doa: Direction, reflections: Sequence[tuple],
                        sample_rate: float = 16000.0, direct_toa: float = 0.0,
                        **kwargs) -> IsmScene:
    """Scene with a unit direct wavefront and ``(delay_s, gain, Direction)``
    reflections given relative to it."""
    wf = [Wavefront(direct_toa, 1.0, doa)]
    wf += [Wavefront(direct_toa + tau, g, d) for tau, g, d in sorted(reflections, key=lambda r: r[0])]
    return IsmScene(tuple(wf), order, sample_rate, **kwargs)


def pulse(t: np.ndarray, halfwidth: int) -> np.ndarray:
    """Hann-windowed sinc evaluated at (fractional) sample offsets ``t``.

    Real, even, equal to 1 at t=0 and zero for ``|t| >= halfwidth``.
    """
    t = np.asarray(t, dtype=float)
    if halfwidth == 0:
        return ((t > -0.5) & (t <= 0.5)).astype(float)
    win = np.where(np.abs(t) < halfwidth, 0.5 * (1 + np.cos(np.pi * t / halfwidth)), 0.0)
    return np.sinc(t) * win


def synthesize_rir(scene: IsmScene, length: int) -> AmbisonicSignal:
    """Ambisonic RIR: ``sum_n nu_n * pulse(t - toa_n) * y_n`` plus an
    optional decaying diffuse tail.

    Raises
    ------
    ValueError
        If ``length`` does not cover every arrival plus the pulse support.
    """
    fs = scene.sample_rate
    hw = scene.pulse_halfwidth
    last = max(w.toa for w in scene.wavefronts) * fs
    if length < int(np.floor(last)) + hw + 1:
        raise ValueError(f"length {length} too short for arrivals up to sample {last:.1f}")
    if scene.diffuse is not None and length <= scene.diffuse.onset * fs:
        raise ValueError("length too short for the diffuse tail onset")
    out = np.zeros((n_channels(scene.order), length))
    Y = scene.encodings()
    n = np.arange(length)
    for idx, wf in enumerate(scene.wavefronts):
        pos = wf.toa * fs
        lo = max(int(np.floor(pos)) - hw, 0)
        hi = min(int(np.ceil(pos)) + hw + 1, length)
        p = np.zeros(length)
        p[lo:hi] = pulse(n[lo:hi] - pos, hw)
        if idx > 0 and scene.reflection_lowpass > 0:
            c = scene.reflection_lowpass
            p = ssignal.lfilter([1 - c], [1, -c], p)
        out += wf.gain * np.outer(Y[:, idx], p)
    if scene.diffuse is not None:
        out += _diffuse_tail(scene, length)
    return AmbisonicSignal(out, fs)


def _diffuse_tail(scene: IsmScene, length: int, n_dirs: int = 240) -> np.ndarray:
    tail = scene.diffuse
    fs = scene.sample_rate
    rng = np.random.default_rng(scene.seed)
    start = int(np.ceil(tail.onset * fs))
    t = np.arange(length - start) / fs
    env = 10 ** (-3 * t / tail.rt60)  # -60 dB after rt60
    az, el = fibonacci_directions(n_dirs)
    Y = sh_matrix(scene.order, az, el)  # (dirs, channels)
    noise = rng.standard_normal((n_dirs, t.size)) * env
    field_ = Y.T @ noise / np.sqrt(n_dirs)
    energy = np.sum(field_[0] ** 2)
    out = np.zeros((Y.shape[1], length))
    if energy > 0:
        out[:, start:] = field_ * tail.level / np.sqrt(energy)
    return out


@dataclass(frozen=True)
class RenderedSignal:
    signal: AmbisonicSignal
    ground_truth: IsmScene
    snr_db: float


def convolve_channels(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Full linear convolution of a mono ``x`` with every kernel row."""
    return ssignal.fftconvolve(kernels, x[None, :], axes=1)


def active_frame_mask(x: np.ndarray, frame: int = 512, threshold: float = 1.0) -> np.ndarray:
    """Per-sample mask of frames whose energy exceeds ``threshold`` times the
    median frame energy (simple energy VAD)."""
    n = x.size // frame
    if n == 0:
        return np.ones(x.size, dtype=bool)
    e = np.sum(x[: n * frame].reshape(n, frame) ** 2, axis=1)
    active = e > threshold * np.median(e)
    if not active.any():
        active[:] = True
    mask = np.zeros(x.size, dtype=bool)
    mask[: n * frame] = np.repeat(active, frame)
    return mask


def render_recording(scene: IsmScene, excitation, snr_db: float = np.inf,
                     noise: Union[AmbisonicSignal, str, None] = "isotropic",
                     rir_length: Optional[int] = None, seed: int = 0,
                     vad_frame: int = 512) -> RenderedSignal:
    """Convolve a mono excitation with the scene RIR and add noise.

    Parameters
    ----------
    scene : IsmScene
    excitation : array_like
        Mono source signal.
    snr_db : float
        Target channel-0 SNR over active frames; ``inf`` disables noise.
    noise : AmbisonicSignal, "isotropic", or None
        An Ambisonic noise kernel (e.g. from :func:`build_diffuse_noise`)
        convolved with independent white noise, or spatially white
        isotropic noise.
    rir_length : int, optional
        Defaults to the last arrival plus pulse support plus one sample
        (or the diffuse tail onset plus 3 x rt60).
    """
    s = np.asarray(excitation, dtype=float).ravel()
    if s.size == 0:
        raise ValueError("excitation is empty")
    fs = scene.sample_rate
    if rir_length is None:
        last = max(w.toa for w in scene.wavefronts) * fs
        rir_length = int(np.floor(last)) + scene.pulse_halfwidth + 2
        if scene.reflection_lowpass > 0:
            rir_length += int(np.ceil(np.log(1e-9) / np.log(scene.reflection_lowpass)))
        if scene.diffuse is not None:
            rir_length = max(rir_length, int((scene.diffuse.onset + scene.diffuse.rt60) * fs))
    rir = synthesize_rir(scene, rir_length)
    clean = convolve_channels(s, rir.data)[:, : s.size]
    out = clean
    if np.isfinite(snr_db):
        rng = np.random.default_rng(seed)
        if isinstance(noise, AmbisonicSignal):
            src = rng.standard_normal(s.size)
            nz = convolve_channels(src, noise.data)[:, : s.size]
        elif noise in ("isotropic", None):
            az, el = fibonacci_directions(120)
            Y = sh_matrix(scene.order, az, el)
            nz = Y.T @ rng.standard_normal((az.size, s.size)) / np.sqrt(az.size)
        else:
            raise ValueError(f"unknown noise kind {noise!r}")
        mask = active_frame_mask(clean[0], vad_frame)
        p_sig = np.mean(clean[0, mask] ** 2)
        p_noise = np.mean(nz[0, mask] ** 2)
        if p_noise == 0:
            raise ValueError("noise has zero power but a finite SNR was requested")
        nz = nz * np.sqrt(p_sig / p_noise * 10 ** (-snr_db / 10))
        out = clean + nz
    return RenderedSignal(AmbisonicSignal(out, fs), scene, float(snr_db))


def build_diffuse_noise(reverberant_rirs: Sequence[AmbisonicSignal], onset: float) -> AmbisonicSignal:
    """Average of the post-onset segments of several RIRs.

    Inputs shorter than the onset are skipped; segments of different
    lengths are zero-padded to the longest one before averaging.
    """
    tails = []
    fs = None
    for rir in reverberant_rirs:
        start = int(round(onset * rir.sample_rate))
        if rir.n_samples > start:
            tails.append(rir.data[:, start:])
            fs = rir.sample_rate
    if not tails:
        raise ValueError("no RIR extends beyond the onset")
    n = max(t.shape[1] for t in tails)
    acc = np.zeros((tails[0].shape[0], n))
    for t in tails:
        acc[:, : t.shape[1]] += t
    return AmbisonicSignal(acc / len(tails), fs)


def white_noise(duration: float, sample_rate: float, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(int(round(duration * sample_rate)))


def speech_like_noise(duration: float, sample_rate: float, seed: int = 0,
                      syllable_rate: float = 4.0) -> np.ndarray:
    """Amplitude-modulated AR(2) noise with a speech-like spectral tilt and
    syllabic nonstationarity."""
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    # resonance near 500 Hz
    r, f0 = 0.95, 500.0
    a = [1, -2 * r * np.cos(2 * np.pi * f0 / sample_rate), r * r]
    x = ssignal.lfilter([1.0], a, rng.standard_normal(n))
    t = np.arange(n) / sample_rate
    phase = rng.uniform(0, 2 * np.pi)
    env = np.maximum(np.sin(np.pi * syllable_rate * t + phase), 0.0) ** 2
    env += 0.05 * rng.uniform(0.5, 1.5, size=n)
    x = x * env
    return x / np.std(x)


# --- scene files -----------------------------------------------------------

def scene_to_dict(scene: IsmScene) -> dict:
    d = {
        "order": scene.order,
        "sample_rate": scene.sample_rate,
        "pulse_halfwidth": scene.pulse_halfwidth,
        "wavefronts": [
            {"toa_s": w.toa, "gain": w.gain,
             "azimuth_deg": w.direction.degrees[0], "elevation_deg": w.direction.degrees[1]}
            for w in scene.wavefronts
        ],
    }
    if scene.diffuse is not None:
        d["diffuse"] = {"onset_s": scene.diffuse.onset, "rt60_s": scene.diffuse.rt60,
                        "level": scene.diffuse.level}
    if scene.reflection_lowpass:
        d["reflection_lowpass"] = scene.reflection_lowpass
    if scene.seed:
        d["seed"] = scene.seed
    return d


def scene_from_dict(d: dict) -> IsmScene:
    try:
        wf = tuple(
            Wavefront(float(w["toa_s"]), float(w["gain"]),
                      Direction.from_degrees(float(w["azimuth_deg"]), float(w["elevation_deg"])))
            for w in d["wavefronts"]
        )
        diffuse = None
        if d.get("diffuse"):
            x = d["diffuse"]
            diffuse = DiffuseTail(float(x["onset_s"]), float(x["rt60_s"]), float(x["level"]))
        return IsmScene(wf, int(d["order"]), float(d.get("sample_rate", 16000.0)),
                        int(d.get("pulse_halfwidth", 8)), diffuse,
                        float(d.get("reflection_lowpass", 0.0)), int(d.get("seed", 0)))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed scene description: {exc}") from exc


def load_scene(path) -> IsmScene:
    with open(path) as fh:
        return scene_from_dict(json.load(fh))


def save_scene(scene: IsmScene, path) -> None:
    with open(path, "w") as fh:
        json.dump(scene_to_dict(scene), fh, indent=2)
