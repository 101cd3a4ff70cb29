"""Real spherical harmonics (ACN ordering, N3D normalization), wideband
beamformers and direction dictionaries.

All encoding vectors follow the Ambisonic convention without the
Condon-Shortley phase, so that for order 1 the channels are
``[W, Y, Z, X] = [1, sqrt(3) y, sqrt(3) z, sqrt(3) x]`` for a unit
direction ``(x, y, z)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial
from typing import Optional, Sequence

import numpy as np
from scipy.special import lpmv

__all__ = [
    "Direction",
    "ShVector",
    "Beamformer",
    "DirectionGrid",
    "n_channels",
    "acn_degree",
    "sh_matrix",
    "encode",
    "max_directivity_beamformer",
    "omni_beamformer",
    "build_grid",
    "nearest_direction",
    "angular_distance",
    "sn3d_to_n3d",
    "n3d_to_sn3d",
]

_SPHERE_DEG2 = 4 * np.pi * (180 / np.pi) ** 2  # ~41253 square degrees


def _wrap_azimuth(az: float) -> float:
    # map to (-pi, pi]
    wrapped = -((-az + np.pi) % (2 * np.pi) - np.pi)
    return float(wrapped)


@dataclass(frozen=True)
class Direction:
    """A direction on the unit sphere, in radians.

    Azimuth is wrapped into (-pi, pi]; an elevation outside [-pi/2, pi/2]
    is rejected (tiny round-off overshoot is clamped).
    """

    azimuth: float
    elevation: float

    def __post_init__(self):
        el = float(self.elevation)
        if not np.isfinite(el) or not np.isfinite(self.azimuth):
            raise ValueError("direction angles must be finite")
        if abs(el) > np.pi / 2:
            if abs(el) - np.pi / 2 > 1e-9:
                raise ValueError(f"elevation {el} outside [-pi/2, pi/2]")
            el = float(np.copysign(np.pi / 2, el))
        object.__setattr__(self, "elevation", el)
        object.__setattr__(self, "azimuth", _wrap_azimuth(float(self.azimuth)))

    @classmethod
    def from_degrees(cls, azimuth_deg: float, elevation_deg: float) -> "Direction":
        return cls(np.deg2rad(azimuth_deg), np.deg2rad(elevation_deg))

    @classmethod
    def from_cartesian(cls, xyz) -> "Direction":
        x, y, z = np.asarray(xyz, dtype=float)
        r = np.sqrt(x * x + y * y + z * z)
        if r == 0:
            raise ValueError("zero vector has no direction")
        return cls(np.arctan2(y, x), np.arcsin(np.clip(z / r, -1.0, 1.0)))

    @property
    def degrees(self) -> tuple[float, float]:
        return float(np.rad2deg(self.azimuth)), float(np.rad2deg(self.elevation))

    def cartesian(self) -> np.ndarray:
        ce = np.cos(self.elevation)
        return np.array([ce * np.cos(self.azimuth), ce * np.sin(self.azimuth),
                         np.sin(self.elevation)])


def angular_distance(a: Direction, b: Direction) -> float:
    """Great-circle angle between two directions, in degrees."""
    c = float(np.clip(a.cartesian() @ b.cartesian(), -1.0, 1.0))
    return float(np.rad2deg(np.arccos(c)))


def n_channels(order: int) -> int:
    return (order + 1) ** 2


def acn_degree(order: int) -> np.ndarray:
    """SH degree n of every ACN channel up to ``order``."""
    return np.concatenate([np.full(2 * n + 1, n) for n in range(order + 1)])


def _n3d_factor(n: int, m: int) -> float:
    am = abs(m)
    return np.sqrt((2 * n + 1) * (2 - (m == 0)) * factorial(n - am) / factorial(n + am))


def sh_matrix(order: int, azimuth, elevation) -> np.ndarray:
    """Real N3D spherical harmonics in ACN order.

    Parameters
    ----------
    order : int
        Maximum SH degree L.
    azimuth, elevation : array_like
        Angles in radians, broadcast against each other (Q entries).

    Returns
    -------
    Y : ndarray, shape (Q, (L+1)**2)
    """
    if order < 0:
        raise ValueError("order must be >= 0")
    az = np.atleast_1d(np.asarray(azimuth, dtype=float))
    el = np.atleast_1d(np.asarray(elevation, dtype=float))
    az, el = np.broadcast_arrays(az, el)
    sin_el = np.sin(el)
    Y = np.empty((az.size, n_channels(order)))
    for n in range(order + 1):
        for m in range(-n, n + 1):
            am = abs(m)
            # lpmv carries the Condon-Shortley phase; Ambisonics drops it
            leg = (-1) ** am * lpmv(am, n, sin_el)
            if m > 0:
                trig = np.cos(m * az)
            elif m < 0:
                trig = np.sin(am * az)
            else:
                trig = 1.0
            Y[:, n * n + n + m] = _n3d_factor(n, m) * leg * trig
    return Y


@dataclass(frozen=True)
class ShVector:
    order: int
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float)
        if c.shape != (n_channels(self.order),):
            raise ValueError(f"expected {n_channels(self.order)} coefficients, got {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    def __array__(self, dtype=None, copy=None):
        return self.coeffs if dtype is None else self.coeffs.astype(dtype)


def encode(direction: Direction, order: int) -> ShVector:
    """SH encoding vector of a plane wave arriving from ``direction``."""
    y = sh_matrix(order, direction.azimuth, direction.elevation)[0]
    return ShVector(order, y)


@dataclass(frozen=True)
class Beamformer:
    """Real wideband beamformer; output is ``weights @ b``."""

    order: int
    weights: np.ndarray
    steering: Optional[Direction] = None

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.shape != (n_channels(self.order),):
            raise ValueError("weights length does not match order")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def response(self, y) -> float:
        """Spatial response ``w^T y`` towards an encoding vector."""
        return float(self.weights @ np.asarray(y, dtype=float))


def max_directivity_beamformer(steering: Direction, order: int) -> Beamformer:
    y = encode(steering, order).coeffs
    return Beamformer(order, y / n_channels(order), steering)


def omni_beamformer(order: int) -> Beamformer:
    w = np.zeros(n_channels(order))
    w[0] = 1.0
    return Beamformer(order, w, None)


@dataclass(frozen=True)
class DirectionGrid:
    """Directions on a Fibonacci lattice with their unit-norm SH atoms
    (one column per direction)."""

    order: int
    resolution_deg: float
    azimuth: np.ndarray
    elevation: np.ndarray
    atoms: np.ndarray = field(repr=False)

    def __len__(self):
        return self.azimuth.size

    @property
    def directions(self) -> list[Direction]:
        return [Direction(a, e) for a, e in zip(self.azimuth, self.elevation)]

    def direction(self, idx: int) -> Direction:
        return Direction(self.azimuth[idx], self.elevation[idx])

    def cartesian(self) -> np.ndarray:
        ce = np.cos(self.elevation)
        return np.stack([ce * np.cos(self.azimuth), ce * np.sin(self.azimuth),
                         np.sin(self.elevation)], axis=1)


def fibonacci_directions(count: int) -> tuple[np.ndarray, np.ndarray]:
    i = np.arange(count) + 0.5
    z = 1 - 2 * i / count
    golden = np.pi * (3 - np.sqrt(5))
    az = np.angle(np.exp(1j * golden * np.arange(count)))
    return az, np.arcsin(z)


def build_grid(resolution_deg: float = 2.0, order: int = 1) -> DirectionGrid:
    """Near-uniform direction dictionary with about
    ``41253 / resolution_deg**2`` atoms."""
    if not 0.5 <= resolution_deg <= 30:
        raise ValueError("resolution_deg must lie in [0.5, 30]")
    count = max(int(round(_SPHERE_DEG2 / resolution_deg ** 2)), 2)
    az, el = fibonacci_directions(count)
    Y = sh_matrix(order, az, el).T
    Y /= np.linalg.norm(Y, axis=0, keepdims=True)
    for arr in (az, el, Y):
        arr.setflags(write=False)
    return DirectionGrid(order, float(resolution_deg), az, el, Y)


def nearest_direction(v, grid: DirectionGrid) -> tuple[Direction, float]:
    """Grid direction whose atom has the largest absolute normalized
    correlation with ``v``."""
    v = np.asarray(v, dtype=float)
    if v.shape != (grid.atoms.shape[0],):
        raise ValueError("vector length does not match grid order")
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ValueError("cannot fit a direction to a zero vector")
    corr = np.abs(v @ grid.atoms) / norm
    idx = int(np.argmax(corr))
    return grid.direction(idx), float(min(corr[idx], 1.0))


def sn3d_to_n3d(x: np.ndarray, order: int) -> np.ndarray:
    """Rescale channels (first axis) from SN3D to N3D."""
    g = np.sqrt(2 * acn_degree(order) + 1.0)
    return np.asarray(x) * g.reshape((-1,) + (1,) * (np.ndim(x) - 1))


def n3d_to_sn3d(x: np.ndarray, order: int) -> np.ndarray:
    g = np.sqrt(2 * acn_degree(order) + 1.0)
    return np.asarray(x) / g.reshape((-1,) + (1,) * (np.ndim(x) - 1))


def directions_from_arrays(azimuth: Sequence[float], elevation: Sequence[float]) -> list[Direction]:
    return [Direction(a, e) for a, e in zip(azimuth, elevation)]
