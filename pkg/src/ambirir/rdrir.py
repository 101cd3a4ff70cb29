"""Reduced RIR estimation from a GTVV matrix.

The reference filter ``a`` (``a[0] = 1``, taps ``0..j_max``) is fitted so
that ``h_l = v_l * a`` vanishes outside the lag window ``[0, j_max]``.
Three solvers are provided: the autocorrelation method (Toeplitz system,
Levinson-Durbin), the covariance method (exact windowed least squares) and
an ADMM for the joint problem with group sparsity over lags, window
support and a nonnegative omnidirectional channel.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.signal import fftconvolve

from .gfvv import GtvvMatrix

log = logging.getLogger(__name__)

METHODS = ("ac", "cov", "admm")


class NumericalError(RuntimeError):
    """A solver could not produce a finite, well-conditioned result."""


class AdmmDivergence(NumericalError):
    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


@dataclass(frozen=True)
class ReferenceFilter:
    a: np.ndarray

    def __post_init__(self):
        a = np.array(self.a, dtype=float)
        if a.ndim != 1 or a.size == 0 or a[0] != 1.0:
            raise ValueError("reference filter must be 1-D with a[0] == 1")
        a.setflags(write=False)
        object.__setattr__(self, "a", a)

    @property
    def j_max(self) -> int:
        return self.a.size - 1

    @classmethod
    def identity(cls, j_max: int) -> "ReferenceFilter":
        a = np.zeros(j_max + 1)
        a[0] = 1.0
        return cls(a)


@dataclass
class RdRirEstimate:
    h: np.ndarray                 # (channels, J), centred lag axis
    filter: ReferenceFilter
    j_max: int
    method: str
    sample_rate: float
    beamformer: object = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def J(self) -> int:
        return self.h.shape[1]

    @property
    def zero(self) -> int:
        return self.J // 2 - 1

    def matrix(self) -> GtvvMatrix:
        """The RdRIR on the GTVV axis type, for echo extraction."""
        return GtvvMatrix(self.h, self.sample_rate, self.beamformer)

    def out_of_window_fraction(self) -> float:
        e = np.sum(self.h ** 2, axis=0)
        inside = e[self.zero:self.zero + self.j_max + 1].sum()
        total = e.sum()
        return float((total - inside) / total) if total > 0 else 0.0


@dataclass
class AdmmConfig:
    mu: Optional[float] = None    # None: 0.05 * largest GTVV column norm
    max_iter: int = 100
    tol_primal: float = 1e-6
    tol_dual: float = 1e-6
    warm_start: Optional[tuple] = None  # (H, U, a) of a previous frame

    def __post_init__(self):
        if self.mu is not None and not self.mu > 0:
            raise ValueError("mu must be positive")
        if self.tol_primal <= 0 or self.tol_dual <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


def _check_jmax(V: GtvvMatrix, j_max: int):
    if not 0 <= j_max < V.J // 2:
        raise ValueError(f"j_max={j_max} must lie in [0, J/2) = [0, {V.J // 2})")


def apply_filter(V: GtvvMatrix, a) -> np.ndarray:
    """Row-wise linear convolution ``v_l * a`` truncated to the centred
    J-sample axis."""
    a = np.asarray(getattr(a, "a", a), dtype=float)
    if a.size > V.J:
        raise ValueError("filter longer than the GTVV axis")
    return fftconvolve(V.m, a[None, :], axes=1)[:, :V.J]


def _autocorr(x: np.ndarray, maxlag: int) -> np.ndarray:
    """``R(d) = sum_l sum_j x_{l,j} x_{l,j+d}`` for d = 0..maxlag."""
    n = x.shape[1]
    nfft = int(2 ** np.ceil(np.log2(n + maxlag + 1)))
    X = np.fft.rfft(x, nfft, axis=1)
    r = np.fft.irfft(np.sum(np.abs(X) ** 2, axis=0), nfft)
    return r[: maxlag + 1]


def _xcorr(d: np.ndarray, v: np.ndarray, maxlag: int) -> np.ndarray:
    """``c(s) = sum_l sum_j d_{l,j} v_{l,j-s}`` for s = 0..maxlag."""
    n = v.shape[1]
    nfft = int(2 ** np.ceil(np.log2(n + maxlag + 1)))
    D = np.fft.rfft(d, nfft, axis=1)
    Vf = np.fft.rfft(v, nfft, axis=1)
    return np.fft.irfft(np.sum(D * np.conj(Vf), axis=0), nfft)[: maxlag + 1]


def _axis_gram(v: np.ndarray, j_max: int) -> np.ndarray:
    """``r(j, s) = sum_l sum_{j' in axis} v_{j'-j} v_{j'-s}`` for the
    convolution truncated to the axis (j, s = 0..j_max).

    Uses ``r(j+1, s+1) = r(j, s) - sum_l v_{l,end-j} v_{l,end-s}``.
    """
    R = _autocorr(v, j_max)
    d = np.abs(np.subtract.outer(np.arange(j_max + 1), np.arange(j_max + 1)))
    r = R[d]
    E = v[:, ::-1][:, : j_max + 1]     # E[:, i] = v at the i-th sample from the end
    P = E.T @ E
    G = np.zeros_like(r)
    for k in range(1, j_max + 1):
        G[k, k:] = G[k - 1, k - 1:-1] + P[k - 1, k - 1:-1]
        G[k:, k] = G[k, k:]
    return r - G


@dataclass(frozen=True)
class NormalEquations:
    r: np.ndarray                  # (j_max+1, j_max+1), r(j, s)
    autocorr: Optional[np.ndarray] = None   # Toeplitz generator (AC only)

    @property
    def rhs(self) -> np.ndarray:
        """``-r(0, s)`` for s = 1..j_max."""
        return -self.r[0, 1:]


def _cov_rows(V: GtvvMatrix, j_max: int) -> np.ndarray:
    """Output lags kept by the covariance method: full filter overlap and
    outside the protected window."""
    lags = V.lags
    lo = lags[0] + j_max
    keep = (lags >= lo) & ((lags < 0) | (lags > j_max))
    return np.nonzero(keep)[0]


def cov_data_matrix(V: GtvvMatrix, j_max: int) -> np.ndarray:
    """Stacked convolution matrix ``X[(l, j'), j] = v_{l, j'-j}`` over the
    covariance-method rows."""
    cols = _cov_rows(V, j_max)
    idx = cols[:, None] - np.arange(j_max + 1)[None, :]
    return V.m[:, idx].reshape(-1, j_max + 1)


def lp_normal_coefficients(V: GtvvMatrix, j_max: int, method: str = "ac") -> NormalEquations:
    """Correlation coefficients ``r(j, s)`` of the windowed linear-prediction
    problem.

    ``ac`` zeroes the protected samples ``[0, j_max]`` of V (only while
    forming the coefficients) and zero-pads beyond the axis, giving a
    Toeplitz matrix.  ``cov`` sums only over fully overlapping output lags
    outside the protected window.
    """
    _check_jmax(V, j_max)
    if method == "ac":
        vt = V.m.copy()
        vt[:, V.zero:V.zero + j_max + 1] = 0.0
        R = _autocorr(vt, j_max)
        d = np.abs(np.subtract.outer(np.arange(j_max + 1), np.arange(j_max + 1)))
        return NormalEquations(R[d], R)
    if method == "cov":
        X = cov_data_matrix(V, j_max)
        return NormalEquations(X.T @ X)
    raise ValueError(f"unknown linear-prediction method {method!r}")


def levinson_durbin(R: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Prediction-error filter from an autocorrelation sequence.

    Solves ``sum_{j=1..p} a_j R(|j-s|) = -R(s)``, s = 1..p, with
    ``p = len(R) - 1``.

    Returns
    -------
    a : ndarray, length p+1, ``a[0] = 1``
    k : ndarray, reflection coefficients
    err : float, final prediction error power

    Raises
    ------
    NumericalError
        If the recursion meets a non-positive error power.
    """
    R = np.asarray(R, dtype=float)
    p = R.size - 1
    a = np.zeros(p + 1)
    a[0] = 1.0
    k = np.zeros(p)
    err = R[0]
    if err <= 0:
        return a, k, 0.0
    for m in range(1, p + 1):
        acc = R[m] + a[1:m] @ R[m - 1:0:-1]
        km = -acc / err
        a[1:m] = a[1:m] + km * a[m - 1:0:-1]
        a[m] = km
        k[m - 1] = km
        err *= 1.0 - km * km
        if not err > 1e-14 * R[0]:
            raise NumericalError(
                f"Toeplitz system numerically singular at order {m} "
                f"(|k|={abs(km):.12f}, condition ~ {R[0] / max(err, 1e-300):.3g})")
    return a, k, float(err)


def windowed_residual(V: GtvvMatrix, a, j_max: int) -> float:
    """Out-of-window energy of ``v * a``."""
    h = apply_filter(V, a)
    mask = np.ones(V.J, dtype=bool)
    mask[V.zero:V.zero + j_max + 1] = False
    return float(np.sum(h[:, mask] ** 2))


def cov_residual(V: GtvvMatrix, a, j_max: int) -> float:
    """Covariance-method objective: residual energy over the kept rows."""
    X = cov_data_matrix(V, j_max)
    e = X @ np.asarray(getattr(a, "a", a))
    return float(e @ e)


def _estimate(V, a, j_max, method, **diag) -> RdRirEstimate:
    filt = ReferenceFilter(a)
    h = apply_filter(V, filt)
    est = RdRirEstimate(h, filt, j_max, method, V.sample_rate, V.beamformer, dict(diag))
    est.diagnostics["out_of_window"] = est.out_of_window_fraction()
    return est


def solve_ac(V: GtvvMatrix, j_max: int) -> RdRirEstimate:
    """Autocorrelation-method RdRIR (Levinson-Durbin solve)."""
    eq = lp_normal_coefficients(V, j_max, "ac")
    a, k, err = levinson_durbin(eq.autocorr)
    return _estimate(V, a, j_max, "ac", prediction_error=err,
                     max_reflection=float(np.max(np.abs(k))) if k.size else 0.0)


def _psd_solve(M: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, float]:
    tr = np.trace(M)
    if tr <= 0:
        return np.zeros_like(b), 0.0
    jitter = 1e-12
    while True:
        try:
            c = cho_factor(M + jitter * tr * np.eye(M.shape[0]), check_finite=True)
            return cho_solve(c, b), jitter
        except LinAlgError:
            jitter *= 10
            if jitter > 1e-6:
                raise NumericalError("normal matrix is not positive definite even with jitter 1e-6 * trace")


def solve_cov(V: GtvvMatrix, j_max: int) -> RdRirEstimate:
    """Covariance-method RdRIR.  An all-zero GTVV yields ``a = e0``."""
    eq = lp_normal_coefficients(V, j_max, "cov")
    a = np.zeros(j_max + 1)
    a[0] = 1.0
    jitter = 0.0
    if j_max > 0:
        a[1:], jitter = _psd_solve(eq.r[1:, 1:], eq.rhs)
    return _estimate(V, a, j_max, "cov", jitter=jitter,
                     residual=cov_residual(V, a, j_max))


def project_window(H: np.ndarray, zero: int, j_max: int) -> np.ndarray:
    """Projection onto matrices supported on lags ``[0, j_max]`` with a
    nonnegative first row."""
    out = np.zeros_like(H)
    out[:, zero:zero + j_max + 1] = H[:, zero:zero + j_max + 1]
    out[0] = np.maximum(out[0], 0.0)
    return out


def group_soft_threshold(H: np.ndarray, mu: float) -> np.ndarray:
    """Column-wise shrinkage ``max(0, 1 - mu / ||h_j||) h_j``."""
    norms = np.linalg.norm(H, axis=0)
    scale = np.maximum(0.0, 1.0 - mu / np.where(norms > 0, norms, np.inf))
    return H * scale


def solve_admm(V: GtvvMatrix, j_max: int, cfg: Optional[AdmmConfig] = None) -> RdRirEstimate:
    """Joint estimation of ``a`` and a group-sparse, window-supported H.

    Iterates, with ``H~ = U = 0`` initially (unless warm-started)::

        H  <- S_mu(P(H~ + U))
        a  <- argmin_{a0=1} sum_l ||v_l * a - h_l + u_l||^2
        H~ <- V * a
        U  <- U + H~ - H

    The returned matrix is the constrained iterate H, so the window and
    sign constraints hold exactly.

    Raises
    ------
    AdmmDivergence
        If the primal residual grows by more than 1e3 over its first value.
    """
    cfg = cfg or AdmmConfig()
    _check_jmax(V, j_max)
    v = V.m
    mu = cfg.mu if cfg.mu is not None else 0.05 * float(np.max(np.linalg.norm(v, axis=0)))
    if mu <= 0:
        mu = 1e-12
    r = _axis_gram(v, j_max)
    chol = None
    if j_max > 0 and np.trace(r[1:, 1:]) > 0:
        M = r[1:, 1:]
        jitter = 1e-12 * np.trace(M)
        while chol is None:
            try:
                chol = cho_factor(M + jitter * np.eye(j_max))
            except LinAlgError:
                jitter *= 10
                if jitter > 1e-6 * np.trace(M):
                    raise NumericalError("ADMM filter system is singular")
    if cfg.warm_start is not None:
        H, U, a = (np.array(x, dtype=float) for x in cfg.warm_start)
        Ht = apply_filter(V, a)
    else:
        H = np.zeros_like(v)
        U = np.zeros_like(v)
        Ht = np.zeros_like(v)
        a = ReferenceFilter.identity(j_max).a.copy()
    history = {"primal": [], "dual": [], "objective": []}
    first = None
    converged = False
    for q in range(cfg.max_iter):
        H_prev = H
        H = group_soft_threshold(project_window(Ht + U, V.zero, j_max), mu)
        a = np.zeros(j_max + 1)
        a[0] = 1.0
        if chol is not None:
            d = H - U
            rdv = _xcorr(d, v, j_max)
            a[1:] = cho_solve(chol, rdv[1:] - r[0, 1:])
        Ht = apply_filter(V, a)
        U = U + Ht - H
        primal = float(np.linalg.norm(Ht - H))
        dual = float(np.linalg.norm(H - H_prev))
        history["primal"].append(primal)
        history["dual"].append(dual)
        history["objective"].append(float(np.sum(np.linalg.norm(H, axis=0))))
        if not np.isfinite(primal):
            raise AdmmDivergence("non-finite ADMM iterate", history)
        if first is None:
            first = max(primal, 1e-300)
        elif primal > 1e3 * first:
            raise AdmmDivergence(f"ADMM residual grew to {primal:.3g}", history)
        scale = max(float(np.linalg.norm(H)), 1e-300)
        if q > 0 and primal <= cfg.tol_primal * scale and dual <= cfg.tol_dual * scale:
            converged = True
            break
    filt = ReferenceFilter(a)
    est = RdRirEstimate(H, filt, j_max, "admm", V.sample_rate, V.beamformer,
                        {"mu": mu, "iterations": len(history["primal"]), "converged": converged,
                         "history": history, "state": (H, U, a)})
    est.diagnostics["out_of_window"] = est.out_of_window_fraction()
    return est


def solve(V: GtvvMatrix, j_max: int, method: str, admm: Optional[AdmmConfig] = None) -> RdRirEstimate:
    if method == "ac":
        return solve_ac(V, j_max)
    if method == "cov":
        return solve_cov(V, j_max)
    if method == "admm":
        return solve_admm(V, j_max, admm)
    raise ValueError(f"unknown RdRIR method {method!r}")
