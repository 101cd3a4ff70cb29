"""File formats: float32 Ambisonic WAV with a JSON sidecar, and the binary
GTVV / RdRIR matrix containers."""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.io import wavfile

from .gfvv import GtvvMatrix
from .ism_sim import AmbisonicSignal
from .rdrir import RdRirEstimate, ReferenceFilter
from .sh_ambi import Beamformer, Direction, n3d_to_sn3d, sn3d_to_n3d

_HEADER = struct.Struct("<4sIIId")   # magic, version, order, J, sample_rate
VERSION = 1


class FormatError(ValueError):
    pass


def sidecar_path(path) -> Path:
    """``rec.wav`` -> ``rec.wav.json``."""
    return Path(str(path) + ".json")


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None


def write_ambisonic_wav(path, sig: AmbisonicSignal, normalization: str = "N3D",
                        extra: Optional[dict] = None) -> None:
    """Write a float32 WAV plus a JSON sidecar declaring the channel
    convention."""
    if normalization not in ("N3D", "SN3D"):
        raise ValueError("normalization must be N3D or SN3D")
    data = sig.data if normalization == "N3D" else n3d_to_sn3d(sig.data, sig.order)
    wavfile.write(str(path), int(round(sig.sample_rate)), data.T.astype(np.float32))
    meta = {"ordering": "ACN", "normalization": normalization, "order": sig.order,
            "sample_rate": sig.sample_rate}
    if extra:
        meta.update(extra)
    write_json(sidecar_path(path), meta)


def read_ambisonic_wav(path) -> tuple[AmbisonicSignal, dict]:
    """Read a float32 Ambisonic WAV; the sidecar must declare ACN ordering,
    and SN3D input is converted to N3D."""
    side = sidecar_path(path)
    if not side.exists():
        raise FormatError(f"{path}: missing sidecar {side.name} with the channel convention")
    meta = read_json(side)
    if meta.get("ordering") != "ACN":
        raise FormatError(f"{path}: only ACN channel ordering is supported")
    norm = meta.get("normalization")
    if norm not in ("N3D", "SN3D"):
        raise FormatError(f"{path}: normalization must be N3D or SN3D, got {norm!r}")
    fs, data = wavfile.read(str(path))
    if data.dtype != np.float32:
        raise FormatError(f"{path}: expected 32-bit float samples, got {data.dtype}")
    data = np.atleast_2d(data.T.astype(float)) if data.ndim == 2 else data[None, :].astype(float)
    order = int(round(np.sqrt(data.shape[0]))) - 1
    if (order + 1) ** 2 != data.shape[0]:
        raise FormatError(f"{path}: {data.shape[0]} channels is not a full SH order")
    if norm == "SN3D":
        data = sn3d_to_n3d(data, order)
    return AmbisonicSignal(data, float(fs)), meta


def _beamformer_meta(w: Optional[Beamformer]) -> Optional[dict]:
    if w is None:
        return None
    d = {"order": w.order, "weights": w.weights.tolist()}
    if w.steering is not None:
        d["steering_deg"] = list(w.steering.degrees)
    return d


def _beamformer_from_meta(d: Optional[dict]) -> Optional[Beamformer]:
    if not d:
        return None
    st = d.get("steering_deg")
    return Beamformer(int(d["order"]), np.array(d["weights"]),
                      None if st is None else Direction.from_degrees(*st))


def _write_matrix(fh, magic: bytes, m: np.ndarray, sample_rate: float):
    order = int(round(np.sqrt(m.shape[0]))) - 1
    fh.write(_HEADER.pack(magic, VERSION, order, m.shape[1], float(sample_rate)))
    fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())


def _read_matrix(buf: bytes, magic: bytes) -> tuple[np.ndarray, float, int]:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated container header")
    mg, ver, order, J, fs = _HEADER.unpack_from(buf)
    if mg != magic:
        raise FormatError(f"bad magic {mg!r}, expected {magic!r}")
    if ver != VERSION:
        raise FormatError(f"unsupported container version {ver}")
    C = (order + 1) ** 2
    n = C * J * 8
    end = _HEADER.size + n
    if len(buf) < end:
        raise FormatError("truncated matrix payload")
    m = np.frombuffer(buf, "<f8", C * J, _HEADER.size).reshape(C, J).copy()
    return m, fs, end


def write_gtvv(path, g: GtvvMatrix, extra: Optional[dict] = None) -> None:
    with open(path, "wb") as fh:
        _write_matrix(fh, b"GTVV", g.m, g.sample_rate)
    meta = {"beamformer": _beamformer_meta(g.beamformer), "frame_center": g.frame_center,
            "valid": None if g.valid is None else g.valid.astype(int).tolist()}
    if extra:
        meta.update(extra)
    write_json(sidecar_path(path), meta)


def read_gtvv(path) -> tuple[GtvvMatrix, dict]:
    m, fs, _ = _read_matrix(Path(path).read_bytes(), b"GTVV")
    side = sidecar_path(path)
    meta = read_json(side) if side.exists() else {}
    valid = meta.get("valid")
    g = GtvvMatrix(m, fs, _beamformer_from_meta(meta.get("beamformer")),
                   None if valid is None else np.array(valid, dtype=bool), meta.get("frame_center"))
    return g, meta


def write_rdrir(path, est: RdRirEstimate) -> None:
    """RdRIR container: the GTVV layout under magic ``RDIR`` followed by the
    filter block (uint32 length, float64 taps)."""
    with open(path, "wb") as fh:
        _write_matrix(fh, b"RDIR", est.h, est.sample_rate)
        fh.write(struct.pack("<I", est.filter.a.size))
        fh.write(est.filter.a.astype("<f8").tobytes())
    diag = {k: v for k, v in est.diagnostics.items() if k not in ("state",)}
    write_json(sidecar_path(path), {"method": est.method, "j_max": est.j_max,
                                    "beamformer": _beamformer_meta(est.beamformer),
                                    "diagnostics": diag})


def read_rdrir(path) -> RdRirEstimate:
    buf = Path(path).read_bytes()
    h, fs, off = _read_matrix(buf, b"RDIR")
    if len(buf) < off + 4:
        raise FormatError("missing filter block")
    (n,) = struct.unpack_from("<I", buf, off)
    if len(buf) < off + 4 + 8 * n:
        raise FormatError("truncated filter block")
    a = np.frombuffer(buf, "<f8", n, off + 4).copy()
    side = sidecar_path(path)
    meta = read_json(side) if side.exists() else {}
    return RdRirEstimate(h, ReferenceFilter(a), n - 1, meta.get("method", "unknown"), fs,
                         _beamformer_from_meta(meta.get("beamformer")), meta.get("diagnostics", {}))
