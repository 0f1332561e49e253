"""Self-describing binary trace files.

Layout: the 8 magic bytes ``PONDTRC1``, a little-endian uint32 giving the
length of a UTF-8 JSON metadata block, the metadata itself, then the
channels interleaved sample by sample as little-endian float64.

The metadata holds at least ``sample_rate_hz``, ``channels``, ``units``,
``n_samples``, ``seed``, ``config`` and ``config_hash``.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from . import __version__
from .errors import ConfigError, TraceFormatError
from .traces import QuadraturePair, TimeTrace

MAGIC = b"PONDTRC1"
_DTYPE = np.dtype("<f8")
_CHUNK = 1 << 20

__all__ = ["MAGIC", "TraceFile", "config_hash", "write_trace", "read_trace",
           "write_pair", "read_pair", "atomic_write_text"]


def config_hash(config) -> str:
    """SHA-256 of the canonical (sorted, compact) JSON form of ``config``."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=float)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class TraceFile:
    metadata: dict
    channels: dict

    @property
    def sample_rate(self) -> float:
        return float(self.metadata["sample_rate_hz"])

    def trace(self, name) -> TimeTrace:
        units = self.metadata.get("units", {})
        md = {k: self.metadata.get(k) for k in ("seed", "config_hash", "version")}
        return TimeTrace(self.sample_rate, self.channels[name], units.get(name, ""), name, md)

    def pair(self) -> QuadraturePair:
        return QuadraturePair(self.trace("x0"), self.trace("xpi2"))


def _atomic_target(path):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=d)
    return path, fd, tmp


def atomic_write_text(path, text: str):
    path, fd, tmp = _atomic_target(path)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_trace(path, channels: dict, sample_rate: float, units: dict | None = None,
                metadata: dict | None = None):
    """Write named, equal-length channels atomically (temp file + rename)."""
    names = list(channels)
    if not names:
        raise ConfigError("no channels to write")
    arrays = [np.asarray(channels[k], dtype=np.float64) for k in names]
    n = arrays[0].size
    if any(a.size != n for a in arrays):
        raise ConfigError("channels differ in length")
    md = dict(metadata or {})
    md.update({
        "sample_rate_hz": float(sample_rate),
        "channels": names,
        "units": {k: (units or {}).get(k, "") for k in names},
        "n_samples": int(n),
    })
    md.setdefault("seed", None)
    md.setdefault("config", None)
    md.setdefault("config_hash", config_hash(md["config"]) if md["config"] is not None else None)
    md.setdefault("version", __version__)
    header = json.dumps(md, sort_keys=True).encode("utf-8")

    path, fd, tmp = _atomic_target(path)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            buf = np.empty((min(_CHUNK, max(n, 1)), len(names)), dtype=_DTYPE)
            for s in range(0, n, _CHUNK):
                e = min(n, s + _CHUNK)
                for j, a in enumerate(arrays):
                    buf[: e - s, j] = a[s:e]
                fh.write(buf[: e - s].tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_header(path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise TraceFormatError(f"{path}: not a trace file (bad magic)")
        raw = fh.read(4)
        if len(raw) != 4:
            raise TraceFormatError(f"{path}: truncated header")
        (ln,) = struct.unpack("<I", raw)
        try:
            md = json.loads(fh.read(ln).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise TraceFormatError(f"{path}: corrupt metadata block") from exc
    return md, 12 + ln


def read_trace(path) -> TraceFile:
    md, offset = read_header(path)
    names = md["channels"]
    n = int(md["n_samples"])
    need = offset + n * len(names) * _DTYPE.itemsize
    if os.path.getsize(path) < need:
        raise TraceFormatError(f"{path}: truncated data ({os.path.getsize(path)} < {need} bytes)")
    mm = np.memmap(path, dtype=_DTYPE, mode="r", offset=offset, shape=(n, len(names)))
    chans = {k: np.array(mm[:, j], dtype=np.float64) for j, k in enumerate(names)}
    del mm
    return TraceFile(md, chans)


def write_pair(path, pair: QuadraturePair, config=None, seed=None, extra=None):
    md = dict(extra or {})
    md["seed"] = seed
    md["config"] = config
    if config is not None:
        md["config_hash"] = config_hash(config)
    return write_trace(path, {"x0": pair.x0.samples, "xpi2": pair.xpi2.samples},
                       pair.sample_rate, {"x0": pair.x0.unit, "xpi2": pair.xpi2.unit}, md)


def read_pair(path) -> QuadraturePair:
    return read_trace(path).pair()
