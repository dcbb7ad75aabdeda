"""Versioned binary snapshots, checksums and the run-directory manifest.

Snapshot files carry the magic "CRIC", a u32 format version, then named
little-endian float64 arrays with explicit dimensions.  Sidecar metadata
(mode, time stamps, step counters) lives in plain-text key=value files so a
run directory is inspectable with standard tools.  Every file is checksummed
with 64-bit FNV-1a into MANIFEST for cheap corruption detection on resume.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"CRIC"
FORMAT_VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


class SnapshotError(RuntimeError):
    """Corrupt, truncated or version-mismatched snapshot data."""


def fnv1a_bytes(data, h=_FNV_OFFSET):
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def fnv1a_file(path, chunk=1 << 20):
    h = _FNV_OFFSET
    with open(path, "rb") as fh:
        while True:
            block = fh.read(chunk)
            if not block:
                break
            h = fnv1a_bytes(block, h)
    return h


def write_arrays(path, arrays):
    """Write named float64 arrays in the CRIC container format."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_arrays(path):
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise SnapshotError(f"{path}: bad magic, not a CRIC snapshot")
        version, count = struct.unpack("<II", fh.read(8))
        if version != FORMAT_VERSION:
            raise SnapshotError(
                f"{path}: format version {version}, expected {FORMAT_VERSION}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise SnapshotError(f"{path}: truncated array {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return out


def write_meta(path, mapping):
    """Plain-text sidecar; floats serialized via hex for exact round-trips."""
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in mapping.items():
            if isinstance(v, float):
                fh.write(f"{k} = float:{v.hex()}\n")
            else:
                fh.write(f"{k} = {v}\n")


def read_meta(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            k, v = k.strip(), v.strip()
            if v.startswith("float:"):
                out[k] = float.fromhex(v[6:])
            elif v in ("True", "False"):
                out[k] = v == "True"
            else:
                try:
                    out[k] = int(v)
                except ValueError:
                    out[k] = v
    return out


class Manifest:
    """File checksums plus a completeness flag for one run directory."""

    NAME = "MANIFEST"

    def __init__(self, directory):
        self.directory = directory
        self.entries = {}
        self.status = "partial"

    def record(self, filename):
        path = os.path.join(self.directory, filename)
        self.entries[filename] = (fnv1a_file(path), os.path.getsize(path))

    def write(self):
        path = os.path.join(self.directory, self.NAME)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"status = {self.status}\n")
            for name in sorted(self.entries):
                h, size = self.entries[name]
                fh.write(f"{name} fnv1a64={h:016x} bytes={size}\n")

    @classmethod
    def read(cls, directory):
        man = cls(directory)
        path = os.path.join(directory, cls.NAME)
        if not os.path.exists(path):
            raise SnapshotError(f"no MANIFEST in {directory}")
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("status"):
                    man.status = line.split("=", 1)[1].strip()
                    continue
                name, hpart, bpart = line.rsplit(" ", 2)
                man.entries[name] = (int(hpart.split("=")[1], 16),
                                     int(bpart.split("=")[1]))
        return man

    def verify(self, filename):
        if filename not in self.entries:
            raise SnapshotError(f"{filename} not listed in MANIFEST")
        h, size = self.entries[filename]
        path = os.path.join(self.directory, filename)
        if not os.path.exists(path):
            raise SnapshotError(f"{filename} missing from run directory")
        if os.path.getsize(path) != size or fnv1a_file(path) != h:
            raise SnapshotError(f"{filename} failed its checksum")

    def verify_all(self):
        for name in self.entries:
            self.verify(name)


def save_model(path, model):
    """Persist the model description; loading rebuilds and cross-checks."""
    spec = model.spec
    arrays = {
        "params": np.array([
            spec.punctures, spec.resolution,
            spec.rho_max if spec.rho_max is not None else -1.0,
            spec.perturbation_amp, spec.perturbation_order,
            spec.r_cut, spec.r_in, spec.r_out,
        ]),
        "angles": np.array(spec.angles, dtype=float),
        "punctures_xy": np.array(
            [list(e.puncture) for e in model.ends], dtype=float),
        "background_log_factor": model.background_log_factor,
        "background_curvature": model.background_curvature,
    }
    write_arrays(path, arrays)


def load_model(path):
    from .surface import ModelSpec, build_model
    data = read_arrays(path)
    p = data["params"]
    spec = ModelSpec(
        punctures=int(p[0]), angles=tuple(data["angles"]),
        resolution=int(p[1]), rho_max=None if p[2] < 0 else float(p[2]),
        perturbation_amp=float(p[3]), perturbation_order=float(p[4]),
        puncture_xy=tuple(tuple(q) for q in data["punctures_xy"]),
        r_cut=float(p[5]), r_in=float(p[6]), r_out=float(p[7]))
    model = build_model(spec)
    for key, field in (("background_log_factor", model.background_log_factor),
                       ("background_curvature", model.background_curvature)):
        if not np.array_equal(data[key], field):
            raise SnapshotError(
                "model snapshot does not match the rebuilt model; "
                "file was produced by an incompatible version")
    return model
