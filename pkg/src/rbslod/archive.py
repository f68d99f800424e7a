"""Versioned binary persistence of the offline output.

File layout: a sequence of chunks, each ``tag (4 bytes) + length (u64 LE)
+ payload``.  The first chunk is the header (magic ``RBSL``, format
version, mesh/ell/tolerance configuration, problem hash); one chunk per
patch class carries the reduced spaces and the flux Gram blocks; the final
chunk stores the CRC32 of all preceding bytes.  All floats are 64-bit
little-endian, arrays row-major with explicit dimension headers, so a
write/read round trip is bit-exact and two writes of equal data produce
identical files.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import CorruptArchive, SchemaMismatch
from .mesh import CoarseMesh
from .rboffline import ReducedSpace, TraceGrams

MAGIC = b"RBSL"
FORMAT_VERSION = 1

_HEAD = b"HEAD"
_CLASS = b"CLS0"
_CRC = b"CRC0"

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8"), 2: np.dtype("u1")}
_DTYPE_CODES = {"float64": 0, "int64": 1, "uint8": 2}


@dataclass
class SpaceRecord:
    """Archived reduced tables of one (patch, element) pair (no fine Riesz vectors)."""

    element: int
    mus: np.ndarray
    basis: np.ndarray
    rhs_coeffs: np.ndarray
    form_grams: np.ndarray
    vss: np.ndarray
    vsp: np.ndarray
    vpp: float
    averages: np.ndarray
    history: np.ndarray
    p_norm: float
    exhausted: bool

    @property
    def m(self):
        return self.basis.shape[0]

    @classmethod
    def from_space(cls, space):
        return cls(space.element, space.mus, space.basis, space.rhs_coeffs,
                   space.form_grams, space.vss, space.vsp, space.vpp,
                   space.averages, space.history, space.p_norm, space.exhausted)

    def to_space(self):
        return ReducedSpace(
            element=self.element, mus=self.mus, basis=self.basis,
            rhs_coeffs=self.rhs_coeffs, form_grams=self.form_grams,
            vss=self.vss, vsp=self.vsp, vpp=self.vpp,
            traces=None, averages=self.averages, history=self.history,
            p_norm=self.p_norm, exhausted=self.exhausted)


@dataclass
class ClassRecord:
    """One patch compute class: member elements, reduced spaces, flux Gram blocks."""

    key: tuple
    members: np.ndarray
    trace_offsets: np.ndarray
    trace_gram: np.ndarray
    spaces: list

    def trace_grams(self):
        return TraceGrams(self.trace_offsets, self.trace_gram)


@dataclass
class OfflineArchive:
    """Complete offline output plus the configuration it was trained for."""

    n: int
    r: int
    ell: int
    tol: float
    max_m: int
    problem_name: str
    problem_hash: bytes
    training_descriptor: str
    classes: list
    version: int = FORMAT_VERSION

    def coarse_mesh(self):
        return CoarseMesh(self.n)

    def verify(self, problem, exc=SchemaMismatch):
        expected = problem_config_hash(problem, self.n, self.r, self.ell)
        if problem.name != self.problem_name or expected != self.problem_hash:
            raise exc(
                f"archive trained for {self.problem_name!r} "
                f"(n={self.n}, r={self.r}, ell={self.ell}) does not match "
                f"problem {problem.name!r}")

    def max_basis_size(self):
        return max((space.m for rec in self.classes for space in rec.spaces),
                   default=0)


def problem_config_hash(problem, n, r, ell):
    """Stable digest of the problem identity and discretization."""
    parts = [problem.name, problem.bc.tag, str(problem.q_terms),
             repr([tuple(b) for b in problem.parameter_box]),
             repr(tuple(problem.periodic)),
             str(int(problem.translation_invariant)),
             f"{n}:{r}:{ell}"]
    return hashlib.sha256("|".join(parts).encode()).digest()


class _Writer:
    def __init__(self):
        self.parts = []

    def u8(self, v):
        self.parts.append(struct.pack("<B", v))

    def u32(self, v):
        self.parts.append(struct.pack("<I", v))

    def i64(self, v):
        self.parts.append(struct.pack("<q", v))

    def f64(self, v):
        self.parts.append(struct.pack("<d", v))

    def raw(self, b):
        self.parts.append(b)

    def string(self, s):
        data = s.encode()
        self.u32(len(data))
        self.raw(data)

    def array(self, a):
        a = np.ascontiguousarray(a)
        code = _DTYPE_CODES.get(a.dtype.name)
        if code is None:
            raise ValueError(f"unsupported array dtype {a.dtype}")
        self.u8(code)
        self.u32(a.ndim)
        for d in a.shape:
            self.parts.append(struct.pack("<Q", d))
        self.raw(a.astype(_DTYPES[code], copy=False).tobytes())

    def bytes(self):
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def _take(self, size):
        if self.pos + size > len(self.data):
            raise CorruptArchive("truncated payload")
        out = self.data[self.pos:self.pos + size]
        self.pos += size
        return out

    def u8(self):
        return struct.unpack("<B", self._take(1))[0]

    def u32(self):
        return struct.unpack("<I", self._take(4))[0]

    def i64(self):
        return struct.unpack("<q", self._take(8))[0]

    def f64(self):
        return struct.unpack("<d", self._take(8))[0]

    def string(self):
        return self._take(self.u32()).decode()

    def array(self):
        code = self.u8()
        if code not in _DTYPES:
            raise CorruptArchive(f"unknown array dtype code {code}")
        ndim = self.u32()
        dims = tuple(struct.unpack("<Q", self._take(8))[0] for _ in range(ndim))
        count = int(np.prod(dims)) if dims else 1
        raw = self._take(count * _DTYPES[code].itemsize)
        return np.frombuffer(raw, dtype=_DTYPES[code]).reshape(dims).copy()

    @property
    def exhausted(self):
        return self.pos >= len(self.data)


def _pack_chunk(tag, payload):
    return tag + struct.pack("<Q", len(payload)) + payload


def _space_payload(w, space):
    w.i64(space.element)
    w.u8(1 if space.exhausted else 0)
    w.f64(space.vpp)
    w.f64(space.p_norm)
    for a in (space.mus, space.basis, space.rhs_coeffs, space.form_grams,
              space.vss, space.vsp, space.averages, space.history):
        w.array(np.asarray(a, dtype=float))


def _read_space(r):
    element = r.i64()
    exhausted = bool(r.u8())
    vpp = r.f64()
    p_norm = r.f64()
    mus, basis, rhs_coeffs, form_grams, vss, vsp, averages, history = (
        r.array() for _ in range(8))
    return SpaceRecord(element, mus, basis, rhs_coeffs, form_grams,
                       vss, vsp, vpp, averages, history, p_norm, exhausted)


def write_archive(path, archive):
    """Serialize an archive; deterministic bytes for identical in-memory data."""
    head = _Writer()
    head.raw(MAGIC)
    head.u32(archive.version)
    head.u32(archive.n)
    head.u32(archive.r)
    head.u32(archive.ell)
    head.f64(archive.tol)
    head.u32(archive.max_m)
    if len(archive.problem_hash) != 32:
        raise ValueError("problem hash must be 32 bytes")
    head.raw(archive.problem_hash)
    head.string(archive.problem_name)
    head.string(archive.training_descriptor)

    blob = [_pack_chunk(_HEAD, head.bytes())]
    for rec in archive.classes:
        w = _Writer()
        for v in rec.key:
            w.i64(int(v))
        w.array(np.asarray(rec.members, dtype=np.int64))
        w.array(np.asarray(rec.trace_offsets, dtype=np.int64))
        w.array(np.asarray(rec.trace_gram, dtype=float))
        w.u32(len(rec.spaces))
        for space in rec.spaces:
            _space_payload(w, space)
        blob.append(_pack_chunk(_CLASS, w.bytes()))

    body = b"".join(blob)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(_pack_chunk(_CRC, struct.pack("<I", crc)))


def _iter_chunks(data):
    pos = 0
    while pos < len(data):
        if pos + 12 > len(data):
            raise CorruptArchive("truncated chunk header")
        tag = data[pos:pos + 4]
        (length,) = struct.unpack("<Q", data[pos + 4:pos + 12])
        if pos + 12 + length > len(data):
            raise CorruptArchive("truncated chunk payload")
        yield tag, pos, data[pos + 12:pos + 12 + length]
        pos += 12 + length


def read_archive(path):
    """Parse and validate an archive file; no partial state escapes on failure."""
    with open(path, "rb") as fh:
        data = fh.read()
    chunks = list(_iter_chunks(data))
    if not chunks or chunks[-1][0] != _CRC:
        raise CorruptArchive("missing checksum chunk")
    crc_tag, crc_pos, crc_payload = chunks[-1]
    if len(crc_payload) != 4:
        raise CorruptArchive("malformed checksum chunk")
    (stored_crc,) = struct.unpack("<I", crc_payload)
    if zlib.crc32(data[:crc_pos]) & 0xFFFFFFFF != stored_crc:
        raise CorruptArchive("checksum mismatch")
    if chunks[0][0] != _HEAD:
        raise CorruptArchive("missing header chunk")

    r = _Reader(chunks[0][2])
    if r._take(4) != MAGIC:
        raise CorruptArchive("bad magic")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CorruptArchive(
            f"unsupported format version {version} (reader supports {FORMAT_VERSION})")
    n, rr, ell = r.u32(), r.u32(), r.u32()
    tol = r.f64()
    max_m = r.u32()
    problem_hash = r._take(32)
    problem_name = r.string()
    training_descriptor = r.string()

    classes = []
    for tag, _, payload in chunks[1:-1]:
        if tag != _CLASS:
            raise CorruptArchive(f"unexpected chunk tag {tag!r}")
        cr = _Reader(payload)
        key = tuple(cr.i64() for _ in range(4))
        members = cr.array()
        trace_offsets = cr.array()
        trace_gram = cr.array()
        n_spaces = cr.u32()
        spaces = [_read_space(cr) for _ in range(n_spaces)]
        if not cr.exhausted:
            raise CorruptArchive("trailing bytes in class chunk")
        classes.append(ClassRecord(key, members, trace_offsets, trace_gram, spaces))

    return OfflineArchive(n, rr, ell, tol, max_m, problem_name, problem_hash,
                          training_descriptor, classes, version)


SOLUTION_MAGIC = b"RBSG"


def write_solution_grid(path, values):
    """Flat float64 grid file: magic, node dimensions, row-major data."""
    values = np.ascontiguousarray(np.asarray(values, dtype=float))
    if values.ndim != 2:
        raise ValueError("solution grid must be two-dimensional (ny, nx)")
    with open(path, "wb") as fh:
        fh.write(SOLUTION_MAGIC)
        fh.write(struct.pack("<QQ", values.shape[1], values.shape[0]))
        fh.write(values.astype("<f8").tobytes())


def read_solution_grid(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != SOLUTION_MAGIC:
        raise CorruptArchive("bad solution grid magic")
    nx, ny = struct.unpack("<QQ", data[4:20])
    expect = 20 + nx * ny * 8
    if len(data) != expect:
        raise CorruptArchive("solution grid size mismatch")
    return np.frombuffer(data[20:], dtype="<f8").reshape(ny, nx).copy()
