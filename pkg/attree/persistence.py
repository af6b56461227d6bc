"""
Binary model files (little-endian).

    header   `<4sHIIqq`  magic b"ATTB", format version, n, chi, root edge (u, v)
    edges    `<I` count, then per edge `<qqq` (u, v, age), sorted
    weight   `<I` length, then float64 values
    tensors  `<I` count, then per node in ascending order:
             `<q` node, `<I` ndim, ndim × `<i` leg ids, ndim × `<I` extents, row-major float64 data
"""
import io
import logging
import numpy
import pathlib
import struct
import typing

from . import data
from . import model as bm
from . import topology

_log = logging.getLogger(__file__)

MAGIC = b"ATTB"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIIqq")
_COUNT = struct.Struct("<I")
_EDGE = struct.Struct("<qqq")
_NODE = struct.Struct("<qI")


def dumps(m: bm.TensorTreeModel) -> bytes:
    t = m.topology
    out = io.BytesIO()
    out.write(_HEADER.pack(MAGIC, FORMAT_VERSION, t.n, m.chi, *t.root_edge))
    out.write(_COUNT.pack(len(t.edges)))
    for u, v in t.edges:
        out.write(_EDGE.pack(u, v, t.edge_age[(u, v)]))
    out.write(_COUNT.pack(len(m.central_weight)))
    out.write(numpy.asarray(m.central_weight, dtype="<f8").tobytes())
    out.write(_COUNT.pack(len(m.tensors)))
    for node in sorted(m.tensors):
        T = m.tensors[node]
        out.write(_NODE.pack(node, T.ndim))
        out.write(struct.pack(f"<{T.ndim}i", *m.legs[node]))
        out.write(struct.pack(f"<{T.ndim}I", *T.shape))
        out.write(numpy.ascontiguousarray(T, dtype="<f8").tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, raw: bytes, source):
        self.raw = raw
        self.offset = 0
        self.source = source

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.raw):
            raise data.FormatError(f"{self.source}: truncated model file.")
        chunk = self.raw[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: typing.Union[str, struct.Struct]) -> tuple:
        s = fmt if isinstance(fmt, struct.Struct) else struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def floats(self, count: int) -> numpy.ndarray:
        return numpy.frombuffer(self.take(8 * count), dtype="<f8").astype(float)


def loads(raw: bytes, source="<bytes>") -> bm.TensorTreeModel:
    r = _Reader(raw, source)
    magic, version, n, chi, u, v = r.unpack(_HEADER)
    if magic != MAGIC:
        raise data.FormatError(f"{source}: not a model file (magic {magic!r}).")
    if version != FORMAT_VERSION:
        raise data.FormatError(f"{source}: unsupported format version {version}.")
    (n_edges,) = r.unpack(_COUNT)
    if n_edges != 2 * n - 3:
        raise data.FormatError(f"{source}: {n_edges} edges do not fit {n} variables.")
    ages = {}
    for _ in range(n_edges):
        a, b, age = r.unpack(_EDGE)
        ages[(a, b)] = age
    (length,) = r.unpack(_COUNT)
    weight = r.floats(length)
    (count,) = r.unpack(_COUNT)
    tensors = {}
    legs = {}
    for _ in range(count):
        node, ndim = r.unpack(_NODE)
        if ndim not in (2, 3):
            raise data.FormatError(f"{source}: node {node} has a {ndim}-leg tensor.")
        legs[node] = r.unpack(f"<{ndim}i")
        shape = r.unpack(f"<{ndim}I")
        tensors[node] = r.floats(int(numpy.prod(shape))).reshape(shape)
    if r.offset != len(raw):
        raise data.FormatError(f"{source}: {len(raw) - r.offset} trailing bytes.")
    try:
        t = topology.TreeTopology.from_edges(n, ages, (u, v), ages)
        m = bm.TensorTreeModel(t, tensors, legs, weight, chi)
        m.check_structure()
    except (ValueError, KeyError) as ex:
        raise data.FormatError(f"{source}: inconsistent model ({ex}).") from ex
    return m


def save_model(m: bm.TensorTreeModel, path: typing.Union[str, pathlib.Path]):
    """ Writes a model file; loading and saving again reproduces it byte for byte. """
    pathlib.Path(path).write_bytes(dumps(m))
    _log.debug("Model with %i variables written to %s.", m.n, path)
    return


def load_model(path: typing.Union[str, pathlib.Path]) -> bm.TensorTreeModel:
    return loads(pathlib.Path(path).read_bytes(), source=path)
