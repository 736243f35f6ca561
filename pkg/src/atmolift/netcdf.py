"""Minimal classic-NetCDF (CDF-1/CDF-2) reader and reference writer.

Covers the subset reanalysis-shaped files need: numeric types, at most one
unlimited dimension, attributes surfaced as plain values. NetCDF-4/HDF5 and
CDF-5 are rejected explicitly. The writer exists as an independent oracle
for the reader and to build small fixture files; it shares no parsing code
with the reader.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, CorruptionError, FormatError, UnsupportedFormatError

__all__ = ["NetcdfData", "read_netcdf_classic", "write_netcdf_classic"]

_ABSENT = 0
_NC_DIMENSION = 0x0A
_NC_VARIABLE = 0x0B
_NC_ATTRIBUTE = 0x0C
_STREAMING = 0xFFFFFFFF

# nc_type -> (numpy big-endian dtype, byte size)
_TYPEMAP = {
    1: (">i1", 1),
    2: ("S1", 1),
    3: (">i2", 2),
    4: (">i4", 4),
    5: (">f4", 4),
    6: (">f8", 8),
}
_NUMERIC_TYPES = {1, 3, 4, 5, 6}


@dataclass
class NetcdfData:
    """Parsed contents: dimension sizes, variables, attributes."""

    dimensions: dict[str, int | None]       # None marks the record dimension
    variables: dict[str, np.ndarray]
    var_dimensions: dict[str, tuple[str, ...]]
    attributes: dict[str, object] = field(default_factory=dict)
    var_attributes: dict[str, dict[str, object]] = field(default_factory=dict)
    n_records: int = 0


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptionError(
                f"header truncated: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.buf)}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def i64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def name(self) -> str:
        n = self.u32()
        raw = self.take(n)
        self.take(_pad4(n) - n)
        return raw.decode("utf-8")


def _pad4(n: int) -> int:
    return (n + 3) & ~3


def read_netcdf_classic(path, variables: list[str] | None = None) -> NetcdfData:
    """Parse a classic NetCDF file and read the named variables.

    ``variables=None`` reads every numeric variable. Raises FormatError for
    bad magic, UnsupportedFormatError for CDF-5/NetCDF-4, KeyError for a
    missing variable, and CorruptionError for truncated payloads.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4:
        raise FormatError(f"{path}: too short to be a NetCDF file")
    if buf[:4] == b"\x89HDF":
        raise UnsupportedFormatError(f"{path}: NetCDF-4/HDF5 files are not supported")
    if buf[:3] != b"CDF":
        raise FormatError(f"{path}: bad magic {buf[:3]!r}, expected b'CDF'")
    version = buf[3]
    if version not in (1, 2):
        raise UnsupportedFormatError(
            f"{path}: CDF version {version} not supported (only classic 1 and 2)"
        )
    offset_size = 4 if version == 1 else 8

    cur = _Cursor(buf)
    cur.pos = 4
    numrecs = cur.u32()

    # dimension list
    dims: list[tuple[str, int]] = []
    tag, nelems = cur.u32(), cur.u32()
    if tag not in (_ABSENT, _NC_DIMENSION):
        raise FormatError(f"{path}: bad dimension-list tag {tag:#x}")
    if tag == _NC_DIMENSION:
        for _ in range(nelems):
            dname = cur.name()
            dims.append((dname, cur.u32()))

    attributes = _read_attrs(cur, path)

    # variable list
    tag, nelems = cur.u32(), cur.u32()
    if tag not in (_ABSENT, _NC_VARIABLE):
        raise FormatError(f"{path}: bad variable-list tag {tag:#x}")
    headers = []
    for _ in range(nelems):
        vname = cur.name()
        rank = cur.u32()
        dimids = [cur.u32() for _ in range(rank)]
        vattrs = _read_attrs(cur, path)
        nc_type = cur.u32()
        cur.u32()  # vsize: recomputed below, not trusted
        begin = cur.u32() if offset_size == 4 else cur.i64()
        headers.append((vname, dimids, vattrs, nc_type, begin))

    dim_names = [d[0] for d in dims]
    record_dims = [i for i, (_, size) in enumerate(dims) if size == 0]
    if len(record_dims) > 1:
        raise FormatError(f"{path}: more than one unlimited dimension")
    record_dimid = record_dims[0] if record_dims else None

    # record layout: per-record slab sizes padded to 4 bytes, except when
    # there is exactly one record variable (classic-format special case)
    rec_vars = []
    slab_info = {}
    for vname, dimids, _, nc_type, begin in headers:
        if nc_type not in _TYPEMAP:
            raise FormatError(f"{path}: variable {vname!r} has unknown nc_type {nc_type}")
        _, tsize = _TYPEMAP[nc_type]
        is_record = bool(dimids) and dimids[0] == record_dimid and record_dimid is not None
        fixed_dims = dimids[1:] if is_record else dimids
        slab_count = int(np.prod([dims[d][1] for d in fixed_dims], dtype=np.int64)) if fixed_dims else 1
        slab_bytes = slab_count * tsize
        slab_info[vname] = (is_record, fixed_dims, slab_count, slab_bytes)
        if is_record:
            rec_vars.append(vname)
    recsize = sum(_pad4(slab_info[v][3]) for v in rec_vars)
    if len(rec_vars) == 1:
        recsize = slab_info[rec_vars[0]][3]

    if numrecs == _STREAMING:
        if rec_vars:
            first = min(begin for vname, _, _, _, begin in headers if vname in rec_vars)
            numrecs = (len(buf) - first) // recsize if recsize else 0
        else:
            numrecs = 0

    by_name = {h[0]: h for h in headers}
    if variables is None:
        wanted = [h[0] for h in headers if h[3] in _NUMERIC_TYPES]
    else:
        wanted = list(variables)

    out_vars: dict[str, np.ndarray] = {}
    out_dims: dict[str, tuple[str, ...]] = {}
    out_vattrs: dict[str, dict[str, object]] = {}
    for vname in wanted:
        if vname not in by_name:
            raise KeyError(f"{path}: no variable named {vname!r}")
        _, dimids, vattrs, nc_type, begin = by_name[vname]
        if nc_type not in _NUMERIC_TYPES:
            raise ContractError(f"{path}: variable {vname!r} is not numeric")
        dt, _ = _TYPEMAP[nc_type]
        is_record, fixed_dims, slab_count, slab_bytes = slab_info[vname]
        fixed_shape = tuple(dims[d][1] for d in fixed_dims)
        if is_record:
            parts = []
            for r in range(numrecs):
                start = begin + r * recsize
                end = start + slab_bytes
                if end > len(buf):
                    raise CorruptionError(
                        f"{path}: variable {vname!r} truncated at record {r}"
                    )
                parts.append(np.frombuffer(buf, dtype=dt, count=slab_count, offset=start))
            data = (
                np.stack(parts).reshape((numrecs,) + fixed_shape)
                if parts
                else np.empty((0,) + fixed_shape, dtype=dt)
            )
        else:
            if begin + slab_bytes > len(buf):
                raise CorruptionError(f"{path}: variable {vname!r} truncated")
            data = np.frombuffer(buf, dtype=dt, count=slab_count, offset=begin)
            data = data.reshape(fixed_shape)
        out_vars[vname] = data
        out_dims[vname] = tuple(dim_names[d] for d in dimids)
        out_vattrs[vname] = vattrs

    dimensions: dict[str, int | None] = {
        name: (None if size == 0 else size) for name, size in dims
    }
    return NetcdfData(
        dimensions=dimensions,
        variables=out_vars,
        var_dimensions=out_dims,
        attributes=attributes,
        var_attributes=out_vattrs,
        n_records=int(numrecs),
    )


def _read_attrs(cur: _Cursor, path) -> dict[str, object]:
    tag, nelems = cur.u32(), cur.u32()
    if tag not in (_ABSENT, _NC_ATTRIBUTE):
        raise FormatError(f"{path}: bad attribute-list tag {tag:#x}")
    attrs: dict[str, object] = {}
    for _ in range(nelems):
        aname = cur.name()
        nc_type = cur.u32()
        count = cur.u32()
        if nc_type not in _TYPEMAP:
            raise FormatError(f"{path}: attribute {aname!r} has unknown nc_type {nc_type}")
        dt, tsize = _TYPEMAP[nc_type]
        raw = cur.take(count * tsize)
        cur.take(_pad4(count * tsize) - count * tsize)
        if nc_type == 2:
            attrs[aname] = raw.decode("utf-8", errors="replace")
        else:
            vals = np.frombuffer(raw, dtype=dt)
            attrs[aname] = vals.item() if vals.size == 1 else vals
    return attrs


# ---------------------------------------------------------------------------
# reference writer


_WRITE_TYPES = {
    np.dtype(np.int8): 1,
    np.dtype(np.int16): 3,
    np.dtype(np.int32): 4,
    np.dtype(np.float32): 5,
    np.dtype(np.float64): 6,
}


def write_netcdf_classic(
    path,
    dimensions: dict[str, int | None],
    variables: dict[str, tuple[tuple[str, ...], np.ndarray]],
    attributes: dict[str, str] | None = None,
    version: int = 1,
) -> None:
    """Write a classic NetCDF file (the reader's independent oracle).

    ``dimensions`` maps names to sizes; value None marks the single record
    dimension. Each variable is (dim-name tuple, array); a variable whose
    first dimension is the record dimension supplies one slab per record.
    Only numeric dtypes and string global attributes are supported.
    """
    if version not in (1, 2):
        raise ContractError(f"writer supports CDF versions 1 and 2, got {version}")
    record_dims = [d for d, s in dimensions.items() if s is None]
    if len(record_dims) > 1:
        raise ContractError("at most one record dimension")
    record_dim = record_dims[0] if record_dims else None
    dim_names = list(dimensions)
    dim_index = {d: i for i, d in enumerate(dim_names)}

    numrecs = 0
    norm_vars: dict[str, tuple[tuple[str, ...], np.ndarray, int]] = {}
    for vname, (vdims, arr) in variables.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _WRITE_TYPES:
            raise ContractError(f"unsupported dtype {arr.dtype} for variable {vname!r}")
        for d in vdims:
            if d not in dimensions:
                raise ContractError(f"variable {vname!r} uses unknown dimension {d!r}")
        expect = tuple(
            (arr.shape[i] if d == record_dim else dimensions[d])
            for i, d in enumerate(vdims)
        )
        if arr.shape != expect:
            raise ContractError(
                f"variable {vname!r} shape {arr.shape} does not match dims {vdims}"
            )
        if vdims and vdims[0] == record_dim:
            numrecs = max(numrecs, arr.shape[0])
        if record_dim in vdims[1:]:
            raise ContractError("record dimension must come first")
        norm_vars[vname] = (vdims, arr, _WRITE_TYPES[arr.dtype])

    def name_bytes(s: str) -> bytes:
        raw = s.encode("utf-8")
        return struct.pack(">I", len(raw)) + raw + b"\x00" * (_pad4(len(raw)) - len(raw))

    def attr_list(attrs: dict[str, str] | None) -> bytes:
        if not attrs:
            return struct.pack(">II", _ABSENT, 0)
        out = struct.pack(">II", _NC_ATTRIBUTE, len(attrs))
        for aname, text in attrs.items():
            raw = text.encode("utf-8")
            out += name_bytes(aname)
            out += struct.pack(">II", 2, len(raw))
            out += raw + b"\x00" * (_pad4(len(raw)) - len(raw))
        return out

    # fixed header parts
    header = b"CDF" + bytes([version])
    header += struct.pack(">I", numrecs)
    header += struct.pack(">II", _NC_DIMENSION, len(dim_names)) if dim_names else struct.pack(">II", _ABSENT, 0)
    for d in dim_names:
        header += name_bytes(d) + struct.pack(">I", 0 if dimensions[d] is None else dimensions[d])
    header += attr_list(attributes)

    # variable headers need data offsets; lay data out after the header.
    # First compute header length with placeholder offsets.
    offset_fmt = ">I" if version == 1 else ">Q"
    tsizes = {1: 1, 3: 2, 4: 4, 5: 4, 6: 8}

    order = list(norm_vars)
    fixed = [v for v in order if not (norm_vars[v][0] and norm_vars[v][0][0] == record_dim)]
    record = [v for v in order if v not in fixed]

    def var_header(vname: str, begin: int) -> bytes:
        vdims, arr, nc_type = norm_vars[vname]
        out = name_bytes(vname)
        out += struct.pack(">I", len(vdims))
        for d in vdims:
            out += struct.pack(">I", dim_index[d])
        out += attr_list(None)
        is_record = bool(vdims) and vdims[0] == record_dim
        slab_size = int(np.prod(arr.shape[1:] if is_record else arr.shape, dtype=np.int64))
        vsize = slab_size * tsizes[nc_type]
        if not (is_record and len(record) == 1):
            vsize = _pad4(vsize)  # single-record-variable special case skips padding
        out += struct.pack(">I", nc_type)
        out += struct.pack(">I", min(vsize, 0xFFFFFFFF))
        out += struct.pack(offset_fmt, begin)
        return out

    var_list_head = struct.pack(">II", _NC_VARIABLE, len(order)) if order else struct.pack(">II", _ABSENT, 0)
    header_len = len(header) + len(var_list_head)
    for v in order:
        header_len += len(var_header(v, 0))

    begins: dict[str, int] = {}
    pos = header_len
    for v in fixed:
        _, arr, nc_type = norm_vars[v]
        begins[v] = pos
        pos += _pad4(arr.size * tsizes[nc_type])
    slab_padded = {
        v: _pad4(int(np.prod(norm_vars[v][1].shape[1:], dtype=np.int64)) * tsizes[norm_vars[v][2]])
        for v in record
    }
    if len(record) == 1:
        v = record[0]
        slab_padded[v] = int(np.prod(norm_vars[v][1].shape[1:], dtype=np.int64)) * tsizes[norm_vars[v][2]]
    for v in record:
        begins[v] = pos
        pos += slab_padded[v]

    body = bytearray()
    for v in fixed:
        _, arr, nc_type = norm_vars[v]
        raw = arr.astype(_TYPEMAP[nc_type][0]).tobytes()
        body += raw + b"\x00" * (_pad4(len(raw)) - len(raw))
    for r in range(numrecs):
        for v in record:
            _, arr, nc_type = norm_vars[v]
            raw = arr[r].astype(_TYPEMAP[nc_type][0]).tobytes()
            body += raw + b"\x00" * (slab_padded[v] - len(raw))

    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(var_list_head)
        for v in order:
            fh.write(var_header(v, begins[v]))
        fh.write(bytes(body))
