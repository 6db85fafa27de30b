"""Reader and writer for SPICE raw waveform files (LTspice / ngspice style).

Layout::

    Title: ...
    Plotname: Transient Analysis
    Flags: real forward
    No. Variables: 3
    No. Points: 1024
    Variables:
            0       time    time
            1       V(out)  voltage
            2       I(L1)   device_current
    Binary:
    <payload>

The binary payload is point-major unless ``fastaccess`` is flagged. LTspice
writes time as float64 and every other trace as float32; ngspice writes all
float64. The width is resolved from the payload size first and the flags
second. Headers may be UTF-8/ASCII or UTF-16-LE (LTspice).
"""
from __future__ import annotations

import re

import numpy as np

from .dataset import Dataset, EngineError, Variable

REQUIRED_KEYS = ("title", "plotname", "flags", "no. variables", "no. points")


class HeaderMalformed(EngineError):
    pass


class PayloadSizeMismatch(EngineError):
    pass


def _kind_from_type(vtype: str) -> str:
    vtype = vtype.lower()
    if vtype == "time":
        return "time"
    if "current" in vtype:
        return "current"
    return "voltage"


def _split_header(data: bytes) -> tuple[list[str], str, bytes]:
    """Return (header lines, section marker, payload bytes)."""
    if data[:2] == b"\xff\xfe":
        data = data[2:]
    utf16 = len(data) > 1 and data[1:2] == b"\x00" and data[:1] != b"\x00"
    encoding = "utf_16_le" if utf16 else "latin-1"
    for marker in ("Binary:", "Values:"):
        needle = marker.encode(encoding)
        pos = data.find(needle)
        if pos >= 0:
            end = pos + len(needle)
            head = data[:pos].decode(encoding)
            # skip the line terminator that follows the marker
            newline = "\n".encode(encoding)
            cr = "\r".encode(encoding)
            if data[end:end + len(cr)] == cr:
                end += len(cr)
            if data[end:end + len(newline)] == newline:
                end += len(newline)
            lines = [ln.rstrip("\r") for ln in head.split("\n")]
            return lines, marker, data[end:]
    raise HeaderMalformed("neither 'Binary:' nor 'Values:' section found")


def _parse_header(lines: list[str]) -> tuple[dict[str, str], list[Variable]]:
    meta: dict[str, str] = {}
    variables: list[Variable] = []
    in_vars = False
    for line in lines:
        if not line.strip():
            continue
        if in_vars and (line[:1] in " \t" or re.match(r"^\d+\s", line)):
            fields = line.split()
            if len(fields) < 3:
                raise HeaderMalformed(f"bad variable line: {line!r}")
            variables.append(Variable(fields[1], _kind_from_type(fields[2])))
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise HeaderMalformed(f"unexpected header line: {line!r}")
        key = key.strip().lower()
        if key == "variables":
            in_vars = True
            continue
        in_vars = False
        meta[key] = value.strip()
    missing = [k for k in REQUIRED_KEYS if k not in meta]
    if missing:
        raise HeaderMalformed(f"header lacks {', '.join(missing)}")
    try:
        nvars = int(meta["no. variables"])
        npts = int(meta["no. points"])
    except ValueError as exc:
        raise HeaderMalformed(str(exc)) from None
    if nvars < 1 or nvars != len(variables):
        raise HeaderMalformed(f"declared {nvars} variables, found {len(variables)}")
    if "complex" in meta["flags"].lower():
        raise HeaderMalformed("complex (AC) data is not supported")
    if npts < 0:
        raise HeaderMalformed("negative point count")
    # time must lead; anything else is still read but flagged as such
    first = variables[0]
    variables[0] = Variable(first.name, "time")
    return meta, variables


def _binary_columns(payload: bytes, meta: dict[str, str], nvars: int,
                    npts: int) -> list[np.ndarray]:
    size = len(payload)
    single = npts * (8 + 4 * (nvars - 1))
    double = npts * 8 * nvars
    if size == double and size != single:
        wide = True
    elif size == single and size != double:
        wide = False
    elif size == single == double:
        wide = "double" in meta["flags"].lower() or nvars == 1
    else:
        # allow a trailing newline some emitters append
        trimmed = payload.rstrip(b"\n")
        if len(trimmed) != size and len(trimmed) in (single, double):
            return _binary_columns(trimmed, meta, nvars, npts)
        raise PayloadSizeMismatch(
            f"{npts} points x {nvars} variables need {single} (float32) or {double} "
            f"(float64) bytes, payload has {size}"
        )
    fast = "fastaccess" in meta["flags"].lower()
    if wide:
        if fast:
            block = np.frombuffer(payload, dtype="<f8").reshape(nvars, npts)
            return [block[i].copy() for i in range(nvars)]
        block = np.frombuffer(payload, dtype="<f8").reshape(npts, nvars)
        return [block[:, i].copy() for i in range(nvars)]
    if fast:
        time = np.frombuffer(payload[: 8 * npts], dtype="<f8")
        rest = np.frombuffer(payload[8 * npts:], dtype="<f4").reshape(nvars - 1, npts)
        return [time.copy()] + [rest[i].astype(np.float64) for i in range(nvars - 1)]
    record = np.dtype([("t", "<f8"), ("v", "<f4", (nvars - 1,))])
    rec = np.frombuffer(payload, dtype=record)
    # LTspice marks compressed points with a negative time stamp
    time = np.abs(rec["t"])
    return [time] + [rec["v"][:, i].astype(np.float64) for i in range(nvars - 1)]


def _ascii_columns(payload: bytes, nvars: int, npts: int) -> list[np.ndarray]:
    tokens = payload.decode("latin-1").replace("\x00", "").split()
    per_point = nvars + 1
    if len(tokens) < npts * per_point:
        raise PayloadSizeMismatch(
            f"{npts} points need {npts * per_point} values, found {len(tokens)}"
        )
    try:
        table = np.array(tokens[: npts * per_point], dtype=np.float64).reshape(npts, per_point)
    except ValueError as exc:
        raise HeaderMalformed(f"bad value in 'Values:' section: {exc}") from None
    if npts and not np.array_equal(table[:, 0], np.arange(npts)):
        raise HeaderMalformed("point indices in 'Values:' section are out of sequence")
    return [table[:, i + 1].copy() for i in range(nvars)]


def parse_raw(data: bytes) -> Dataset:
    lines, marker, payload = _split_header(data)
    meta, variables = _parse_header(lines)
    nvars, npts = len(variables), int(meta["no. points"])
    if marker == "Binary:":
        columns = _binary_columns(payload, meta, nvars, npts)
    else:
        columns = _ascii_columns(payload, nvars, npts)
    return Dataset(variables, columns, title=meta["title"], plotname=meta["plotname"])


def write_raw(ds: Dataset, binary: bool = True) -> bytes:
    """Serialize a Dataset. Binary output uses the LTspice layout (float64
    time, float32 traces); ASCII output keeps full precision."""
    if len(ds.variables) < 1:
        raise HeaderMalformed("cannot write a dataset without variables")
    vtypes = {"time": "time", "voltage": "voltage", "current": "device_current"}
    head = [
        f"Title: {ds.title or '*'}",
        f"Plotname: {ds.plotname}",
        "Flags: real forward",
        f"No. Variables: {len(ds.variables)}",
        f"No. Points: {ds.n_points}",
        "Variables:",
    ]
    head += [f"\t{i}\t{v.name}\t{vtypes[v.kind]}" for i, v in enumerate(ds.variables)]
    if not binary:
        body = []
        for p in range(ds.n_points):
            values = [repr(float(c[p])) for c in ds.columns]
            body.append(f"{p}\t{values[0]}")
            body += [f"\t{v}" for v in values[1:]]
        return ("\n".join(head + ["Values:"] + body) + "\n").encode("ascii")
    nvars = len(ds.variables)
    record = np.dtype([("t", "<f8"), ("v", "<f4", (nvars - 1,))])
    rec = np.zeros(ds.n_points, dtype=record)
    rec["t"] = ds.time
    if nvars > 1:
        rec["v"] = np.stack(ds.columns[1:], axis=1).astype(np.float32)
    return ("\n".join(head + ["Binary:"]) + "\n").encode("ascii") + rec.tobytes()
