"""MetaImage-style volume/field files, series manifests and stored results.

A header is a short text file of ``Key = value`` lines ending with
``ElementDataFile``; the payload is a little-endian raw file with x varying
fastest (vector components interleaved per voxel).
"""
from __future__ import annotations

import csv
import os
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from .deform import DisplacementField, VelocityField
from .errors import DataError, FormatError
from .volume import LabelMap, Volume3

ELEMENT_TYPES = {"MET_FLOAT": np.dtype("<f4"), "MET_USHORT": np.dtype("<u2")}
REQUIRED_KEYS = ("NDims", "DimSize", "ElementSpacing", "ElementType", "ElementDataFile")
KNOWN_KEYS = REQUIRED_KEYS + ("ElementNumberOfChannels", "LabelNames", "FieldKind")
FIELD_KINDS = {"displacement": DisplacementField, "velocity": VelocityField}


def _raw_name(header_path):
    return Path(header_path).with_suffix(".raw").name


def _write_pair(path, header, payload):
    path = Path(path)
    if path.suffix != ".mhd":
        raise DataError(f"{path}: header files must use the .mhd suffix")
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = _raw_name(path)
    lines = [f"{k} = {v}" for k, v in header] + [f"ElementDataFile = {raw}"]
    (path.parent / raw).write_bytes(payload)
    path.write_text("\n".join(lines) + "\n")
    return path


def _spacing_text(spacing):
    return " ".join(repr(float(s)) for s in spacing)


def write_volume(path, vol):
    """Write a scalar :class:`Volume3` as 32-bit float."""
    data = np.asarray(vol.data, dtype="<f4")
    header = [("NDims", 3), ("DimSize", " ".join(str(n) for n in data.shape)),
              ("ElementSpacing", _spacing_text(vol.spacing)), ("ElementType", "MET_FLOAT")]
    return _write_pair(path, header, data.tobytes(order="F"))


def write_labels(path, labels):
    """Write a :class:`LabelMap` as unsigned 16-bit ids, keeping ROI names in the header."""
    if labels.data.size and labels.data.max() > np.iinfo(np.uint16).max:
        raise DataError(f"{path}: label ids above 65535 cannot be stored")
    data = labels.data.astype("<u2")
    header = [("NDims", 3), ("DimSize", " ".join(str(n) for n in data.shape)),
              ("ElementSpacing", _spacing_text(labels.spacing)), ("ElementType", "MET_USHORT")]
    if labels.label_names:
        for name in labels.label_names.values():
            if any(c in name for c in " ;:\n"):
                raise DataError(f"{path}: ROI name {name!r} may not contain spaces, ';' or ':'")
        header.append(("LabelNames", ";".join(f"{k}:{v}" for k, v in sorted(labels.label_names.items()))))
    return _write_pair(path, header, data.tobytes(order="F"))


def write_field(path, f):
    """Write a 3-channel vector field; the header records whether it is a velocity."""
    data = np.asarray(f.data, dtype="<f4")
    kind = "velocity" if isinstance(f, VelocityField) else "displacement"
    header = [("NDims", 3), ("DimSize", " ".join(str(n) for n in data.shape[:3])),
              ("ElementSpacing", _spacing_text(f.spacing)), ("ElementNumberOfChannels", 3),
              ("ElementType", "MET_FLOAT"), ("FieldKind", kind)]
    # (x, y, z, c) -> c fastest, then x, y, z
    payload = np.transpose(data, (3, 0, 1, 2)).tobytes(order="F")
    return _write_pair(path, header, payload)


def read_header(path):
    """Parse and validate a header; returns a dict with typed values."""
    path = Path(path)
    try:
        text = path.read_text()
    except UnicodeDecodeError:
        raise FormatError(path, "header is not text") from None
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from None
    raw = {}
    last_line = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if "ElementDataFile" in raw:
            raise FormatError(path, "ElementDataFile must be the last header entry", lineno)
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise FormatError(path, f"expected 'Key = value', got {line.strip()!r}", lineno)
        if key not in KNOWN_KEYS:
            raise FormatError(path, f"unknown header key {key!r}", lineno)
        if key in raw:
            raise FormatError(path, f"duplicate header key {key!r}", lineno)
        raw[key] = (value, lineno)
        last_line = lineno
    for key in REQUIRED_KEYS:
        if key not in raw:
            raise FormatError(path, f"missing required key {key!r}", last_line + 1)

    def ints(key, count):
        value, lineno = raw[key]
        try:
            out = [int(p) for p in value.split()]
        except ValueError:
            raise FormatError(path, f"{key} must be integers, got {value!r}", lineno) from None
        if len(out) != count:
            raise FormatError(path, f"{key} needs {count} values, got {len(out)}", lineno)
        return out

    ndims = ints("NDims", 1)[0]
    if ndims != 3:
        raise FormatError(path, f"only 3D data is supported, NDims = {ndims}", raw["NDims"][1])
    dims = ints("DimSize", 3)
    if min(dims) < 1:
        raise FormatError(path, "DimSize entries must be positive", raw["DimSize"][1])
    value, lineno = raw["ElementSpacing"]
    try:
        spacing = [float(p) for p in value.split()]
    except ValueError:
        raise FormatError(path, f"ElementSpacing must be numbers, got {value!r}", lineno) from None
    if len(spacing) != 3 or not all(s > 0 for s in spacing):
        raise FormatError(path, "ElementSpacing needs 3 positive values", lineno)
    etype, lineno = raw["ElementType"]
    if etype not in ELEMENT_TYPES:
        raise FormatError(path, f"unsupported ElementType {etype!r}", lineno)
    channels = ints("ElementNumberOfChannels", 1)[0] if "ElementNumberOfChannels" in raw else 1
    if channels not in (1, 3):
        raise FormatError(path, f"ElementNumberOfChannels must be 1 or 3, got {channels}",
                          raw["ElementNumberOfChannels"][1])
    names = {}
    if "LabelNames" in raw:
        value, lineno = raw["LabelNames"]
        for item in filter(None, value.split(";")):
            k, sep, name = item.partition(":")
            if not sep or not k.strip().isdigit() or not name.strip():
                raise FormatError(path, f"bad LabelNames entry {item!r}", lineno)
            names[int(k)] = name.strip()
    kind = raw.get("FieldKind", ("displacement", 0))
    if kind[0] not in FIELD_KINDS:
        raise FormatError(path, f"unknown FieldKind {kind[0]!r}", kind[1])
    data_file, lineno = raw["ElementDataFile"]
    if not data_file or os.sep in data_file or data_file in (".", ".."):
        raise FormatError(path, f"ElementDataFile must name a file next to the header, got {data_file!r}",
                          lineno)
    return {
        "path": path, "dims": tuple(dims), "spacing": tuple(spacing), "element_type": etype,
        "channels": channels, "label_names": names, "field_kind": kind[0],
        "data_file": path.parent / data_file,
    }


def _read_payload(hdr):
    dtype = ELEMENT_TYPES[hdr["element_type"]]
    count = int(np.prod(hdr["dims"])) * hdr["channels"]
    try:
        blob = hdr["data_file"].read_bytes()
    except OSError as exc:
        raise FormatError(hdr["path"], f"cannot read payload {hdr['data_file'].name}: "
                                       f"{exc.strerror or exc}") from None
    expected = count * dtype.itemsize
    if len(blob) < expected:
        raise FormatError(hdr["path"], f"truncated payload: {len(blob)} of {expected} bytes")
    if len(blob) > expected:
        raise FormatError(hdr["path"], f"payload has {len(blob) - expected} trailing bytes")
    flat = np.frombuffer(blob, dtype=dtype)
    if hdr["channels"] == 1:
        return flat.reshape(hdr["dims"], order="F")
    arr = flat.reshape((hdr["channels"],) + hdr["dims"], order="F")
    return np.ascontiguousarray(np.moveaxis(arr, 0, -1))


def read_volume(path):
    hdr = read_header(path)
    if hdr["channels"] != 1:
        raise FormatError(path, f"expected a scalar volume, header declares {hdr['channels']} channels")
    if hdr["element_type"] != "MET_FLOAT":
        raise FormatError(path, f"expected MET_FLOAT intensities, got {hdr['element_type']}")
    return Volume3(_read_payload(hdr).astype(np.float64), hdr["spacing"])


def read_labels(path):
    hdr = read_header(path)
    if hdr["channels"] != 1:
        raise FormatError(path, f"expected a label map, header declares {hdr['channels']} channels")
    if hdr["element_type"] != "MET_USHORT":
        raise FormatError(path, f"expected MET_USHORT labels, got {hdr['element_type']}")
    return LabelMap(_read_payload(hdr).astype(np.int64), hdr["spacing"], hdr["label_names"])


def read_field(path):
    """Read a vector field as :class:`VelocityField` or :class:`DisplacementField`."""
    hdr = read_header(path)
    if hdr["channels"] != 3:
        raise FormatError(path, f"expected a 3-channel field, header declares {hdr['channels']} channel(s)")
    if hdr["element_type"] != "MET_FLOAT":
        raise FormatError(path, f"expected MET_FLOAT fields, got {hdr['element_type']}")
    cls = FIELD_KINDS[hdr["field_kind"]]
    return cls(_read_payload(hdr).astype(np.float64), hdr["spacing"])


def read_any(path):
    hdr = read_header(path)
    if hdr["channels"] == 3:
        return read_field(path)
    return read_labels(path) if hdr["element_type"] == "MET_USHORT" else read_volume(path)


# --- manifests -------------------------------------------------------------

LIST_KEYS = ("frame", "frame_labels", "gt_forward")
SCALAR_KEYS = ("case", "template", "labels", "mode", "n_frames")


class LazyFrames(Sequence):
    """Read-on-access list of volumes; nothing is cached."""

    def __init__(self, paths, reader=read_volume):
        self.paths = list(paths)
        self.reader = reader

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return LazyFrames(self.paths[i], self.reader)
        return self.reader(self.paths[i])


def parse_key_values(text, source="<text>", repeatable=()):
    """``key = value`` lines; ``#`` starts a comment. Repeatable keys collect lists."""
    out = {k: [] for k in repeatable}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise FormatError(source, f"expected 'key = value', got {line!r}", lineno)
        if key in repeatable:
            out[key].append(value)
        elif key in out:
            raise FormatError(source, f"duplicate key {key!r}", lineno)
        else:
            out[key] = value
    return out


class Manifest:
    """Series description: template, ordered frames, optional labels and ground truth.

    Relative paths are resolved against the manifest's directory.
    """

    def __init__(self, template, frames, labels=None, frame_labels=(), gt_forward=(), case="case",
                 root=None):
        self.root = Path(root) if root is not None else None
        self.template = Path(template)
        self.frames = [Path(p) for p in frames]
        self.labels = Path(labels) if labels else None
        self.frame_labels = [Path(p) for p in frame_labels]
        self.gt_forward = [Path(p) for p in gt_forward]
        self.case = case

    def _abs(self, p):
        return p if self.root is None or p.is_absolute() else self.root / p

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise DataError(f"{path}: {exc.strerror or exc}") from None
        kv = parse_key_values(text, path, LIST_KEYS)
        unknown = sorted(set(kv) - set(LIST_KEYS) - set(SCALAR_KEYS))
        if unknown:
            raise FormatError(path, f"unknown manifest keys: {', '.join(unknown)}")
        if "template" not in kv:
            raise FormatError(path, "manifest needs a 'template' entry")
        if not kv["frame"]:
            raise FormatError(path, "manifest lists no frames")
        for key in ("frame_labels", "gt_forward"):
            if kv[key] and len(kv[key]) != len(kv["frame"]):
                raise FormatError(path, f"{len(kv[key])} {key} entries for {len(kv['frame'])} frames")
        return cls(kv["template"], kv["frame"], kv.get("labels"), kv["frame_labels"], kv["gt_forward"],
                   kv.get("case", path.parent.name or "case"), root=path.parent)

    def dump(self):
        lines = [f"case = {self.case}", f"template = {self.template.as_posix()}"]
        if self.labels is not None:
            lines.append(f"labels = {self.labels.as_posix()}")
        lines += [f"frame = {p.as_posix()}" for p in self.frames]
        lines += [f"frame_labels = {p.as_posix()}" for p in self.frame_labels]
        lines += [f"gt_forward = {p.as_posix()}" for p in self.gt_forward]
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.dump())

    def all_paths(self):
        paths = [self.template] + self.frames + self.frame_labels + self.gt_forward
        if self.labels is not None:
            paths.append(self.labels)
        return [self._abs(p) for p in paths]

    def validate(self):
        """Check that every referenced header and payload exists, before any compute."""
        for p in self.all_paths():
            hdr = read_header(p)
            if not hdr["data_file"].is_file():
                raise DataError(f"{p}: payload {hdr['data_file'].name} not found")

    def read_template(self):
        return read_volume(self._abs(self.template))

    def read_labels(self):
        if self.labels is None:
            raise DataError("manifest has no labels entry")
        return read_labels(self._abs(self.labels))

    def frame_volumes(self):
        return LazyFrames([self._abs(p) for p in self.frames])

    def frame_label_maps(self):
        return LazyFrames([self._abs(p) for p in self.frame_labels], read_labels)

    def gt_fields(self):
        return LazyFrames([self._abs(p) for p in self.gt_forward], read_field)


# --- stored results --------------------------------------------------------

METRIC_COLUMNS = ("frame", "mode", "data_term", "min_jacobian", "iters", "seconds", "mean_displacement")


def field_paths(out_dir, n):
    d = Path(out_dir) / "fields"
    return {"velocity": d / f"velocity_{n:04d}.mhd", "forward": d / f"forward_{n:04d}.mhd",
            "inverse": d / f"inverse_{n:04d}.mhd"}


class ResultWriter:
    """Streams per-frame fields and metric rows into a results directory."""

    def __init__(self, out_dir, mode):
        self.out = Path(out_dir)
        self.mode = mode
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "fields").mkdir(exist_ok=True)
        self._fh = open(self.out / "metrics.csv", "w", newline="")
        self._csv = csv.writer(self._fh, lineterminator="\n")
        self._csv.writerow(METRIC_COLUMNS)
        self.count = 0

    def __call__(self, fr, velocity, forward, inverse):
        paths = field_paths(self.out, fr.index)
        write_field(paths["velocity"], velocity)
        write_field(paths["forward"], forward)
        write_field(paths["inverse"], inverse)
        self._csv.writerow([fr.index, self.mode, f"{fr.data_term:.8g}", f"{fr.min_jacobian:.6g}",
                            fr.iterations, f"{fr.seconds:.3f}", f"{fr.mean_displacement:.6g}"])
        self._fh.flush()
        self.count += 1

    def abort(self):
        """Close the metrics table without marking the directory complete."""
        self._fh.close()

    def close(self, flagged=()):
        self._fh.close()
        lines = [f"mode = {self.mode}", f"n_frames = {self.count}"]
        lines += [f"flagged = {n}" for n in flagged]
        (self.out / "result.txt").write_text("\n".join(lines) + "\n")


class StoredSeries:
    """A results directory viewed as a series result; fields load on access."""

    def __init__(self, out_dir):
        from .temporal import FrameResult  # local import keeps module load order simple

        self._frame_cls = FrameResult
        self.out = Path(out_dir)
        info = self.out / "result.txt"
        try:
            kv = parse_key_values(info.read_text(), info, ("flagged",))
        except OSError as exc:
            raise DataError(f"{info}: {exc.strerror or exc}") from None
        self.mode = kv.get("mode")
        if not self.mode:
            raise FormatError(info, "missing 'mode'")
        self.n_frames = int(kv.get("n_frames", 0))
        self.flagged = [int(x) for x in kv["flagged"]]
        self.metrics = {}
        with open(self.out / "metrics.csv", newline="") as fh:
            for rec in csv.DictReader(fh):
                self.metrics[int(rec["frame"])] = rec

    def __len__(self):
        return self.n_frames

    def frame(self, n):
        if not 1 <= n <= self.n_frames:
            raise IndexError(f"frame {n} out of range 1..{self.n_frames}")
        paths = field_paths(self.out, n)
        rec = self.metrics.get(n, {})
        return self._frame_cls(
            index=n, velocity=read_field(paths["velocity"]), forward=read_field(paths["forward"]),
            inverse=read_field(paths["inverse"]), data_term=float(rec.get("data_term", "nan")),
            min_jacobian=float(rec.get("min_jacobian", "nan")), iterations=int(rec.get("iters", 0)),
            seconds=float(rec.get("seconds", "nan")), converged=n not in self.flagged,
            mean_displacement=float(rec.get("mean_displacement", "nan")))
