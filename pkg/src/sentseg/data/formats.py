"""On-disk formats: binary netpbm images, fixed-point flow maps, annotation
CSV, split manifests and pair-score tables. Everything here is plain stdlib
plus numpy so datasets can be inspected with standard tools."""

import csv
import json

import numpy as np

from ..errors import FormatError, InputError, ParseError

# Flow values are stored as value = FLOW_OFFSET + FLOW_SCALE * displacement,
# clamped to [0, 255]; displacements in [-16, +15.875] px round-trip exactly
# on the 1/8 px grid.
FLOW_SCALE = 8
FLOW_OFFSET = 128

ANNOTATION_HEADER = ("video_id", "instance_id", "sentence")


def _read_header(data, magic, path):
    if not data.startswith(magic):
        raise FormatError(f"{path}: expected {magic.decode()} header")
    # Scan whitespace-separated integer fields, honoring '#' comments.
    fields = []
    pos = len(magic)
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        try:
            fields.append(int(data[start:pos]))
        except ValueError:
            raise FormatError(f"{path}: non-numeric header field {data[start:pos]!r}") from None
    pos += 1  # single whitespace byte separates header from payload
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    if w < 1 or h < 1:
        raise FormatError(f"{path}: bad image size {w}x{h}")
    return w, h, pos


def write_pgm(array, path):
    """Write a (H, W) uint8 array as a binary P5 file."""
    a = np.asarray(array)
    if a.ndim != 2:
        raise InputError(f"P5 needs a 2-dimensional array, got shape {a.shape}")
    a = a.astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode())
        fh.write(a.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    w, h, off = _read_header(data, b"P5", path)
    payload = data[off:off + w * h]
    if len(payload) != w * h:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {w * h}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def write_ppm(array, path):
    """Write a (H, W, 3) uint8 array as a binary P6 file."""
    a = np.asarray(array)
    if a.ndim != 3 or a.shape[2] != 3:
        raise InputError(f"P6 needs a (H, W, 3) array, got shape {a.shape}")
    a = a.astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{a.shape[1]} {a.shape[0]}\n255\n".encode())
        fh.write(a.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    w, h, off = _read_header(data, b"P6", path)
    payload = data[off:off + w * h * 3]
    if len(payload) != w * h * 3:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {w * h * 3}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def write_mask(mask, path):
    """Write a {0,1} mask as a P5 file with values {0, 255}."""
    m = np.asarray(mask)
    if not np.isin(m, (0, 1)).all():
        raise InputError("mask must only contain 0 and 1")
    write_pgm(m.astype(np.uint8) * 255, path)


def read_mask(path):
    raw = read_pgm(path)
    bad = ~np.isin(raw, (0, 255))
    if bad.any():
        value = int(raw[bad][0])
        raise FormatError(f"{path}: mask pixel value {value} is neither 0 nor 255")
    return (raw == 255).astype(np.uint8)


def flow_to_bytes(flow):
    """Quantize a float flow channel to the fixed-point uint8 encoding."""
    return np.clip(np.rint(FLOW_OFFSET + FLOW_SCALE * np.asarray(flow, dtype=np.float64)),
                   0, 255).astype(np.uint8)


def bytes_to_flow(raw):
    return ((raw.astype(np.float32) - FLOW_OFFSET) / FLOW_SCALE).astype(np.float32)


def write_flow(flow, path_x, path_y):
    """Write a (H, W, 2) displacement field as two fixed-point P5 files."""
    f = np.asarray(flow)
    if f.ndim != 3 or f.shape[2] != 2:
        raise InputError(f"flow needs shape (H, W, 2), got {f.shape}")
    write_pgm(flow_to_bytes(f[:, :, 0]), path_x)
    write_pgm(flow_to_bytes(f[:, :, 1]), path_y)


def read_flow(path_x, path_y):
    fx = bytes_to_flow(read_pgm(path_x))
    fy = bytes_to_flow(read_pgm(path_y))
    if fx.shape != fy.shape:
        raise FormatError(f"flow component shapes differ: {fx.shape} vs {fy.shape}")
    return np.stack([fx, fy], axis=2)


def _quote(field):
    return '"' + field.replace('"', '""') + '"'


def write_annotations(records, path):
    """Write (video_id, instance_id, sentence) rows; the sentence is always quoted."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(ANNOTATION_HEADER) + "\n")
        for vid, iid, sentence in records:
            fh.write(f"{vid},{iid},{_quote(sentence)}\n")


def read_annotations(path):
    """Parse the annotation CSV back into (video_id, instance_id, sentence) tuples."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("missing header row", line=1) from None
        if header != list(ANNOTATION_HEADER):
            raise ParseError(
                f"expected header {','.join(ANNOTATION_HEADER)!r}, got {','.join(header)!r}", line=1
            )
        records = []
        for row in reader:
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 fields, got {len(row)}", line=reader.line_num)
            records.append((row[0], row[1], row[2]))
    return records


def write_manifest(splits, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({k: list(v) for k, v in splits.items()}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path):
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}", line=exc.lineno) from None
    if not isinstance(data, dict) or not all(isinstance(v, list) for v in data.values()):
        raise FormatError(f"{path}: manifest must map split names to video id lists")
    return {k: [str(v) for v in vs] for k, vs in data.items()}


def read_pair_scores(path):
    """JSON file mapping video_id -> {pair label: confidence}."""
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}", line=exc.lineno) from None
    if not isinstance(data, dict):
        raise FormatError(f"{path}: pair scores must be a JSON object")
    out = {}
    for vid, scores in data.items():
        if not isinstance(scores, dict):
            raise FormatError(f"{path}: scores for {vid!r} must be an object")
        out[str(vid)] = {str(k): float(v) for k, v in scores.items()}
    return out
