"""On-disk formats: raw float32 volumes and channel frames with text headers,
binary PGM images and CSV tables stamped with the config hash."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .volume import Grid, Volume


class FormatError(ValueError):
    pass


def _write_header(path: Path, items: dict) -> None:
    lines = []
    for k, v in items.items():
        if isinstance(v, (list, tuple, np.ndarray)):
            v = " ".join(repr(float(x)) if isinstance(x, (float, np.floating)) else str(x) for x in v)
        elif isinstance(v, (float, np.floating)):
            v = repr(float(v))
        lines.append(f"{k} = {v}")
    path.write_text("\n".join(lines) + "\n")


def read_header(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"malformed header line {line!r} in {path}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def _floats(s):
    return [float(x) for x in s.split()]


def write_volume(path, vol: Volume, config_hash: str = "") -> Path:
    """Write ``<path>.raw`` (little-endian float32, C order x,y,z) and ``<path>.hdr``."""
    path = Path(path)
    raw, hdr = path.with_suffix(".raw"), path.with_suffix(".hdr")
    vol.data.astype("<f4").tofile(raw)
    _write_header(hdr, {
        "kind": "volume",
        "dims": list(vol.shape),
        "spacing": [float(s) for s in vol.spacing],
        "origin": [float(s) for s in vol.origin],
        "dtype": "float32_le",
        "order": "C(x,y,z)",
        "frame_id": int(vol.frame_id),
        "timestamp": float(vol.timestamp),
        "config_hash": config_hash,
    })
    return raw


def read_volume(path) -> Volume:
    path = Path(path)
    h = read_header(path.with_suffix(".hdr"))
    if h.get("kind") != "volume":
        raise FormatError(f"{path} is not a volume header")
    dims = tuple(int(x) for x in h["dims"].split())
    data = np.fromfile(path.with_suffix(".raw"), dtype="<f4")
    if data.size != int(np.prod(dims)):
        raise FormatError(f"{path}: expected {np.prod(dims)} samples, found {data.size}")
    grid = Grid(_floats(h["origin"]), _floats(h["spacing"]), dims)
    return Volume(data.reshape(dims).astype(np.float64), grid, int(h.get("frame_id", 0)),
                  float(h.get("timestamp", 0.0)), {"config_hash": h.get("config_hash", "")})


def write_channel_frame(path, frame, config_hash: str = "") -> Path:
    path = Path(path)
    raw = path.with_suffix(".raw")
    frame.samples.astype("<f4").tofile(raw)
    _write_header(path.with_suffix(".hdr"), {
        "kind": "channel_frame",
        "elements": frame.samples.shape[0],
        "samples": frame.samples.shape[1],
        "sample_rate_mhz": float(frame.sample_rate),
        "t0_us": float(frame.t0),
        "aperture": frame.tx_aperture,
        "dtype": "float32_le",
        "config_hash": config_hash,
    })
    return raw


def read_channel_frame(path):
    from .acoustics import ChannelFrame

    path = Path(path)
    h = read_header(path.with_suffix(".hdr"))
    if h.get("kind") != "channel_frame":
        raise FormatError(f"{path} is not a channel frame header")
    ne, ns = int(h["elements"]), int(h["samples"])
    data = np.fromfile(path.with_suffix(".raw"), dtype="<f4")
    if data.size != ne * ns:
        raise FormatError(f"{path}: expected {ne * ns} samples, found {data.size}")
    return ChannelFrame(data.reshape(ne, ns).astype(np.float64), float(h["sample_rate_mhz"]),
                        float(h["t0_us"]), h["aperture"])


def write_pgm(path, image) -> Path:
    """8-bit binary graymap; values are rounded and clipped to [0, 255]."""
    img = np.clip(np.rint(np.asarray(image, dtype=np.float64)), 0, 255).astype(np.uint8)
    if img.ndim != 2:
        raise FormatError("PGM images must be 2D")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts, pos = [], 0
    while len(parts) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while not blob[end:end + 1].isspace():
            end += 1
        parts.append(blob[pos:end])
        pos = end
    if parts[0] != b"P5":
        raise FormatError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval > 255:
        raise FormatError("only 8-bit PGM is supported")
    pos += 1
    return np.frombuffer(blob[pos:pos + w * h], dtype=np.uint8).reshape(h, w)


def write_csv(path, header, rows, config_hash: str = "") -> Path:
    """CSV with a leading ``# config_hash=...`` comment line."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])
    return path


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, np.integer):
        return int(x)
    return x


def read_csv(path):
    """Returns (config_hash, header, rows as lists of strings)."""
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if not first.startswith("# config_hash="):
            raise FormatError(f"{path} lacks a config hash line")
        r = csv.reader(fh)
        header = next(r)
        rows = list(r)
    return first.split("=", 1)[1], header, rows


def csv_hash(path) -> str:
    with open(path) as fh:
        first = fh.readline().strip()
    if not first.startswith("# config_hash="):
        raise FormatError(f"{path} lacks a config hash line")
    return first.split("=", 1)[1]


def write_scatterers_csv(path, scatterers, config_hash: str = "") -> Path:
    from .scene import KIND_NAMES

    rows = ((*p, a, KIND_NAMES[int(k)]) for p, a, k in
            zip(scatterers.positions, scatterers.amplitudes, scatterers.kinds))
    return write_csv(path, ["x", "y", "z", "amplitude", "kind"], rows, config_hash)
