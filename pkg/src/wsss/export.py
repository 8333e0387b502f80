"""Viewable exports: heatmaps as 8-bit PGM, label maps as palette PPM, plus WSST twins."""

from pathlib import Path

import numpy as np

from . import wsst

# class index -> RGB; order follows data.CLASS_NAMES
PALETTE = np.array(
    [
        (210, 180, 140),  # Cleared: tan
        (0, 100, 0),  # Pine: dark green
        (60, 179, 113),  # Spruce: medium sea green
        (238, 201, 0),  # Beech: gold
        (178, 34, 34),  # Oak: firebrick
    ],
    dtype=np.uint8,
)


def heat_to_u8(p):
    return np.round(255.0 * np.clip(np.asarray(p, dtype=np.float64), 0, 1)).astype(np.uint8)


def write_pgm(path, heat):
    """Binary P5 grayscale; pixel = round(255 * p) for p in [0, 1]."""
    img = heat_to_u8(heat)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def write_ppm(path, labels, palette=PALETTE):
    labels = np.asarray(labels)
    if labels.size and labels.max() >= len(palette):
        raise ValueError(f"label {labels.max()} has no palette entry")
    rgb = palette[labels]
    h, w = labels.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def read_pnm(path):
    """Minimal reader for the P5/P6 files written here."""
    data = Path(path).read_bytes()
    magic, dims, maxval, rest = data.split(b"\n", 3)
    w, h = (int(v) for v in dims.split())
    if int(maxval) != 255:
        raise ValueError(f"{path}: only maxval 255 supported")
    if magic == b"P5":
        return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)
    if magic == b"P6":
        return np.frombuffer(rest, dtype=np.uint8).reshape(h, w, 3)
    raise ValueError(f"{path}: unsupported magic {magic!r}")


def save_heatmaps(heatmaps, directory, stem):
    """``<stem>.heat.wsst`` with all channels, ``<stem>.c<s>.pgm`` per computed class."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    wsst.save(directory / f"{stem}.heat.wsst", heatmaps.maps)
    for s in heatmaps.classes:
        write_pgm(directory / f"{stem}.c{s}.pgm", heatmaps.maps[s])


def save_label_map(labels, directory, stem):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    wsst.save(directory / f"{stem}.lbl.wsst", np.asarray(labels).astype(np.uint8))
    write_ppm(directory / f"{stem}.ppm", labels)
