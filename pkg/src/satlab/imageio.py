"""Binary PPM (P6) / PGM (P5) writers and readers, maxval 255."""

import numpy as np


def to_bytes_rgb(image):
    """[-1, 1] floats -> uint8 via clamp(round(255 * (v + 1) / 2))."""
    v = np.rint(255.0 * (np.asarray(image, dtype=np.float64) + 1.0) / 2.0)
    return np.clip(v, 0, 255).astype(np.uint8)


def to_bytes_gray(image):
    """[0, 1] floats -> uint8."""
    v = np.rint(255.0 * np.asarray(image, dtype=np.float64))
    return np.clip(v, 0, 255).astype(np.uint8)


def _write(path, magic, pixels):
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"%s\n%d %d\n255\n" % (magic, w, h))
        fh.write(np.ascontiguousarray(pixels).tobytes())


def write_ppm(path, image):
    """Write an (H, W, 3) image with values in [-1, 1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"PPM needs (H, W, 3), got {image.shape}")
    _write(path, b"P6", to_bytes_rgb(image))


def write_ppm_unit(path, image):
    """Write an (H, W, 3) image with values already in [0, 1]."""
    _write(path, b"P6", to_bytes_gray(image))


def write_pgm(path, image):
    """Write an (H, W) map with values in [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"PGM needs (H, W), got {image.shape}")
    _write(path, b"P5", to_bytes_gray(image))


def read_pnm(path):
    """Return the uint8 pixel array of a P5/P6 file."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    pos += 1
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError("only maxval 255 is supported")
    channels = {b"P5": 1, b"P6": 3}.get(magic)
    if channels is None:
        raise ValueError(f"unknown PNM magic {magic!r}")
    pix = np.frombuffer(data[pos:pos + w * h * channels], dtype=np.uint8)
    return pix.reshape(h, w, channels) if channels == 3 else pix.reshape(h, w)
