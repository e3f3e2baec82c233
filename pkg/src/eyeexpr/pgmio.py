"""Binary PGM (P5) read/write for 8-bit grayscale eye images."""

from __future__ import annotations

import numpy as np

from .errors import FormatError


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise FormatError(f"PGM expects a 2-D image, got shape {image.shape}")
    if image.dtype != np.uint8:
        raise FormatError(f"PGM writer expects uint8 data, got {image.dtype}")
    h, w = image.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM (missing P5 magic)")
    # Header tokens: magic, width, height, maxval.  Comments (# ...) allowed.
    pos = 2
    tokens: list[int] = []
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        try:
            tokens.append(int(data[start:pos]))
        except ValueError:
            raise FormatError(f"{path}: malformed PGM header token {data[start:pos]!r}") from None
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = tokens
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported, got {maxval}")
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: invalid dimensions {w}x{h}")
    body = data[pos : pos + w * h]
    if len(body) != w * h:
        raise FormatError(f"{path}: truncated pixel data ({len(body)} of {w * h} bytes)")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()
