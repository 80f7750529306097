"""Binary PPM (P6) and PGM (P5) image files, maxval 255.

Header comments (`#` lines) are accepted on read; PGM can write one on
request (costmap exports state their value convention there).
"""

import numpy as np


def _read_tokens(fh, count):
    toks = []
    while len(toks) < count:
        line = fh.readline()
        if not line:
            raise ValueError("truncated header")
        line = line.split(b"#", 1)[0]
        toks.extend(line.split())
    return toks


def write_ppm(path, image):
    """`image` is float [3,H,W] in [0,1]; stored as 8-bit RGB."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected [3,H,W] image, got {img.shape}")
    byte = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    _, h, w = byte.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(byte.transpose(1, 2, 0).tobytes())


def read_ppm(path):
    """Returns float32 [3,H,W] in [0,1]."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P6":
            raise ValueError(f"{path}: not a binary PPM (P6) file")
        w, h, maxval = map(int, _read_tokens(fh, 3))
        if maxval != 255:
            raise ValueError(f"{path}: unsupported maxval {maxval}")
        raw = fh.read(w * h * 3)
    if len(raw) != w * h * 3:
        raise ValueError(f"{path}: expected {w * h * 3} pixel bytes, got {len(raw)}")
    rgb = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return (rgb.transpose(2, 0, 1).astype(np.float32) / 255.0)


def write_pgm(path, grid, comment=None):
    """`grid` is a uint8 [H,W] array written verbatim."""
    g = np.asarray(grid)
    if g.ndim != 2 or g.dtype != np.uint8:
        raise ValueError(f"expected uint8 [H,W] grid, got {g.dtype} {g.shape}")
    h, w = g.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n")
        if comment:
            if "\n" in comment:
                raise ValueError("PGM comment must be a single line")
            fh.write(b"# " + comment.encode() + b"\n")
        fh.write(b"%d %d\n255\n" % (w, h))
        fh.write(g.tobytes())


def read_pgm(path):
    """Returns uint8 [H,W]."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P5":
            raise ValueError(f"{path}: not a binary PGM (P5) file")
        w, h, maxval = map(int, _read_tokens(fh, 3))
        if maxval != 255:
            raise ValueError(f"{path}: unsupported maxval {maxval}")
        raw = fh.read(w * h)
    if len(raw) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()
