"""Binary model checkpoints.

Layout: magic "GNGO", one version byte, a little-endian u32 header length,
a UTF-8 JSON header {kind, scale, fingerprint, manifest}, then the raw
parameter payload: float32 little-endian arrays, row-major, concatenated in
manifest order (batch-norm running stats included).  The fingerprint pins
the architecture (kind, scale, tensor names/shapes), not the values, so a
checkpoint refuses to load into a mismatched model unless forced.
"""

import hashlib
import json

import numpy as np

MAGIC = b"GNGO"
VERSION = 1


class FormatError(ValueError):
    """Not a checkpoint, or a damaged one."""


class MismatchError(ValueError):
    """Checkpoint and target model disagree on architecture."""


def model_kind(model) -> str:
    from .gan import Discriminator, Generator
    from .inversion import InverseGenerator
    from .scoring import FcHead

    # InverseGenerator shares the Discriminator body; test it first
    for cls, kind in ((InverseGenerator, "inv"), (Generator, "gen"),
                      (Discriminator, "dis"), (FcHead, "fc")):
        if isinstance(model, cls):
            return kind
    raise TypeError(f"cannot checkpoint a {type(model).__name__}")


def _manifest(model):
    return [{"name": name, "dtype": "float32", "shape": list(arr.shape)}
            for name, arr in model.state().items()]


def architecture_fingerprint(model) -> str:
    basis = {"kind": model_kind(model), "scale": model.spec.name,
             "manifest": _manifest(model)}
    return hashlib.sha256(json.dumps(basis, sort_keys=True).encode()).hexdigest()


def save_checkpoint(model, path):
    state = model.state()
    for name, arr in state.items():
        if arr.dtype != np.float32:
            raise FormatError(f"{name}: checkpoint payload must be float32, "
                              f"got {arr.dtype}")
    header = {
        "kind": model_kind(model),
        "scale": model.spec.name,
        "fingerprint": architecture_fingerprint(model),
        "manifest": _manifest(model),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([VERSION]))
        fh.write(np.uint32(len(blob)).tobytes())
        fh.write(blob)
        for arr in state.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def _read_header(fh, path):
    magic = fh.read(4)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version = fh.read(1)
    if not version or version[0] != VERSION:
        raise FormatError(f"{path}: unsupported version {version!r}")
    raw_len = fh.read(4)
    if len(raw_len) < 4:
        raise FormatError(f"{path}: truncated header length")
    (hlen,) = np.frombuffer(raw_len, dtype="<u4")
    blob = fh.read(int(hlen))
    if len(blob) != hlen:
        raise FormatError(f"{path}: truncated header ({len(blob)} of {hlen} bytes)")
    try:
        return json.loads(blob.decode())
    except ValueError as e:
        raise FormatError(f"{path}: unreadable header: {e}") from None


def peek_checkpoint(path) -> dict:
    """Header only; enough to construct the right model before loading."""
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def load_checkpoint(model, path, force=False):
    """Fill `model` from a checkpoint; bitwise-exact round trip.

    The stored architecture fingerprint must match the target model unless
    `force` is given (shapes are still enforced either way).
    """
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        payload = fh.read()
    want = architecture_fingerprint(model)
    if header["fingerprint"] != want and not force:
        raise MismatchError(
            f"{path}: checkpoint is a {header['kind']} at scale "
            f"{header['scale']}; target model is a {model_kind(model)} at "
            f"scale {model.spec.name} (pass force to override)")
    expected = sum(int(np.prod(row["shape"])) for row in header["manifest"]) * 4
    if len(payload) != expected:
        raise FormatError(f"{path}: expected {expected} payload bytes, "
                          f"got {len(payload)}")
    arrays = {}
    pos = 0
    for row in header["manifest"]:
        n = int(np.prod(row["shape"]))
        arrays[row["name"]] = np.frombuffer(
            payload, dtype="<f4", count=n, offset=pos).reshape(row["shape"]).copy()
        pos += n * 4
    model.load_state(arrays)
    return model
