"""Binary PPM/PGM image files.

P6 (8-bit RGB) carries color images, P5 carries grayscale: maxval 255 for
8-bit visualization dumps and maxval 65535 (big-endian samples, per the
netpbm convention) for depth maps, where 65535 maps to depth 1.0.  Values
are scaled to [0, 1] in memory; write->read->write round-trips are
byte-identical.  Malformed headers raise ImageFormatError with the byte
offset of the defect.
"""

from __future__ import annotations

import numpy as np

from .errors import ImageFormatError, ShapeError


def _quantize(values: np.ndarray, maxval: int) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * maxval), 0, maxval)


def write_ppm(path, img: np.ndarray):
    """8-bit binary P6 from an (H, W, 3) float image in [0, 1]."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"write_ppm expects (H, W, 3), got {img.shape}")
    h, w = img.shape[:2]
    data = _quantize(img, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_pgm(path, plane: np.ndarray, maxval: int = 255):
    """Binary P5 from an (H, W) float plane in [0, 1]; 16-bit is big-endian."""
    plane = np.asarray(plane)
    if plane.ndim != 2:
        raise ShapeError(f"write_pgm expects (H, W), got {plane.shape}")
    if maxval not in (255, 65535):
        raise ShapeError(f"maxval must be 255 or 65535, got {maxval}")
    h, w = plane.shape
    q = _quantize(plane, maxval)
    raster = q.astype(np.uint8).tobytes() if maxval == 255 else q.astype(">u2").tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(raster)


class _Header:
    """Whitespace/comment-aware tokenizer that remembers byte offsets."""

    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def fail(self, message: str):
        raise ImageFormatError(f"{self.path}: {message}", offset=self.pos)

    def token(self) -> bytes:
        data = self.data
        n = len(data)
        while self.pos < n:
            c = data[self.pos : self.pos + 1]
            if c == b"#":
                while self.pos < n and data[self.pos : self.pos + 1] not in (b"\n", b"\r"):
                    self.pos += 1
            elif c.isspace():
                self.pos += 1
            else:
                break
        if self.pos >= n:
            self.fail("unexpected end of header")
        start = self.pos
        while self.pos < n and not data[self.pos : self.pos + 1].isspace():
            self.pos += 1
        return data[start : self.pos]

    def int_token(self, what: str) -> int:
        tok = self.token()
        try:
            return int(tok)
        except ValueError:
            self.pos -= len(tok)
            self.fail(f"expected integer {what}, got {tok[:16]!r}")

    def raster(self, nbytes: int) -> bytes:
        # exactly one whitespace byte separates maxval from the raster
        if self.pos >= len(self.data) or not self.data[self.pos : self.pos + 1].isspace():
            self.fail("expected single whitespace before raster")
        self.pos += 1
        chunk = self.data[self.pos : self.pos + nbytes]
        if len(chunk) != nbytes:
            self.pos = len(self.data)
            self.fail(f"raster truncated: need {nbytes} bytes, have {len(chunk)}")
        return chunk


def _read(path) -> tuple[str, int, int, int, bytes]:
    with open(path, "rb") as fh:
        data = fh.read()
    hd = _Header(data, path)
    magic = hd.token()
    if magic not in (b"P5", b"P6"):
        hd.pos = 0
        hd.fail(f"bad magic {magic[:4]!r}, expected P5 or P6")
    width = hd.int_token("width")
    height = hd.int_token("height")
    maxval = hd.int_token("maxval")
    if width <= 0 or height <= 0:
        hd.fail(f"non-positive dimensions {width}x{height}")
    if maxval not in (255, 65535):
        hd.fail(f"unsupported maxval {maxval}")
    per = (3 if magic == b"P6" else 1) * (1 if maxval == 255 else 2)
    raster = hd.raster(width * height * per)
    return magic.decode(), width, height, maxval, raster


def read_ppm(path) -> np.ndarray:
    """(H, W, 3) float64 in [0, 1] from a binary P6 file."""
    magic, w, h, maxval, raster = _read(path)
    if magic != "P6":
        raise ImageFormatError(f"{path}: expected P6 color image, got {magic}", offset=0)
    dt = np.uint8 if maxval == 255 else np.dtype(">u2")
    arr = np.frombuffer(raster, dtype=dt).reshape(h, w, 3)
    return arr.astype(np.float64) / maxval


def read_pgm(path) -> np.ndarray:
    """(H, W) float64 in [0, 1] from a binary P5 file (8- or 16-bit)."""
    magic, w, h, maxval, raster = _read(path)
    if magic != "P5":
        raise ImageFormatError(f"{path}: expected P5 grayscale image, got {magic}", offset=0)
    dt = np.uint8 if maxval == 255 else np.dtype(">u2")
    arr = np.frombuffer(raster, dtype=dt).reshape(h, w)
    return arr.astype(np.float64) / maxval
