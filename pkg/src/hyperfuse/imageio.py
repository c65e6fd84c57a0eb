"""Minimal 8-bit RGB image I/O: binary PPM (P6) and PNG, plus box drawing.

The PNG encoder always emits filter type 0; the decoder handles all five
standard filters so externally produced files load too.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

_PNG_SIG = b"\x89PNG\r\n\x1a\n"


def write_ppm(path, img: np.ndarray) -> None:
    img = _as_u8(img)
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).copy()


def _chunk(tag: bytes, body: bytes) -> bytes:
    return (struct.pack(">I", len(body)) + tag + body
            + struct.pack(">I", zlib.crc32(tag + body) & 0xFFFFFFFF))


def write_png(path, img: np.ndarray) -> None:
    img = _as_u8(img)
    h, w, _ = img.shape
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    rows = np.concatenate([np.zeros((h, 1), dtype=np.uint8), img.reshape(h, w * 3)], axis=1)
    idat = zlib.compress(rows.tobytes(), 6)
    with open(path, "wb") as f:
        f.write(_PNG_SIG)
        f.write(_chunk(b"IHDR", ihdr))
        f.write(_chunk(b"IDAT", idat))
        f.write(_chunk(b"IEND", b""))


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def read_png(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(_PNG_SIG):
        raise ValueError(f"{path}: not a PNG file")
    pos = 8
    width = height = None
    colortype = bitdepth = None
    idat = bytearray()
    while pos < len(blob):
        (length,) = struct.unpack(">I", blob[pos:pos + 4])
        tag = blob[pos + 4:pos + 8]
        body = blob[pos + 8:pos + 8 + length]
        pos += 12 + length
        if tag == b"IHDR":
            width, height, bitdepth, colortype, _, _, interlace = struct.unpack(">IIBBBBB", body)
            if bitdepth != 8 or colortype not in (2, 6) or interlace != 0:
                raise ValueError(f"{path}: only 8-bit non-interlaced RGB/RGBA supported")
        elif tag == b"IDAT":
            idat.extend(body)
        elif tag == b"IEND":
            break
    if width is None:
        raise ValueError(f"{path}: missing IHDR")
    bpp = 3 if colortype == 2 else 4
    raw = np.frombuffer(zlib.decompress(bytes(idat)), dtype=np.uint8)
    stride = width * bpp
    raw = raw.reshape(height, stride + 1)
    out = np.zeros((height, stride), dtype=np.uint8)
    for y in range(height):
        ftype = raw[y, 0]
        row = raw[y, 1:].astype(np.int32)
        prior = out[y - 1].astype(np.int32) if y else np.zeros(stride, dtype=np.int32)
        if ftype == 0:
            rec = row
        elif ftype == 2:
            rec = (row + prior) & 0xFF
        else:
            rec = np.zeros(stride, dtype=np.int32)
            for x in range(stride):
                left = rec[x - bpp] if x >= bpp else 0
                up = prior[x]
                ul = int(prior[x - bpp]) if x >= bpp else 0
                if ftype == 1:
                    rec[x] = (row[x] + left) & 0xFF
                elif ftype == 3:
                    rec[x] = (row[x] + (left + up) // 2) & 0xFF
                elif ftype == 4:
                    rec[x] = (row[x] + _paeth(int(left), int(up), ul)) & 0xFF
                else:
                    raise ValueError(f"{path}: unknown PNG filter {ftype}")
        out[y] = rec.astype(np.uint8)
    img = out.reshape(height, width, bpp)
    return img[:, :, :3].copy()


def write_image(path, img: np.ndarray) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".ppm":
        write_ppm(path, img)
    elif suffix == ".png":
        write_png(path, img)
    else:
        raise ValueError(f"unsupported image format: {suffix} (use .ppm or .png)")


def read_image(path) -> np.ndarray:
    suffix = Path(path).suffix.lower()
    if suffix == ".ppm":
        return read_ppm(path)
    if suffix == ".png":
        return read_png(path)
    raise ValueError(f"unsupported image format: {suffix} (use .ppm or .png)")


def _as_u8(img: np.ndarray) -> np.ndarray:
    if img.dtype == np.uint8:
        return np.ascontiguousarray(img)
    raise TypeError(f"expected uint8 HxWx3 image, got dtype {img.dtype}")


def chw_float_to_u8(img: np.ndarray) -> np.ndarray:
    """[3,H,W] floats in [0,1] to HxWx3 uint8."""
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def u8_to_chw_float(img: np.ndarray, dtype=np.float32) -> np.ndarray:
    """HxWx3 uint8 to [3,H,W] floats in [0,1]."""
    return (img.astype(dtype) / dtype(255.0)).transpose(2, 0, 1)


def draw_box(img: np.ndarray, box, color, thickness: int = 2) -> None:
    """Paint a rectangle outline onto an HxWx3 uint8 image, in place."""
    h, w, _ = img.shape
    x1 = int(np.clip(round(box[0]), 0, w - 1))
    y1 = int(np.clip(round(box[1]), 0, h - 1))
    x2 = int(np.clip(round(box[2]), 0, w - 1))
    y2 = int(np.clip(round(box[3]), 0, h - 1))
    col = np.asarray(color, dtype=np.uint8)
    t = thickness
    img[y1:min(y1 + t, h), x1:x2 + 1] = col
    img[max(y2 - t + 1, 0):y2 + 1, x1:x2 + 1] = col
    img[y1:y2 + 1, x1:min(x1 + t, w)] = col
    img[y1:y2 + 1, max(x2 - t + 1, 0):x2 + 1] = col
