"""Binary PPM/PGM image files plus optional PNG via Pillow.

Float images are (3, H, W) in [0, 1]; masks are (H, W) in [0, 1]. Byte
quantization is round-half-away handled by numpy rounding, so writing the
same array twice produces identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _to_bytes(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got {img.shape}")
    _, h, w = img.shape
    data = _to_bytes(img).transpose(1, 2, 0).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data)


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected (H, W) image, got {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_to_bytes(img).tobytes())


def _read_pnm_header(fh):
    def token():
        t = b""
        while True:
            ch = fh.read(1)
            if not ch:
                raise ValueError("truncated PNM header")
            if ch == b"#":
                while ch not in (b"\n", b""):
                    ch = fh.read(1)
                continue
            if ch.isspace():
                if t:
                    return t
                continue
            t += ch

    magic = token()
    w, h, maxval = int(token()), int(token()), int(token())
    if maxval != 255:
        raise ValueError(f"only maxval 255 supported, got {maxval}")
    return magic, w, h


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, w, h = _read_pnm_header(fh)
        if magic != b"P6":
            raise ValueError(f"not a binary PPM: magic {magic!r}")
        raw = np.frombuffer(fh.read(w * h * 3), dtype=np.uint8)
    if raw.size != w * h * 3:
        raise ValueError("truncated PPM payload")
    return raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, w, h = _read_pnm_header(fh)
        if magic != b"P5":
            raise ValueError(f"not a binary PGM: magic {magic!r}")
        raw = np.frombuffer(fh.read(w * h), dtype=np.uint8)
    if raw.size != w * h:
        raise ValueError("truncated PGM payload")
    return raw.reshape(h, w).astype(np.float64) / 255.0


def write_png(path, img: np.ndarray) -> None:
    from PIL import Image

    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        Image.fromarray(_to_bytes(img), mode="L").save(path)
    elif img.ndim == 3 and img.shape[0] == 3:
        Image.fromarray(_to_bytes(img).transpose(1, 2, 0), mode="RGB").save(path)
    else:
        raise ValueError(f"expected (H, W) or (3, H, W) image, got {img.shape}")


def write_image(path, img: np.ndarray) -> None:
    """Dispatch on suffix: .ppm/.pgm native, .png via Pillow."""
    suffix = Path(path).suffix.lower()
    if suffix == ".ppm":
        write_ppm(path, img)
    elif suffix == ".pgm":
        write_pgm(path, img)
    elif suffix == ".png":
        write_png(path, img)
    else:
        raise ValueError(f"unsupported image suffix {suffix!r}")


def read_mask(path) -> np.ndarray:
    """Grayscale mask in [0, 1] from PGM, PPM (averaged), or PNG."""
    suffix = Path(path).suffix.lower()
    if suffix == ".pgm":
        return read_pgm(path)
    if suffix == ".ppm":
        return read_ppm(path).mean(axis=0)
    if suffix == ".png":
        from PIL import Image

        arr = np.asarray(Image.open(path).convert("L"), dtype=np.float64)
        return arr / 255.0
    raise ValueError(f"unsupported mask suffix {suffix!r}")
