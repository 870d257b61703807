"""2D images: DRRs, simulated MV images, difference images."""

from dataclasses import dataclass, field

import numpy as np

from ._container import read_container, write_container
from .errors import DimensionMismatchError, ValidationError

IMAGE_MAGIC = "MVREGIMG 1"


@dataclass(frozen=True, eq=False)
class Image2D:
    """Float32 image; ``data`` has shape ``(nv, nu)`` (rows = longitudinal).

    ``spacing`` is ``(du, dv)`` in mm per pixel, measured at the isocenter.
    """

    data: np.ndarray = field(repr=False)
    spacing: tuple = (1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 2 or min(data.shape) < 1:
            raise ValidationError(f"image data must be a nonempty 2D array, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 2 or min(spacing) <= 0:
            raise ValidationError(f"spacing must be two positive values, got {self.spacing}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self):
        """``(nu, nv)``: columns, rows."""
        return (self.data.shape[1], self.data.shape[0])

    def __eq__(self, other):
        if not isinstance(other, Image2D):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.data, other.data)

    __hash__ = None


def check_same_dims(a, b):
    if a.data.shape != b.data.shape:
        raise DimensionMismatchError(f"image dims differ: {a.dims} vs {b.dims}")


def center_crop(img, side_px):
    """Centered ``side_px`` x ``side_px`` crop."""
    nv, nu = img.data.shape
    if side_px > nu or side_px > nv or side_px < 1:
        raise ValidationError(f"crop of {side_px} px does not fit a {nu}x{nv} image")
    r0 = (nv - side_px) // 2
    c0 = (nu - side_px) // 2
    return Image2D(img.data[r0 : r0 + side_px, c0 : c0 + side_px], img.spacing)


def shift_image(img, drow, dcol, fill=None):
    """Integer-pixel translation; vacated pixels take ``fill`` (default: edge mean)."""
    src = img.data
    if fill is None:
        fill = float(np.mean(np.concatenate([src[0], src[-1], src[:, 0], src[:, -1]])))
    out = np.full_like(src, fill)
    nv, nu = src.shape
    rs, rd = (slice(0, nv - drow), slice(drow, nv)) if drow >= 0 else (slice(-drow, nv), slice(0, nv + drow))
    cs, cd = (slice(0, nu - dcol), slice(dcol, nu)) if dcol >= 0 else (slice(-dcol, nu), slice(0, nu + dcol))
    out[rd, cd] = src[rs, cs]
    return Image2D(out, img.spacing)


def save_image(img, path):
    header = {"dims": list(img.dims), "spacing": list(img.spacing)}
    write_container(path, IMAGE_MAGIC, header, img.data.ravel())


def load_image(path):
    header, values = read_container(path, IMAGE_MAGIC, lambda h: int(h["dims"][0]) * int(h["dims"][1]))
    nu, nv = (int(n) for n in header["dims"])
    return Image2D(values.reshape(nv, nu), tuple(header["spacing"]))


def export_pgm(img, path):
    """Write a 16-bit binary PGM, min-max normalized to 0..65535."""
    data = img.data.astype(np.float64)
    lo, hi = float(data.min()), float(data.max())
    scaled = np.zeros_like(data) if hi <= lo else (data - lo) / (hi - lo)
    pixels = np.round(scaled * 65535.0).astype(">u2")
    nv, nu = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{nu} {nv}\n65535\n".encode("ascii"))
        fh.write(pixels.tobytes())
