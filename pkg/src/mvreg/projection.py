"""Divergent-beam DRR rendering of a translated CT volume.

The beam runs along +y: the source sits at ``(0, -source_to_axis, 0)`` and the
detector plane at ``y = source_to_detector - source_to_axis``.  Detector
columns follow x (lateral), rows follow z (longitudinal).
"""

from dataclasses import dataclass, replace

import numba
import numpy as np

from .errors import ValidationError
from .image import Image2D

MU_WATER = 0.02  # 1/mm


@dataclass(frozen=True)
class ProjectionGeometry:
    source_to_axis_mm: float = 1000.0
    source_to_detector_mm: float = 1500.0
    detector_dims: tuple = (384, 384)
    detector_spacing: tuple = (0.75, 0.75)

    def validate(self):
        if not 0 < self.source_to_axis_mm < self.source_to_detector_mm:
            raise ValidationError(
                "need 0 < source_to_axis_mm < source_to_detector_mm, got "
                f"{self.source_to_axis_mm}, {self.source_to_detector_mm}"
            )
        if len(self.detector_dims) != 2 or min(self.detector_dims) < 1:
            raise ValidationError(f"detector dims must be >= 1, got {self.detector_dims}")
        if len(self.detector_spacing) != 2 or min(self.detector_spacing) <= 0:
            raise ValidationError(f"detector spacing must be > 0, got {self.detector_spacing}")

    @property
    def magnification(self):
        return self.source_to_detector_mm / self.source_to_axis_mm

    @property
    def pixel_spacing_mm(self):
        """Pixel spacing projected back to the isocenter plane."""
        m = self.magnification
        return (self.detector_spacing[0] / m, self.detector_spacing[1] / m)

    def roi_pixels(self, roi_mm):
        """Side in pixels of a centered ``roi_mm`` square, rounded down to a multiple of 4."""
        side = int(np.floor(roi_mm / min(self.pixel_spacing_mm) + 1e-9))
        return side - side % 4

    def cropped(self, side_px):
        """Centered sub-detector; keeps pixel centers of the full detector."""
        nu, nv = self.detector_dims
        if side_px > min(nu, nv) or side_px < 1:
            raise ValidationError(f"crop of {side_px} px does not fit detector {nu}x{nv}")
        if (nu - side_px) % 2 or (nv - side_px) % 2:
            raise ValidationError(f"crop of {side_px} px is not centered on detector {nu}x{nv}")
        return replace(self, detector_dims=(side_px, side_px))


@dataclass(frozen=True)
class Displacement2D:
    lateral_mm: float = 0.0
    longitudinal_mm: float = 0.0

    def __post_init__(self):
        lat, lon = float(self.lateral_mm), float(self.longitudinal_mm)
        if not (np.isfinite(lat) and np.isfinite(lon)):
            raise ValidationError(f"displacement must be finite, got ({lat}, {lon})")
        object.__setattr__(self, "lateral_mm", lat)
        object.__setattr__(self, "longitudinal_mm", lon)

    def __add__(self, other):
        return Displacement2D(self.lateral_mm + other.lateral_mm, self.longitudinal_mm + other.longitudinal_mm)

    def as_array(self):
        return np.array([self.lateral_mm, self.longitudinal_mm])

    @classmethod
    def from_array(cls, values):
        return cls(float(values[0]), float(values[1]))


def hu_to_mu(hu, mu_water=MU_WATER):
    """Linear attenuation (1/mm) from Hounsfield units, clamped at zero."""
    return np.maximum(0.0, mu_water * (1.0 + np.asarray(hu, dtype=np.float64) / 1000.0))


@numba.njit(cache=True)
def _sweep(planes, plane_y, us, vs, sad, sdd, shift_x, shift_z, ox, oz, sx, sz, out):
    # planes is zero-padded by one voxel in x and z; sample index 0 is the pad.
    n_planes, nzp, nxp = planes.shape
    nv = vs.shape[0]
    nu = us.shape[0]
    ix = np.empty(nu, dtype=np.int64)
    wx = np.empty(nu)
    row = np.empty(nxp)
    for m in range(n_planes):
        t = (plane_y[m] + sad) / sdd
        for i in range(nu):
            f = (t * us[i] - shift_x - ox) / sx + 1.0
            if f <= 0.0 or f >= nxp - 1:
                ix[i] = -1
                wx[i] = 0.0
            else:
                k = int(f)
                ix[i] = k
                wx[i] = f - k
        for j in range(nv):
            f = (t * vs[j] - shift_z - oz) / sz + 1.0
            if f <= 0.0 or f >= nzp - 1:
                continue
            kz = int(f)
            wz = f - kz
            for c in range(nxp):
                row[c] = (1.0 - wz) * planes[m, kz, c] + wz * planes[m, kz + 1, c]
            for i in range(nu):
                k = ix[i]
                if k >= 0:
                    out[j, i] += (1.0 - wx[i]) * row[k] + wx[i] * row[k + 1]


class Projector:
    """Renders DRRs of one volume; attenuation planes are prepared once.

    Rays are sampled on planes perpendicular to the beam axis, spaced
    ``step_mm`` apart (default: half the smallest voxel spacing), with
    trilinear interpolation at each crossing.  Space outside the volume is air.
    """

    def __init__(self, volume, geometry, mu_water=MU_WATER, step_mm=None):
        geometry.validate()
        if not mu_water > 0:
            raise ValidationError(f"mu_water must be > 0, got {mu_water}")
        self.volume = volume
        self.geometry = geometry
        self.mu_water = float(mu_water)
        self.step_mm = float(step_mm) if step_mm is not None else 0.5 * min(volume.spacing)
        if not self.step_mm > 0:
            raise ValidationError(f"step_mm must be > 0, got {step_mm}")
        self._planes, self._plane_y = self._prepare_planes()
        nu, nv = geometry.detector_dims
        du, dv = geometry.detector_spacing
        self._us = (np.arange(nu) - 0.5 * (nu - 1)) * du
        self._vs = (np.arange(nv) - 0.5 * (nv - 1)) * dv
        sdd = geometry.source_to_detector_mm
        uu, vv = np.meshgrid(self._us, self._vs)
        # path length per unit advance along the beam axis
        self._path_scale = self.step_mm * np.sqrt(uu**2 + vv**2 + sdd**2) / sdd

    def _prepare_planes(self):
        v = self.volume
        mu = hu_to_mu(v.data, self.mu_water)  # (nz, ny, nx)
        nz, ny, nx = mu.shape
        sy = v.spacing[1]
        n_planes = int(np.floor((ny - 1) * sy / self.step_mm + 1e-9)) + 1
        fy = np.arange(n_planes) * self.step_mm / sy
        iy = np.minimum(np.floor(fy).astype(int), max(ny - 2, 0))
        wy = fy - iy
        planes = np.zeros((n_planes, nz + 2, nx + 2))
        lo = mu[:, iy, :].transpose(1, 0, 2)
        if ny > 1:
            hi = mu[:, iy + 1, :].transpose(1, 0, 2)
            planes[:, 1:-1, 1:-1] = (1.0 - wy)[:, None, None] * lo + wy[:, None, None] * hi
        else:
            planes[:, 1:-1, 1:-1] = lo
        return planes, v.origin[1] + np.arange(n_planes) * self.step_mm

    def render(self, displacement=None):
        d = displacement if displacement is not None else Displacement2D()
        g = self.geometry
        v = self.volume
        nu, nv = g.detector_dims
        out = np.zeros((nv, nu))
        _sweep(
            self._planes,
            self._plane_y,
            self._us,
            self._vs,
            g.source_to_axis_mm,
            g.source_to_detector_mm,
            d.lateral_mm,
            d.longitudinal_mm,
            v.origin[0],
            v.origin[2],
            v.spacing[0],
            v.spacing[2],
            out,
        )
        out *= self._path_scale
        return Image2D(out, g.pixel_spacing_mm)


def render_drr(volume, geometry, displacement=None, mu_water=MU_WATER, step_mm=None):
    """Line-integral image of ``volume`` translated by ``displacement``.

    The translation moves the volume by +lateral along x and +longitudinal
    along z.  For repeated renders of one volume, build a :class:`Projector`.
    """
    return Projector(volume, geometry, mu_water=mu_water, step_mm=step_mm).render(displacement)
