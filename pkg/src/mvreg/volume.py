"""CT volumes, the ``.vol`` file format, and procedural head phantoms."""

from dataclasses import dataclass, field

import numpy as np

from ._container import read_container, write_container
from .errors import ValidationError

HU_MIN = -1024.0
HU_MAX = 4000.0
HU_AIR = -1000.0

VOLUME_MAGIC = "MVREGVOL 1"


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Scalar HU grid with physical spacing.

    ``data`` has shape ``(nz, ny, nx)`` so that its C-order ravel is
    x-fastest.  ``origin`` is the world position (mm) of voxel (0, 0, 0).
    """

    dims: tuple
    spacing: tuple
    origin: tuple
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or min(dims) < 1:
            raise ValidationError(f"dims must be three counts >= 1, got {self.dims}")
        if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
            raise ValidationError(f"spacing must be three positive values, got {self.spacing}")
        if len(origin) != 3 or not all(np.isfinite(o) for o in origin):
            raise ValidationError(f"origin must be three finite values, got {self.origin}")
        data = np.asarray(self.data, dtype=np.float32)
        nx, ny, nz = dims
        if data.size != nx * ny * nz:
            raise ValidationError(f"data holds {data.size} values, dims require {nx * ny * nz}")
        data = data.reshape(nz, ny, nx)
        if not np.all(np.isfinite(data)):
            raise ValidationError("volume contains non-finite values")
        if data.min() < HU_MIN or data.max() > HU_MAX:
            raise ValidationError(
                f"HU values must lie in [{HU_MIN:g}, {HU_MAX:g}], got [{data.min():g}, {data.max():g}]"
            )
        data.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "data", data)

    def __eq__(self, other):
        if not isinstance(other, Volume3D):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.origin == other.origin
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None

    def axis_coords(self, axis):
        """World coordinates (mm) of voxel centers along ``axis`` (0=x, 1=y, 2=z)."""
        return self.origin[axis] + self.spacing[axis] * np.arange(self.dims[axis])


def centered_origin(dims, spacing):
    """Origin that puts the volume center on the isocenter."""
    return tuple(-0.5 * (n - 1) * s for n, s in zip(dims, spacing))


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple
    semi_axes: tuple
    hu: float


@dataclass(frozen=True)
class PhantomSpec:
    seed: int
    ellipsoids: tuple
    noise_hu: float = 0.0

    def validate(self):
        if len(self.ellipsoids) == 0:
            raise ValidationError("phantom needs at least one ellipsoid")
        for e in self.ellipsoids:
            if len(e.center) != 3 or len(e.semi_axes) != 3:
                raise ValidationError(f"ellipsoid needs 3D center and semi-axes: {e}")
            if min(e.semi_axes) <= 0:
                raise ValidationError(f"semi-axes must be positive: {e.semi_axes}")
            if not HU_MIN <= e.hu <= HU_MAX:
                raise ValidationError(f"ellipsoid HU {e.hu} outside [{HU_MIN}, {HU_MAX}]")
        if not (self.noise_hu >= 0 and np.isfinite(self.noise_hu)):
            raise ValidationError(f"noise_hu must be >= 0, got {self.noise_hu}")


def generate_phantom(spec, dims, spacing, origin=None):
    """Rasterize ``spec`` onto a grid.  Later ellipsoids override earlier ones."""
    spec.validate()
    dims = tuple(int(n) for n in dims)
    spacing = tuple(float(s) for s in spacing)
    if origin is None:
        origin = centered_origin(dims, spacing)
    nx, ny, nz = dims
    x = origin[0] + spacing[0] * np.arange(nx)
    y = origin[1] + spacing[1] * np.arange(ny)
    z = origin[2] + spacing[2] * np.arange(nz)
    zz, yy, xx = np.meshgrid(z, y, x, indexing="ij")
    data = np.full((nz, ny, nx), HU_AIR, dtype=np.float64)
    for e in spec.ellipsoids:
        (cx, cy, cz), (ax, ay, az) = e.center, e.semi_axes
        inside = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 + ((zz - cz) / az) ** 2 <= 1.0
        data[inside] = e.hu
    if spec.noise_hu > 0:
        rng = np.random.default_rng(spec.seed)
        data += rng.normal(0.0, spec.noise_hu, size=data.shape)
    np.clip(data, HU_MIN, HU_MAX, out=data)
    return Volume3D(dims, spacing, origin, data.astype(np.float32))


def head_phantom_spec(
    seed, noise_hu=10.0, blobs=(6, 10), blob_hu=(40.0, 400.0), cavities=2, blob_axes=(8.0, 26.0)
):
    """Randomized head: skull shell, brain, internal ellipsoids, air cavities.

    ``blobs`` is the inclusive range of internal ellipsoid counts, each with an
    HU value drawn from ``blob_hu``.  Dimensions assume a roughly 26 cm field
    of view centered on the isocenter.  ``blobs=(2, 4), blob_hu=(40, 120),
    cavities=1`` gives a sparser head.
    """
    rng = np.random.default_rng(seed)
    scale = rng.uniform(0.9, 1.1)
    outer = np.array([72.0, 90.0, 95.0]) * scale * rng.uniform(0.95, 1.05, size=3)
    thickness = rng.uniform(6.0, 9.0)
    off = rng.uniform(-4.0, 4.0, size=3)
    ellipsoids = [
        Ellipsoid(tuple(off), tuple(outer), 900.0),
        Ellipsoid(tuple(off), tuple(outer - thickness), 40.0),
    ]
    for _ in range(int(rng.integers(blobs[0], blobs[1] + 1))):
        center = off + rng.uniform([-40.0, -50.0, -40.0], [40.0, 50.0, 40.0])
        axes = rng.uniform(blob_axes[0], blob_axes[1], size=3)
        ellipsoids.append(Ellipsoid(tuple(center), tuple(axes), float(rng.uniform(*blob_hu))))
    for _ in range(cavities):
        cavity_center = off + rng.uniform([-25.0, -60.0, -30.0], [25.0, -30.0, 10.0])
        cavity_axes = rng.uniform(8.0, 18.0, size=3)
        ellipsoids.append(Ellipsoid(tuple(cavity_center), tuple(cavity_axes), HU_AIR))
    return PhantomSpec(seed=int(seed), ellipsoids=tuple(ellipsoids), noise_hu=float(noise_hu))


def translate_volume(volume, shift_mm):
    """Resample ``volume`` rigidly translated by ``shift_mm`` = (dx, dy, dz).

    Trilinear interpolation; regions moved in from outside read as air.
    """
    from scipy.ndimage import shift as nd_shift

    voxel_shift = [shift_mm[2] / volume.spacing[2], shift_mm[1] / volume.spacing[1], shift_mm[0] / volume.spacing[0]]
    moved = nd_shift(volume.data.astype(np.float64), voxel_shift, order=1, mode="constant", cval=HU_AIR)
    return Volume3D(volume.dims, volume.spacing, volume.origin, np.clip(moved, HU_MIN, HU_MAX).astype(np.float32))


def save_volume(volume, path):
    header = {"dims": list(volume.dims), "spacing": list(volume.spacing), "origin": list(volume.origin)}
    write_container(path, VOLUME_MAGIC, header, volume.data.ravel())


def load_volume(path):
    header, values = read_container(path, VOLUME_MAGIC, lambda h: int(np.prod([int(n) for n in h["dims"]])))
    return Volume3D(tuple(header["dims"]), tuple(header["spacing"]), tuple(header["origin"]), values)
