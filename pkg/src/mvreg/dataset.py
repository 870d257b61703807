"""Training and test sets built with controlled displacements.

Test set: for each test volume, the full Cartesian grid of lateral x
longitudinal shifts drawn from ``test_shift_values_mm``.  Training set: per
volume, samples with one axis fixed at zero plus samples with both axes
nonzero, all uniform on ``train_range_mm``; each sample is stored as the
preprocessed 16-channel tensor and its target displacement.
"""

import itertools
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from ._container import read_container, write_container
from .errors import MalformedHeaderError, ValidationError
from .image import Image2D, save_image
from .mv_sim import MvSimConfig
from .projection import Displacement2D, ProjectionGeometry
from .registration import RegistrationCase, imaging_chain, preprocess
from .seeding import derive_seed
from .volume import generate_phantom, head_phantom_spec

DATASET_MAGIC = "MVREGDS 1"
MIN_ABS_SHIFT_MM = 0.01


@dataclass(frozen=True)
class DatasetSpec:
    train_phantoms: tuple = (0, 1)
    test_phantoms: tuple = (2, 3)
    test_shift_values_mm: tuple = (-20.0, -10.0, -5.0, 5.0, 10.0, 20.0)
    train_range_mm: tuple = (-20.0, 20.0)
    per_ct_axis_zero: int = 100
    per_ct_nonzero: int = 300
    seed: int = 0

    def validate(self):
        values = sorted(float(v) for v in self.test_shift_values_mm)
        if not values or any(v == 0 for v in values):
            raise ValidationError("test shift values must be nonzero")
        if values != sorted(-v for v in values):
            raise ValidationError(f"test shift values must be symmetric, got {values}")
        lo, hi = self.train_range_mm
        if not lo < hi:
            raise ValidationError(f"train range must be increasing, got {self.train_range_mm}")
        if values[0] < lo or values[-1] > hi:
            raise ValidationError(f"train range {self.train_range_mm} must contain all test shifts")
        if self.per_ct_axis_zero < 0 or self.per_ct_nonzero < 0:
            raise ValidationError("per-volume sample counts must be >= 0")
        if set(self.train_phantoms) & set(self.test_phantoms):
            raise ValidationError("train and test phantom lists must be disjoint")

    @property
    def samples_per_volume(self):
        return 2 * self.per_ct_axis_zero + self.per_ct_nonzero


@dataclass(frozen=True)
class VolumeConfig:
    dims: tuple = (128, 128, 128)
    spacing_mm: tuple = (2.0, 2.0, 2.0)
    noise_hu: float = 10.0


def make_volumes(phantom_seeds, volume_cfg=VolumeConfig()):
    return [
        generate_phantom(head_phantom_spec(s, volume_cfg.noise_hu), volume_cfg.dims, volume_cfg.spacing_mm)
        for s in phantom_seeds
    ]


def shift_grid(spec):
    values = [float(v) for v in spec.test_shift_values_mm]
    return [Displacement2D(a, b) for a, b in itertools.product(values, values)]


def _uniform_nonzero(rng, lo, hi, size):
    out = rng.uniform(lo, hi, size=size)
    bad = np.abs(out) < MIN_ABS_SHIFT_MM
    while np.any(bad):
        out[bad] = rng.uniform(lo, hi, size=int(bad.sum()))
        bad = np.abs(out) < MIN_ABS_SHIFT_MM
    return out


def training_shifts(spec, volume_index):
    """Displacements for one training volume: lateral-zero, longitudinal-zero, then both nonzero."""
    rng = np.random.default_rng(derive_seed(spec.seed, "dataset.train_shifts", volume_index))
    lo, hi = spec.train_range_mm
    k = spec.per_ct_axis_zero
    lat_zero = np.column_stack([np.zeros(k), _uniform_nonzero(rng, lo, hi, k)])
    lon_zero = np.column_stack([_uniform_nonzero(rng, lo, hi, k), np.zeros(k)])
    both = _uniform_nonzero(rng, lo, hi, (spec.per_ct_nonzero, 2))
    return np.concatenate([lat_zero, lon_zero, both]).reshape(-1, 2)


def generate_test_set(spec, volumes, geometry, mv_cfg=MvSimConfig(), roi_mm=100.0, first_volume_index=0):
    """36 cases per test volume (with the default six shift values)."""
    spec.validate()
    if len(volumes) == 0:
        raise ValidationError("need at least one test volume")
    cases = []
    for vi, volume in enumerate(volumes, start=first_volume_index):
        chain = imaging_chain(volume, geometry, mv_cfg, roi_mm)
        for ci, gold in enumerate(shift_grid(spec)):
            seed = derive_seed(spec.seed, "dataset.test_noise", vi, ci)
            cases.append(
                RegistrationCase(volume, geometry, chain.test_image(gold, seed), gold, Displacement2D(), f"v{vi:02d}-c{ci:02d}")
            )
    return cases


def generate_training_set(spec, volumes, geometry, mv_cfg=MvSimConfig(), roi_mm=100.0, raw_dir=None):
    """Return ``(inputs, targets)``: float32 arrays of shape (N, 16, h, w) and (N, 2)."""
    spec.validate()
    if len(volumes) == 0:
        raise ValidationError("need at least one training volume")
    inputs, targets = [], []
    for vi, volume in enumerate(volumes):
        chain = imaging_chain(volume, geometry, mv_cfg, roi_mm)
        baseline = chain.rendered_image(Displacement2D())
        for si, (lat, lon) in enumerate(training_shifts(spec, vi)):
            shift = Displacement2D(lat, lon)
            seed = derive_seed(spec.seed, "dataset.train_noise", vi, si)
            test = chain.test_image(shift, seed)
            inputs.append(preprocess(test, baseline, roi_mm))
            targets.append((lat, lon))
            if raw_dir is not None:
                save_image(test, os.path.join(raw_dir, f"train-v{vi:02d}-s{si:04d}.img"))
        if raw_dir is not None:
            save_image(baseline, os.path.join(raw_dir, f"train-v{vi:02d}-baseline.img"))
    return np.stack(inputs).astype(np.float32), np.asarray(targets, dtype=np.float32)


# --- .ds file ---------------------------------------------------------------


@dataclass
class PackedDataset:
    """Records of (tensor, 2-vector target) plus a free-form header."""

    kind: str
    tensors: np.ndarray
    targets: np.ndarray
    header: dict = field(default_factory=dict)


def save_dataset(ds, path):
    n = len(ds.tensors)
    shape = list(ds.tensors.shape[1:])
    header = dict(ds.header)
    header.update({"kind": ds.kind, "count": n, "tensor_shape": shape})
    records = np.concatenate(
        [ds.tensors.reshape(n, -1).astype(np.float32), ds.targets.reshape(n, 2).astype(np.float32)], axis=1
    )
    write_container(path, DATASET_MAGIC, header, records)


def load_dataset(path):
    def count(h):
        return int(h["count"]) * (int(np.prod(h["tensor_shape"])) + 2)

    header, flat = read_container(path, DATASET_MAGIC, count)
    n = int(header["count"])
    shape = tuple(int(s) for s in header["tensor_shape"])
    if "kind" not in header:
        raise MalformedHeaderError(f"{path}: missing dataset kind")
    records = flat.reshape(n, -1)
    size = int(np.prod(shape))
    return PackedDataset(header["kind"], records[:, :size].reshape((n,) + shape), records[:, size:], header)


def pack_test_set(cases, spec, extra_header=None):
    images = np.stack([c.test_image.data[None] for c in cases]) if cases else np.zeros((0, 1, 1, 1), np.float32)
    golds = np.array([[c.gold.lateral_mm, c.gold.longitudinal_mm] for c in cases], dtype=np.float32)
    header = {
        "spec": spec_to_json(spec),
        "case_ids": [c.case_id for c in cases],
        "spacing": list(cases[0].test_image.spacing) if cases else [1.0, 1.0],
    }
    header.update(extra_header or {})
    return PackedDataset("test", images, golds, header)


def unpack_test_set(ds, volumes_by_index, geometry):
    """Rebuild registration cases; case ids ``vNN-cMM`` name the test volume index."""
    if ds.kind != "test":
        raise ValidationError(f"expected a test dataset, got kind {ds.kind!r}")
    cases = []
    spacing = tuple(ds.header.get("spacing", geometry.pixel_spacing_mm))
    for i, case_id in enumerate(ds.header["case_ids"]):
        vi = int(case_id.split("-")[0][1:])
        gold = Displacement2D(float(ds.targets[i, 0]), float(ds.targets[i, 1]))
        img = Image2D(ds.tensors[i, 0], spacing)
        cases.append(RegistrationCase(volumes_by_index[vi], geometry, img, gold, Displacement2D(), case_id))
    return cases


def spec_to_json(spec):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()}


def spec_from_json(obj):
    return DatasetSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()})


PROFILES = {
    "desk": {
        "spec": DatasetSpec(),
        "volume": VolumeConfig(),
        "geometry": ProjectionGeometry(detector_dims=(192, 192), detector_spacing=(1.5, 1.5)),
    },
    "paper": {
        "spec": DatasetSpec(train_phantoms=tuple(range(25)), test_phantoms=tuple(range(25, 50))),
        "volume": VolumeConfig(),
        "geometry": ProjectionGeometry(),
    },
}
