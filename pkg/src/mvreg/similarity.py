"""Image similarity measures: mutual information, cross-correlation, pattern intensity.

All three return larger values for better-aligned images.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, ValidationError, ZeroVarianceError

KINDS = ("mi", "cc", "pi")


@dataclass(frozen=True)
class SimilarityConfig:
    mi_bins: int = 64
    pi_sigma: float = 10.0
    pi_radius_px: int = 3

    def validate(self):
        if self.mi_bins < 2:
            raise ValidationError(f"mi_bins must be >= 2, got {self.mi_bins}")
        if not self.pi_sigma > 0:
            raise ValidationError(f"pi_sigma must be > 0, got {self.pi_sigma}")
        if self.pi_radius_px < 1:
            raise ValidationError(f"pi_radius_px must be >= 1, got {self.pi_radius_px}")


def _pair(a, b):
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _bin_index(x, bins):
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return np.zeros(x.size, dtype=np.int64)
    idx = np.floor((x.ravel() - lo) / (hi - lo) * bins).astype(np.int64)
    return np.minimum(idx, bins - 1)


def mutual_information(a, b, cfg=SimilarityConfig()):
    """MI in bits from an equal-width joint histogram over each image's range."""
    a, b = _pair(a, b)
    bins = cfg.mi_bins
    joint = np.bincount(_bin_index(a, bins) * bins + _bin_index(b, bins), minlength=bins * bins)
    p = joint.reshape(bins, bins) / a.size
    pa = p.sum(axis=1)
    pb = p.sum(axis=0)
    if np.count_nonzero(pa) < 2 or np.count_nonzero(pb) < 2:
        return 0.0  # a constant image carries no information
    nz = p > 0
    mi = float(np.sum(p[nz] * np.log2(p[nz] / np.outer(pa, pb)[nz])))
    return max(mi, 0.0)


def cross_correlation(a, b):
    """Pearson correlation over all pixels."""
    a, b = _pair(a, b)
    da = a - a.mean()
    db = b - b.mean()
    saa = float(np.dot(da.ravel(), da.ravel()))
    sbb = float(np.dot(db.ravel(), db.ravel()))
    if saa == 0.0 or sbb == 0.0:
        raise ZeroVarianceError("cross-correlation of a constant image is undefined")
    cc = float(np.dot(da.ravel(), db.ravel())) / np.sqrt(saa * sbb)
    return min(1.0, max(-1.0, cc))


def neighbor_offsets(radius):
    """Offsets ``(dr, dc)`` with Euclidean length in ``(0, radius]``."""
    r = int(radius)
    return [(dr, dc) for dr in range(-r, r + 1) for dc in range(-r, r + 1) if 0 < dr * dr + dc * dc <= radius * radius]


def _to_255(x):
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return np.zeros_like(x)
    return (x - lo) * (255.0 / (hi - lo))


def pattern_intensity(a, b, cfg=SimilarityConfig()):
    """Sum of sigma^2 / (sigma^2 + (D(v) - D(w))^2) over directed neighbor pairs.

    ``D`` is the difference of the two images after scaling each to [0, 255].
    """
    a, b = _pair(a, b)
    diff = _to_255(a) - _to_255(b)
    s2 = cfg.pi_sigma**2
    nr, nc = diff.shape
    total = 0.0
    for dr, dc in neighbor_offsets(cfg.pi_radius_px):
        if abs(dr) >= nr or abs(dc) >= nc:
            continue
        center = diff[max(0, -dr) : nr - max(0, dr), max(0, -dc) : nc - max(0, dc)]
        other = diff[max(0, dr) : nr + min(0, dr), max(0, dc) : nc + min(0, dc)]
        total += float(np.sum(s2 / (s2 + (center - other) ** 2)))
    return total


def pair_count(shape, radius):
    """Number of directed neighbor pairs inside an image of ``shape``."""
    nr, nc = shape
    return sum(max(0, nr - abs(dr)) * max(0, nc - abs(dc)) for dr, dc in neighbor_offsets(radius))


def similarity(kind, a, b, cfg=SimilarityConfig()):
    if kind == "mi":
        return mutual_information(a, b, cfg)
    if kind == "cc":
        return cross_correlation(a, b)
    if kind == "pi":
        return pattern_intensity(a, b, cfg)
    raise ValidationError(f"unknown similarity {kind!r}; expected one of {KINDS}")
