"""Registration engines: similarity optimization and iterative CNN regression.

Both engines compare a test MV image with MV images simulated from the
planning CT at candidate displacements, restricted to a centered square ROI,
and both return a :class:`RegistrationTrace`.
"""

import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import RegistrationError, ValidationError
from .image import Image2D, center_crop, check_same_dims
from .mv_sim import MvSimConfig, scatter_radius_px, simulate_mv
from .optimizers import OptimizerConfig, maximize
from .projection import MU_WATER, Displacement2D, Projector
from .similarity import SimilarityConfig, similarity

TILE_GRID = 4


@dataclass
class RegistrationCase:
    volume: object
    geometry: object
    test_image: Image2D
    gold: Displacement2D = None
    initial: Displacement2D = field(default_factory=Displacement2D)
    case_id: str = ""

    def __post_init__(self):
        if tuple(self.test_image.dims) != tuple(self.geometry.detector_dims):
            raise ValidationError(
                f"test image dims {self.test_image.dims} differ from detector dims {self.geometry.detector_dims}"
            )


@dataclass
class RegistrationTrace:
    method: str
    records: list
    final: Displacement2D
    iterations: int
    converged: bool
    case_id: str = ""
    gold: Displacement2D = None

    def to_json_records(self):
        """One JSON-ready dict per iteration, each tagged with case and method."""
        base = {"case_id": self.case_id, "method": self.method}
        if self.gold is not None:
            base["gold"] = [self.gold.lateral_mm, self.gold.longitudinal_mm]
        out = []
        for rec in self.records:
            row = dict(base)
            row.update(rec)
            out.append(row)
        return out


# --- imaging chain ---------------------------------------------------------


class ImagingChain:
    """Renders and MV-simulates one volume; caches projectors for reuse.

    ``rendered_roi`` renders only the ROI plus a margin wide enough for the
    scatter kernel, so its pixels equal the same crop of a full-detector
    simulation.
    """

    def __init__(self, volume, geometry, mv_cfg=MvSimConfig(), roi_mm=100.0, mu_water=MU_WATER):
        self.volume = volume
        self.geometry = geometry
        self.mv_cfg = mv_cfg
        self.clean_cfg = mv_cfg.noise_free()
        self.roi_mm = float(roi_mm)
        self.mu_water = mu_water
        self.roi_px = roi_side_px(geometry, roi_mm)
        self._full = None
        self._padded = None

    @property
    def full_projector(self):
        if self._full is None:
            self._full = Projector(self.volume, self.geometry, self.mu_water)
        return self._full

    @property
    def padded_projector(self):
        if self._padded is None:
            nu, nv = self.geometry.detector_dims
            margin = max(scatter_radius_px(self.mv_cfg, self.geometry.pixel_spacing_mm)) if (
                self.mv_cfg.scatter_fraction > 0
            ) else 0
            side = min(self.roi_px + 2 * margin, nu, nv)
            side -= (min(nu, nv) - side) % 2
            self._padded = Projector(self.volume, self.geometry.cropped(side), self.mu_water)
        return self._padded

    def test_image(self, displacement, seed):
        """Full-detector simulated MV image with noise."""
        cfg = MvSimConfig(**{**self.mv_cfg.__dict__, "seed": int(seed)})
        return simulate_mv(self.full_projector.render(displacement), cfg)

    def rendered_image(self, displacement):
        """Full-detector noise-free simulated MV image."""
        return simulate_mv(self.full_projector.render(displacement), self.clean_cfg)

    def rendered_roi(self, displacement):
        """Noise-free simulated MV image, cropped to the ROI."""
        img = simulate_mv(self.padded_projector.render(displacement), self.clean_cfg)
        return center_crop(img, self.roi_px)


_CHAINS = OrderedDict()
_CHAIN_CACHE_SIZE = 8


def imaging_chain(volume, geometry, mv_cfg, roi_mm, mu_water=MU_WATER):
    key = (id(volume), geometry, mv_cfg.noise_free(), float(roi_mm), mu_water)
    chain = _CHAINS.get(key)
    if chain is None or chain.volume is not volume:
        chain = ImagingChain(volume, geometry, mv_cfg, roi_mm, mu_water)
        _CHAINS[key] = chain
        while len(_CHAINS) > _CHAIN_CACHE_SIZE:
            _CHAINS.popitem(last=False)
    return chain


# --- preprocessing -----------------------------------------------------------


def roi_side_px(geometry, roi_mm):
    side = geometry.roi_pixels(roi_mm)
    nu, nv = geometry.detector_dims
    if side < TILE_GRID or side > min(nu, nv):
        raise ValidationError(f"ROI of {roi_mm} mm ({side} px) does not fit detector {nu}x{nv}")
    return side


def _znorm(x):
    x = np.asarray(x, dtype=np.float64)
    sd = x.std()
    return x - x.mean() if sd == 0 else (x - x.mean()) / sd


def tile_stack(diff, grid=TILE_GRID):
    """Split a square array into ``grid x grid`` tiles stacked as channels (row-major)."""
    side = diff.shape[0]
    t = side // grid
    tiles = diff[: grid * t, : grid * t].reshape(grid, t, grid, t).transpose(0, 2, 1, 3)
    return tiles.reshape(grid * grid, t, t)


def preprocess(test, rendered, roi_mm):
    """Difference of z-normalized images, cropped to the ROI, as a 16-channel tensor."""
    check_same_dims(test, rendered)
    nu, nv = test.dims
    side = int(np.floor(roi_mm / min(test.spacing) + 1e-9))
    side -= side % TILE_GRID
    if side < TILE_GRID or side > min(nu, nv):
        raise ValidationError(f"ROI of {roi_mm} mm ({side} px) does not fit a {nu}x{nv} image")
    diff = _znorm(test.data) - _znorm(rendered.data)
    r0 = (nv - side) // 2
    c0 = (nu - side) // 2
    return tile_stack(diff[r0 : r0 + side, c0 : c0 + side]).astype(np.float32)


# --- engines -----------------------------------------------------------------


def register_cnn(case, model, max_iters=3, stop_eps_mm=0.1, mv_cfg=MvSimConfig(), roi_mm=100.0, method="CNN"):
    """Iterate: render at the current estimate, predict a correction, accumulate it."""
    if max_iters < 1:
        raise ValidationError(f"max_iters must be >= 1, got {max_iters}")
    chain = imaging_chain(case.volume, case.geometry, mv_cfg, roi_mm)
    current = case.initial
    records = []
    converged = False
    for it in range(1, max_iters + 1):
        t0 = time.perf_counter()
        try:
            rendered = chain.rendered_image(current)
            x = preprocess(case.test_image, rendered, roi_mm)
            pred = np.asarray(model.forward(x, train_mode=False), dtype=np.float64).reshape(-1)
        except Exception as exc:
            raise RegistrationError(f"iteration {it} of case {case.case_id!r} failed: {exc}", iteration=it) from exc
        if pred.shape != (2,) or not np.all(np.isfinite(pred)):
            raise RegistrationError(f"iteration {it}: model returned {pred!r}", iteration=it)
        delta = Displacement2D(pred[0], pred[1])
        new = current + delta
        records.append(
            {
                "iteration": it,
                "displacement": [current.lateral_mm, current.longitudinal_mm],
                "delta": [delta.lateral_mm, delta.longitudinal_mm],
                "result": [new.lateral_mm, new.longitudinal_mm],
                "wall_time_s": time.perf_counter() - t0,
            }
        )
        current = new
        if np.hypot(delta.lateral_mm, delta.longitudinal_mm) < stop_eps_mm:
            converged = True
            break
    return RegistrationTrace(method, records, current, len(records), converged, case.case_id, case.gold)


def register_classical(
    case,
    similarity_kind="cc",
    optimizer_cfg=OptimizerConfig(),
    roi_mm=100.0,
    mv_cfg=MvSimConfig(),
    similarity_cfg=SimilarityConfig(),
    method=None,
):
    """Maximize similarity between the test ROI and the simulated ROI over the displacement."""
    chain = imaging_chain(case.volume, case.geometry, mv_cfg, roi_mm)
    test_roi = center_crop(case.test_image, chain.roi_px)
    stamps = [time.perf_counter()]

    def objective(p):
        value = similarity(similarity_kind, test_roi, chain.rendered_roi(Displacement2D(p[0], p[1])), similarity_cfg)
        stamps.append(time.perf_counter())
        return value

    result = maximize(objective, case.initial, optimizer_cfg)
    records = []
    prev = 0
    for h in result.history:
        records.append(
            {
                "iteration": h["iteration"],
                "result": list(h["point"]),
                "value": h["value"],
                "evals": h["evals"],
                "wall_time_s": stamps[h["evals"]] - stamps[prev],
            }
        )
        prev = h["evals"]
    label = method or f"{optimizer_cfg.kind.capitalize()}-{similarity_kind.upper()}"
    return RegistrationTrace(label, records, result.argmax, len(records), result.converged, case.case_id, case.gold)


METHODS = {
    "Simplex-PI": ("simplex", "pi"),
    "Simplex-MI": ("simplex", "mi"),
    "Simplex-CC": ("simplex", "cc"),
    "Powell-PI": ("powell", "pi"),
    "Powell-MI": ("powell", "mi"),
    "Powell-CC": ("powell", "cc"),
}
