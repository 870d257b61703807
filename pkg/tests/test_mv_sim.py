import numpy as np
import pytest

from mvreg.errors import ValidationError
from mvreg.image import Image2D
from mvreg.mv_sim import MvSimConfig, gaussian_blur, gaussian_kernel, scatter_radius_px, simulate_mv
from mvreg.projection import render_drr


def img(data, spacing=(1.0, 1.0)):
    return Image2D(np.asarray(data, dtype=np.float64), spacing)


def test_zero_drr_gives_ones():
    out = simulate_mv(img(np.zeros((16, 16))), MvSimConfig(noise_sigma=0.0))
    assert np.allclose(out.data, 1.0, rtol=0, atol=1e-6)


def test_degenerate_pipeline_is_pure_exponential(rng):
    drr = img(rng.uniform(0, 4, size=(12, 10)))
    cfg = MvSimConfig(scatter_fraction=0.0, noise_sigma=0.0, bone_suppression=1.0, energy_scale=0.55)
    out = simulate_mv(drr, cfg)
    assert np.allclose(out.data, np.exp(-0.55 * drr.data.astype(np.float32)), rtol=1e-6)


def test_same_seed_is_bit_identical(rng):
    drr = img(rng.uniform(0, 3, size=(20, 20)))
    a = simulate_mv(drr, MvSimConfig(seed=5))
    b = simulate_mv(drr, MvSimConfig(seed=5))
    c = simulate_mv(drr, MvSimConfig(seed=6))
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)


def test_negative_input_rejected():
    with pytest.raises(ValidationError):
        simulate_mv(img([[0.0, -0.1]]), MvSimConfig())


@pytest.mark.parametrize(
    "cfg",
    [
        MvSimConfig(scatter_fraction=1.5),
        MvSimConfig(scatter_sigma_mm=-1.0),
        MvSimConfig(noise_sigma=-0.1),
        MvSimConfig(energy_scale=0.0),
        MvSimConfig(bone_suppression=0.0),
    ],
)
def test_config_invariants(cfg):
    with pytest.raises(ValidationError):
        cfg.validate()


def test_blur_sigma_zero_is_identity(rng):
    a = img(rng.normal(size=(9, 7)))
    assert np.array_equal(gaussian_blur(a, 0.0).data, a.data)


def test_blur_of_constant_is_constant():
    out = gaussian_blur(img(np.full((15, 11), 3.25)), 2.3)
    assert np.allclose(out.data, 3.25, rtol=1e-6)


def test_impulse_response_matches_dense_convolution():
    # oracle: explicitly normalized 2D kernel on the (2r+1)^2 square
    sigma = 1.0
    r = int(np.ceil(3 * sigma))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    k2 = np.exp(-(xx**2 + yy**2) / (2 * sigma**2))
    k2 /= k2.sum()
    impulse = np.zeros((21, 21))
    impulse[10, 10] = 1.0
    out = gaussian_blur(img(impulse), sigma).data
    assert out[10, 10] == pytest.approx(k2[r, r], rel=1e-6)
    assert np.allclose(out[10 - r : 11 + r, 10 - r : 11 + r], k2, rtol=1e-5, atol=1e-9)
    assert np.count_nonzero(out) == k2.size


def test_kernel_radius_and_normalization():
    k = gaussian_kernel(2.2)
    assert len(k) == 2 * 7 + 1
    assert k.sum() == pytest.approx(1.0)
    with pytest.raises(ValidationError):
        gaussian_kernel(-1.0)


def test_blur_preserves_mean_on_interior_image():
    data = np.zeros((101, 101))
    data[30:70, 35:60] = 1.0
    out = gaussian_blur(img(data), 3.0)
    assert out.data.mean() == pytest.approx(data.mean(), rel=1e-6)


def test_output_range(small_volume, small_geometry):
    drr = render_drr(small_volume, small_geometry)
    for seed in range(3):
        cfg = MvSimConfig(seed=seed)
        out = simulate_mv(drr, cfg).data
        assert out.min() >= 0.0
        assert out.max() <= 1.0 + 5 * cfg.noise_sigma


def test_monotone_decreasing_without_scatter(rng):
    cfg = MvSimConfig(scatter_fraction=0.0, noise_sigma=0.0)
    drr = rng.uniform(0, 3, size=(8, 8))
    base = simulate_mv(img(drr), cfg).data
    bumped = drr.copy()
    bumped[3, 4] += 0.5
    out = simulate_mv(img(bumped), cfg).data
    assert out[3, 4] < base[3, 4]
    mask = np.ones_like(drr, bool)
    mask[3, 4] = False
    assert np.array_equal(out[mask], base[mask])


def test_mv_image_has_lower_gradient_energy(small_volume, small_geometry):
    drr = render_drr(small_volume, small_geometry)
    mv = simulate_mv(drr, MvSimConfig(noise_sigma=0.0))

    def rel_grad_energy(x):
        x = (x - x.mean()) / x.std()
        gy, gx = np.gradient(x)
        return float(np.mean(gx**2 + gy**2))

    assert rel_grad_energy(mv.data) < rel_grad_energy(drr.data)


def test_scatter_radius():
    assert scatter_radius_px(MvSimConfig(scatter_sigma_mm=8.0), (1.0, 0.5)) == (24, 48)
