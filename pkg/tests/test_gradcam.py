import numpy as np
import pytest

from neurohybrid import voltensor as vt
from neurohybrid.cohort.structures import BRANCHES
from neurohybrid.gradcam import (
    AttentionMap,
    cam,
    neuron_weights,
    overlay_pixels,
    population_average,
    read_ppm,
    render_overlay,
    subject_attention,
    top_mass_fraction,
    upsample_tricubic,
    write_ppm,
)
from neurohybrid.netarch import build_model

from conftest import toy_dataset


def _map(vol, branch="brainstem"):
    return AttentionMap(branch, vol, vol, 1)


# ---------------------------------------------------------------- weights and CAM


def test_neuron_weights_examples():
    g = np.ones((3, 2, 2, 2))
    np.testing.assert_array_equal(neuron_weights(g), [1, 1, 1])
    half = np.ones((1, 2, 2, 2))
    half[0, 0] = -1
    assert neuron_weights(half)[0] == 0.0
    with pytest.raises(vt.ShapeError):
        neuron_weights(np.ones((2, 2, 2)))


def test_cam_examples():
    A = np.random.default_rng(0).uniform(size=(1, 3, 4, 5))
    np.testing.assert_array_equal(cam([1.0], A), A[0])
    assert not cam([-0.5, -2.0], np.abs(np.random.default_rng(1).normal(size=(2, 3, 3, 3)))).any()
    with pytest.raises(vt.ShapeError):
        cam([1.0, 2.0], A)


def test_zero_weight_map_is_irrelevant():
    rng = np.random.default_rng(2)
    A = rng.normal(size=(3, 4, 4, 4))
    B = A.copy()
    B[1] = rng.normal(size=(4, 4, 4)) * 100
    alphas = [0.7, 0.0, -0.3]
    np.testing.assert_array_equal(cam(alphas, A), cam(alphas, B))


def test_weights_and_cam_match_loop_references():
    rng = np.random.default_rng(11)
    g = rng.normal(size=(4, 3, 2, 5))
    direct = [sum(g[k].ravel()) / g[k].size for k in range(4)]
    np.testing.assert_allclose(neuron_weights(g), direct, rtol=0, atol=1e-12)
    A = rng.normal(size=(4, 3, 2, 5))
    alphas = rng.normal(size=4)
    loop = np.zeros((3, 2, 5))
    for idx in np.ndindex(loop.shape):
        v = 0.0
        for k in range(4):
            v += alphas[k] * A[(k, *idx)]
        loop[idx] = max(v, 0.0)
    np.testing.assert_allclose(cam(alphas, A), loop, rtol=0, atol=1e-12)


def test_positive_gradient_scaling_leaves_normalized_map():
    from neurohybrid.gradcam import minmax

    rng = np.random.default_rng(12)
    A = np.abs(rng.normal(size=(3, 4, 4, 4)))
    g = rng.normal(size=(3, 4, 4, 4))
    raw = cam(neuron_weights(g), A)
    scaled = cam(neuron_weights(7.5 * g), A)
    np.testing.assert_allclose(scaled, 7.5 * raw, rtol=1e-12)
    np.testing.assert_allclose(minmax(scaled), minmax(raw), atol=1e-12)


# ---------------------------------------------------------------- upsampling


def test_same_shape_is_identity():
    v = np.random.default_rng(3).uniform(size=(4, 5, 6))
    np.testing.assert_array_equal(upsample_tricubic(v, v.shape), v)


def test_grid_points_preserved():
    v = np.random.default_rng(4).uniform(size=(3, 4, 5))
    up = upsample_tricubic(v, (5, 7, 9))  # factors (n-1)/(m-1) = 1/2 along every axis
    np.testing.assert_array_equal(up[::2, ::2, ::2], v)


@pytest.mark.parametrize("target", [(12, 12, 12), (7, 19, 5), (48, 48, 48)])
def test_linear_ramp_reproduced(target):
    src = (3, 4, 6)
    grids = np.meshgrid(*[np.arange(n, dtype=float) for n in src], indexing="ij")
    coef = (0.3, -0.2, 0.7)
    field = 5.0 + sum(c * g for c, g in zip(coef, grids))
    up = upsample_tricubic(field, target)
    pos = np.meshgrid(*[np.linspace(0, s - 1, t) for s, t in zip(src, target)], indexing="ij")
    expected = 5.0 + sum(c * p for c, p in zip(coef, pos))
    np.testing.assert_allclose(up, expected, rtol=0, atol=1e-12)


def test_quadratic_reproduced_away_from_borders():
    # the Catmull-Rom kernel is exact for quadratics wherever all four taps are real samples
    x = np.arange(8, dtype=float)
    field = np.broadcast_to((x**2)[:, None, None], (8, 2, 2)).copy()
    up = upsample_tricubic(field, (15, 2, 2))
    xs = np.linspace(0, 7, 15)
    inner = (xs >= 1) & (xs <= 6)
    np.testing.assert_allclose(up[inner, 0, 0], xs[inner] ** 2, atol=1e-12)


def test_constant_field_bit_exact():
    v = np.full((3, 3, 3), 0.37)
    assert (upsample_tricubic(v, (10, 11, 12)) == 0.37).all()


@pytest.mark.parametrize("seed", range(5))
def test_single_voxel_peak_stays_in_place(seed):
    rng = np.random.default_rng(seed)
    src = (6, 6, 6)
    v = np.zeros(src)
    peak = tuple(int(i) for i in rng.integers(0, 6, size=3))
    v[peak] = 1.0
    target = (21, 16, 11)
    up = upsample_tricubic(v, target)
    got = np.unravel_index(np.argmax(up), target)
    want = [p * (t - 1) / (s - 1) for p, s, t in zip(peak, src, target)]
    assert all(abs(g - w) <= 1 for g, w in zip(got, want))


def test_upsample_rejections():
    with pytest.raises(ValueError):
        upsample_tricubic(np.ones((2, 2, 2)), (0, 4, 4))
    with pytest.raises(vt.ShapeError):
        upsample_tricubic(np.ones((2, 2)), (4, 4))


# ---------------------------------------------------------------- population averaging


def test_population_single_and_complements():
    a = np.random.default_rng(5).uniform(size=(4, 4, 4))
    np.testing.assert_array_equal(population_average([_map(a)]).mean, a)
    pop = population_average([_map(a), _map(1 - a)])
    np.testing.assert_allclose(pop.mean, 0.5, atol=1e-15)
    assert pop.count == 2


def test_streaming_mean_matches_batch_mean():
    rng = np.random.default_rng(6)
    vols = [rng.uniform(size=(5, 5, 5)) for _ in range(17)]
    np.testing.assert_allclose(population_average(map(_map, vols)).mean, np.mean(vols, axis=0), atol=1e-14)


def test_population_rejections():
    with pytest.raises(ValueError):
        population_average([])
    with pytest.raises(ValueError):
        population_average([_map(np.ones((2, 2, 2))), _map(np.ones((2, 2, 2)), "striatum")])


def test_top_mass_fraction():
    v = np.zeros((10, 10, 10))
    v[:2, :5, :5] = 1.0  # exactly the top 5% of 1000 voxels
    region = np.zeros_like(v, dtype=bool)
    region[:1] = True
    assert top_mass_fraction(v, region) == 0.5
    assert top_mass_fraction(np.zeros_like(v), region) == 0.0


# ---------------------------------------------------------------- subject maps from a model


def test_subject_maps_deterministic_and_normalized(arch):
    model = build_model(arch, 0)
    data = toy_dataset(arch, n=4)
    first = subject_attention(model, data.inputs, 1, data.ids)
    second = subject_attention(model, data.inputs, 1, data.ids)
    for m1, m2 in zip(first, second):
        for b in BRANCHES:
            np.testing.assert_array_equal(m1[b].upsampled, m2[b].upsampled)
            assert m1[b].upsampled.shape == arch.input_shape(b)[1:]
            assert m1[b].upsampled.min() >= 0 and m1[b].upsampled.max() <= 1


def test_batched_maps_equal_single_subject_maps(arch):
    model = build_model(arch, 1)
    data = toy_dataset(arch, n=3)
    batched = subject_attention(model, data.inputs, 0)
    for i in range(3):
        single = subject_attention(model, {b: v[i : i + 1] for b, v in data.inputs.items()}, 0)[0]
        for b in BRANCHES:
            np.testing.assert_allclose(batched[i][b].low_res, single[b].low_res, atol=1e-12)


def _numpy_head(model, acts):
    """Logit from last-block activations, recomputed without the tape: pool, GAP, dense, ReLU, dense."""
    cfg, p = model.config, model.params
    feats = []
    for b in BRANCHES:
        a = acts[b][0]
        k = cfg.pool_window
        c, d, h, w = a.shape
        pooled = a.reshape(c, d // k, k, h // k, k, w // k, k).max(axis=(2, 4, 6))
        feats.append(pooled.mean(axis=(1, 2, 3)))
    hidden = np.maximum(np.concatenate(feats) @ p["dense.weight"].data + p["dense.bias"].data, 0)
    return float(hidden @ p["head.weight"].data[:, 0] + p["head.bias"].data[0])


def test_channel_weights_match_finite_difference_of_logit(arch):
    """CAM built from finite-difference alphas equals the tape-based map."""
    from neurohybrid.netarch import forward

    model = build_model(arch, 2, dtype=np.float64)
    x = {b: v[:1] for b, v in toy_dataset(arch, n=2).inputs.items()}
    base = forward(model, x, training=False)
    acts = {b: base.activations[b].data.astype(np.float64) for b in BRANCHES}
    assert abs(_numpy_head(model, acts) - float(base.logit.data[0, 0])) < 1e-10
    branch = "ventricles"
    A = acts[branch]
    tape_map = subject_attention(model, x, 1)[0][branch].low_res
    h = 1e-6
    grad = np.zeros_like(A)
    for idx in np.ndindex(A.shape):
        up = {**acts, branch: A.copy()}
        dn = {**acts, branch: A.copy()}
        up[branch][idx] += h
        dn[branch][idx] -= h
        grad[idx] = (_numpy_head(model, up) - _numpy_head(model, dn)) / (2 * h)
    expected = cam(neuron_weights(grad[0]), A[0])
    np.testing.assert_allclose(tape_map, expected, rtol=1e-6, atol=1e-9)


# ---------------------------------------------------------------- overlays


def test_zero_map_overlay_is_grayscale(tmp_path):
    anatomy = np.random.default_rng(7).uniform(size=(6, 7, 8))
    px = overlay_pixels(np.zeros_like(anatomy), anatomy, 2, 3)
    gray = np.round((anatomy[:, :, 3] - anatomy.min()) / (anatomy.max() - anatomy.min()) * 255)
    for c in range(3):
        np.testing.assert_array_equal(px[..., c], gray)


def test_full_map_overlay_shows_colormap_maximum():
    anatomy = np.random.default_rng(8).uniform(size=(4, 4, 4))
    px = overlay_pixels(np.ones_like(anatomy), anatomy, 0, 0)
    assert (px == [255, 255, 0]).all()


def test_ppm_round_trip_and_errors(tmp_path):
    anatomy = np.random.default_rng(9).uniform(size=(6, 7, 8))
    att = np.random.default_rng(10).uniform(size=anatomy.shape)
    px = render_overlay(att, anatomy, 1, 6, tmp_path / "o.ppm")
    np.testing.assert_array_equal(read_ppm(tmp_path / "o.ppm"), px)
    assert px.shape == (6, 8, 3)
    with pytest.raises(IndexError):
        overlay_pixels(att, anatomy, 1, 7)
    (tmp_path / "bad.ppm").write_bytes(b"P5\n1 1\n255\n\x00")
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "bad.ppm")
    write_ppm(np.zeros((2, 3, 3), np.uint8), tmp_path / "z.ppm")
    assert (tmp_path / "z.ppm").read_bytes().startswith(b"P6\n3 2\n255\n")
