import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bento_forge import stn
from bento_forge.boxes import DegenerateBoxError, LayoutBox
from bento_forge.gradcheck import finite_diff_check
from bento_forge.stn import IDENTITY_THETA, affine_grid, bbox_to_affine, bilinear_sample, stn_loss
from bento_forge.tensor import ShapeError, Tensor


def sample_oracle(image, grid):
    """Per-pixel 4-corner bilinear interpolation with zero padding."""
    c, h, w = image.shape
    ho, wo, _ = grid.shape
    out = np.zeros((c, ho, wo))
    for i in range(ho):
        for j in range(wo):
            x = ((grid[i, j, 0] + 1) * w - 1) / 2
            y = ((grid[i, j, 1] + 1) * h - 1) / 2
            x0, y0 = int(np.floor(x)), int(np.floor(y))
            for yy in (y0, y0 + 1):
                for xx in (x0, x0 + 1):
                    if 0 <= xx < w and 0 <= yy < h:
                        wt = (1 - abs(x - xx)) * (1 - abs(y - yy))
                        out[:, i, j] += wt * image[:, yy, xx]
    return out


def centers(n):
    return np.array([(2 * k + 1) / n - 1 for k in range(n)])


# -- affine_grid ----------------------------------------------------------


def test_identity_grid_is_pixel_centers():
    g = affine_grid(IDENTITY_THETA, 3, 4).data
    np.testing.assert_array_equal(g[..., 0], np.tile(centers(4), (3, 1)))
    np.testing.assert_array_equal(g[..., 1], np.tile(centers(3)[:, None], (1, 4)))


def test_translation_grid():
    theta = np.array([[1.0, 0, 0.5], [0, 1.0, 0]])
    g0 = affine_grid(IDENTITY_THETA, 4, 4).data
    g = affine_grid(theta, 4, 4).data
    np.testing.assert_array_equal(g[..., 0], g0[..., 0] + 0.5)
    np.testing.assert_array_equal(g[..., 1], g0[..., 1])


def test_grid_against_hand_matmul():
    theta = np.random.default_rng(0).normal(size=(2, 3))
    g = affine_grid(theta, 4, 4).data
    xs, ys = centers(4), centers(4)
    for i in range(4):
        for j in range(4):
            expect = [
                theta[0, 0] * xs[j] + theta[0, 1] * ys[i] + theta[0, 2],
                theta[1, 0] * xs[j] + theta[1, 1] * ys[i] + theta[1, 2],
            ]
            np.testing.assert_allclose(g[i, j], expect, rtol=1e-14, atol=1e-15)


# -- bilinear_sample ------------------------------------------------------


def test_identity_sample_reproduces_input():
    img = np.random.default_rng(1).normal(size=(3, 7, 5))
    out = bilinear_sample(img, affine_grid(IDENTITY_THETA, 7, 5)).data
    assert np.max(np.abs(out - img)) <= 1e-9


def test_integer_translation_is_exact_on_interior():
    img = np.random.default_rng(2).normal(size=(2, 8, 8))
    # shifting sample coordinates by 2 pixels: 2 * (2 / 8) in normalized units
    theta = np.array([[1.0, 0, 0.5], [0, 1.0, -0.25]])
    out = bilinear_sample(img, affine_grid(theta, 8, 8)).data
    # out[:, i, j] = img[:, i - 1, j + 2]
    np.testing.assert_allclose(out[:, 1:, :6], img[:, :7, 2:], atol=1e-9, rtol=0)


def test_sample_against_oracle():
    rng = np.random.default_rng(3)
    img = rng.normal(size=(2, 5, 6))
    grid = rng.uniform(-1.3, 1.3, size=(4, 7, 2))
    np.testing.assert_allclose(bilinear_sample(img, grid).data, sample_oracle(img, grid), atol=1e-12)


def test_batched_sample_matches_single():
    rng = np.random.default_rng(4)
    img = rng.normal(size=(3, 2, 5, 5))
    grid = rng.uniform(-1, 1, size=(3, 4, 4, 2))
    out = bilinear_sample(img, grid).data
    for n in range(3):
        np.testing.assert_allclose(out[n], sample_oracle(img[n], grid[n]), atol=1e-12)


def test_weights_sum_to_one_in_bounds_and_at_most_one_outside():
    rng = np.random.default_rng(5)
    h, w = 6, 6
    inner = rng.uniform(-1 + 1 / w, 1 - 1 / w, size=(200, 2))
    outer = rng.uniform(-1.5, 1.5, size=(200, 2))
    for pts, exact in ((inner, True), (outer, False)):
        corners = stn.bilinear_corners(pts, h, w)
        weights = sum(c[2] for c in corners)
        assert np.all(np.stack([c[2] for c in corners]) >= 0)
        if exact:
            np.testing.assert_allclose(weights, 1.0, atol=1e-15)
        else:
            assert np.all(weights <= 1.0 + 1e-15)


def _theta_grad_case(theta0, img):
    return finite_diff_check(
        lambda th: bilinear_sample(Tensor(img), affine_grid(th, 6, 6)),
        [theta0],
        points=None,
    )


def test_theta_gradient_at_interior_points():
    rng = np.random.default_rng(6)
    img = rng.normal(size=(2, 6, 6))
    theta = np.array([[0.8, 0.1, 0.03], [-0.05, 0.9, 0.07]])
    assert _theta_grad_case(theta, img).max_rel_error < 1e-4


def test_image_gradient():
    rng = np.random.default_rng(7)
    grid = rng.uniform(-1.1, 1.1, size=(4, 4, 2))
    rep = finite_diff_check(lambda im: bilinear_sample(im, Tensor(grid)), [rng.normal(size=(2, 5, 5))], points=None)
    assert rep.max_rel_error < 1e-4


def test_translation_composition():
    img = np.random.default_rng(8).normal(size=(1, 16, 16))
    t1, t2 = 0.125, 0.25
    a = bilinear_sample(img, affine_grid(np.array([[1.0, 0, t1], [0, 1, 0]]), 16, 16))
    ab = bilinear_sample(a, affine_grid(np.array([[1.0, 0, t2], [0, 1, 0]]), 16, 16)).data
    once = bilinear_sample(img, affine_grid(np.array([[1.0, 0, t1 + t2], [0, 1, 0]]), 16, 16)).data
    # interior: columns whose samples stay in-bounds for both paths
    np.testing.assert_allclose(ab[..., :13], once[..., :13], atol=1e-9)


# -- stn_loss -------------------------------------------------------------


def test_stn_loss_zero_for_identical():
    x = np.random.default_rng(9).normal(size=(4, 3, 3))
    assert stn_loss(x, x).item() == 0.0


def test_stn_loss_unit_offset():
    x = np.random.default_rng(10).normal(size=(4, 3, 3))
    assert stn_loss(x + 1.0, x).item() == pytest.approx(1.0, abs=1e-12)


def test_stn_loss_against_oracle():
    rng = np.random.default_rng(11)
    a, b = rng.normal(size=(4, 3, 3)), rng.normal(size=(4, 3, 3))
    total = 0.0
    for v, u in zip(a.ravel(), b.ravel()):
        total += abs(v - u)
    assert stn_loss(a, b).item() == pytest.approx(total / a.size, rel=1e-13)


def test_stn_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        stn_loss(np.zeros((4, 2, 2)), np.zeros((4, 2, 3)))


# -- bbox_to_affine -------------------------------------------------------


def _map(theta, x, y):
    return theta @ np.array([x, y, 1.0])


def test_full_canvas_box_is_identity():
    theta = bbox_to_affine(LayoutBox.from_corners(0, 0, 1, 1))
    np.testing.assert_array_equal(theta, IDENTITY_THETA)


@pytest.mark.parametrize(
    "box",
    [LayoutBox(0.5, 0.5, 0.5, 0.5), LayoutBox.from_corners(0.0, 0.6, 0.3, 1.0), LayoutBox(0.3, 0.7, 0.2, 0.4)],
)
def test_box_corners_round_trip(box):
    theta = bbox_to_affine(box)
    x0, y0, x1, y1 = box.corners()
    # box corners (output canvas) must land on the item canvas corners
    for (bx, by), (ex, ey) in [((x0, y0), (-1, -1)), ((x1, y0), (1, -1)), ((x0, y1), (-1, 1)), ((x1, y1), (1, 1))]:
        np.testing.assert_allclose(_map(theta, 2 * bx - 1, 2 * by - 1), [ex, ey], atol=1e-12)


def test_degenerate_box_rejected():
    with pytest.raises(DegenerateBoxError):
        bbox_to_affine(LayoutBox(0.5, 0.5, 0.0, 0.3))


def test_boxes_to_theta_matches_and_differentiates():
    rng = np.random.default_rng(12)
    boxes = np.column_stack([rng.uniform(0.2, 0.8, 5), rng.uniform(0.2, 0.8, 5), rng.uniform(0.2, 0.9, 5), rng.uniform(0.2, 0.9, 5)])
    got = stn.boxes_to_theta(boxes).data
    for k in range(5):
        np.testing.assert_allclose(got[k], bbox_to_affine(LayoutBox(*boxes[k])), rtol=1e-14)
    assert finite_diff_check(stn.boxes_to_theta, [boxes], points=None).max_rel_error < 1e-4


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_identity_round_trip_property(seed):
    rng = np.random.default_rng(seed)
    c, h, w = rng.integers(1, 4), rng.integers(1, 9), rng.integers(1, 9)
    img = rng.normal(size=(c, h, w))
    out = bilinear_sample(img, affine_grid(IDENTITY_THETA, h, w)).data
    assert np.max(np.abs(out - img)) <= 1e-9
