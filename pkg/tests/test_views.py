import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvcl.errors import DataError, InsufficientViewsError
from mvcl.views import (
    ALL_PLANES,
    ViewSet,
    extract_view,
    extract_views,
    get_plane,
    load_view_set,
    plane_table,
    resize_bilinear,
    save_view_set,
)
from mvcl.volume import LesionCube


def cube(data, lesion_id="L0"):
    return LesionCube(np.asarray(data, dtype=np.float64), lesion_id)


def random_cube(side=9, seed=0):
    return cube(np.random.default_rng(seed).random((side, side, side)))


def test_plane_table_is_orthonormal():
    table = plane_table()
    assert [p.id for p in table] == list(ALL_PLANES)
    for p in table:
        basis = np.array([p.normal, p.u_axis, p.v_axis])
        np.testing.assert_allclose(basis @ basis.T, np.eye(3), atol=1e-12)


def test_planes_are_distinct():
    normals = {tuple(np.round(np.abs(p.normal), 6)) + tuple(np.sign(p.normal)) for p in plane_table()}
    assert len(normals) == 9


def test_get_plane_range():
    assert get_plane(4).id == 4
    with pytest.raises(DataError):
        get_plane(0)
    with pytest.raises(DataError):
        get_plane(10)


@pytest.mark.parametrize("plane_id, take", [
    (1, lambda d: d[:, :, 4]),
    (2, lambda d: d[:, 4, :]),
    (3, lambda d: d[4, :, :]),
])
def test_axis_planes_recover_central_slices(plane_id, take):
    c = random_cube()
    view = extract_view(c, get_plane(plane_id), 9)
    np.testing.assert_allclose(view.pixels, take(c.data), atol=1e-12)


@pytest.mark.parametrize("plane_id", ALL_PLANES)
def test_constant_cube_inside_disc(plane_id):
    # diagonal planes leave the cube near their corners; the centre stays inside
    view = extract_view(cube(np.full((9, 9, 9), 0.7)), get_plane(plane_id), 9)
    assert view.pixels[4, 4] == pytest.approx(0.7, abs=1e-12)
    assert np.all(view.pixels <= 0.7 + 1e-12)
    if plane_id <= 3:
        np.testing.assert_allclose(view.pixels, 0.7, atol=1e-12)


def test_diagonal_plane_on_z_ramp():
    s = 5
    data = np.broadcast_to(np.arange(s)[None, None, :] / (s - 1), (s, s, s))
    view = extract_view(cube(data), get_plane(4), s)
    expected = np.broadcast_to(np.arange(s)[None, :] / 4, (s, s))
    np.testing.assert_allclose(view.pixels, expected, atol=1e-12)


def test_rotation_about_z_permutes_views():
    c = random_cube(9, seed=3)
    rotated = cube(np.rot90(c.data, axes=(0, 1)))
    a = {p: extract_view(c, get_plane(p), 9).pixels for p in ALL_PLANES}
    b = {p: extract_view(rotated, get_plane(p), 9).pixels for p in ALL_PLANES}
    np.testing.assert_allclose(b[1], np.rot90(a[1]), atol=1e-9)
    np.testing.assert_allclose(b[3], a[2], atol=1e-9)
    np.testing.assert_allclose(b[5], a[4], atol=1e-9)
    np.testing.assert_allclose(b[4], a[5][::-1], atol=1e-9)
    np.testing.assert_allclose(b[8], a[6][:, ::-1], atol=1e-9)


def test_extraction_is_deterministic():
    c = random_cube(12, seed=5)
    a = extract_views(c, ALL_PLANES, 20).stack()
    b = extract_views(c, ALL_PLANES, 20).stack()
    assert a.tobytes() == b.tobytes()


@given(st.integers(4, 16), st.integers(2, 40), st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_views_shape_and_range(side, out_size, seed):
    vs = extract_views(random_cube(side, seed), ALL_PLANES, out_size)
    arr = vs.stack()
    assert arr.shape == (9, out_size, out_size)
    assert arr.min() >= 0.0 and arr.max() <= 1.0


def test_extract_views_deduplicates_and_sorts():
    vs = extract_views(random_cube(), [3, 1, 3], 9)
    assert vs.plane_ids == [1, 3]


def test_extract_views_needs_two_planes():
    with pytest.raises(InsufficientViewsError):
        extract_views(random_cube(), [2, 2], 9)


def test_view_set_invariants():
    vs = extract_views(random_cube(), [1, 2], 9)
    with pytest.raises(DataError):
        ViewSet("x", [vs.views[1], vs.views[0]])
    with pytest.raises(InsufficientViewsError):
        ViewSet("x", [vs.views[0]])


def test_resize_preserves_constant_and_identity():
    img = np.random.default_rng(0).random((7, 7))
    np.testing.assert_array_equal(resize_bilinear(img, 7), img)
    np.testing.assert_allclose(resize_bilinear(np.full((7, 7), 0.3), 19), 0.3, atol=1e-12)


def test_resize_doubling_half_pixel_centres():
    # two source pixels at centres 0.5 and 1.5; four targets at 0.25, 0.75, 1.25, 1.75
    out = resize_bilinear(np.array([[0.0, 1.0], [0.0, 1.0]]), 4)
    np.testing.assert_allclose(out[0], [0.0, 0.25, 0.75, 1.0], atol=1e-12)


def test_view_set_file_roundtrip(tmp_path):
    vs = extract_views(random_cube(), [2, 5, 9], 16)
    path = save_view_set(vs, tmp_path / "L0.f32")
    assert path.stat().st_size == 3 * 16 * 16 * 4
    back = load_view_set(path)
    assert back.plane_ids == [2, 5, 9] and back.lesion_id == "L0"
    np.testing.assert_array_equal(back.stack(), vs.stack().astype(np.float32))


def test_view_set_file_size_mismatch(tmp_path):
    path = save_view_set(extract_views(random_cube(), [1, 2], 8), tmp_path / "a.f32")
    path.write_bytes(path.read_bytes()[:100])
    with pytest.raises(DataError):
        load_view_set(path)
