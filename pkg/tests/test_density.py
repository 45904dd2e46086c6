import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cgdrcn.density import (
    DensityMap, GaussianSpec, HeadOutOfBounds, count, read_dmap, rasterize, sum_pool, target_pyramid,
    write_dmap, write_pgm,
)
from cgdrcn.errors import ShapeError


def brute_force_head(x, y, w, h, sigma, radius):
    """Per-pixel Gaussian over the truncated square window, renormalised in-image."""
    out = np.zeros((h, w))
    for r in range(h):
        for c in range(w):
            dx, dy = c + 0.5 - x, r + 0.5 - y
            if abs(dx) <= radius and abs(dy) <= radius:
                out[r, c] = np.exp(-(dx * dx + dy * dy) / (2 * sigma * sigma))
    return out / out.sum()


def test_empty_heads():
    m = rasterize([], (16, 8))
    assert m.values.shape == (8, 16) and count(m) == 0


def test_center_head_symmetric():
    m = rasterize([(32.0, 32.0)], (64, 64), GaussianSpec(4.0))
    assert abs(count(m) - 1) < 1e-6
    v = m.values
    # pixel centres sit at c + 0.5, so the head at 32.0 is the reflection axis between columns 31 and 32
    np.testing.assert_allclose(v, v[:, ::-1], atol=1e-15)
    np.testing.assert_allclose(v, v[::-1, :], atol=1e-15)


@pytest.mark.parametrize("x,y", [(0.0, 0.0), (63.9, 0.2), (10.3, 63.5), (31.7, 17.2)])
def test_matches_brute_force_oracle(x, y):
    spec = GaussianSpec(4.0)
    m = rasterize([(x, y)], (64, 64), spec)
    ref = brute_force_head(x, y, 64, 64, spec.sigma, spec.truncation_radius)
    np.testing.assert_allclose(m.values, ref, atol=1e-12)
    assert abs(count(m) - 1) < 1e-6


def test_out_of_bounds_names_index():
    with pytest.raises(HeadOutOfBounds) as exc:
        rasterize([(1, 1), (16, 3)], (16, 16))
    assert exc.value.index == 1
    with pytest.raises(HeadOutOfBounds):
        rasterize([(-0.1, 2)], (16, 16))


def test_gaussian_spec_validation():
    assert GaussianSpec(2.0).truncation_radius == 8.0
    with pytest.raises(ValueError):
        GaussianSpec(0.0)
    with pytest.raises(ValueError):
        GaussianSpec(2.0, truncation_radius=5.0)


heads_strategy = st.lists(
    st.tuples(st.floats(0, 47.999, allow_nan=False), st.floats(0, 31.999, allow_nan=False)), max_size=40
)


@given(heads_strategy, st.floats(0.5, 6.0))
def test_mass_conservation(heads, sigma):
    m = rasterize(heads, (48, 32), GaussianSpec(sigma))
    assert abs(count(m) - len(heads)) <= 1e-4 * len(heads) + 1e-6
    assert np.all(m.values >= 0)


@given(st.integers(20, 36), st.integers(20, 36), st.integers(-8, 8), st.integers(-8, 8),
       st.integers(0, 63), st.integers(0, 63))
def test_translation_covariance(x0, y0, dx, dy, kx, ky):
    # sigma 2 -> window half-width 8; both positions keep the window inside the 64x64 image.
    # Dyadic fractions keep x0 + dx + f an exact integer shift of x0 + f in floating point.
    fx, fy = kx / 64, ky / 64
    spec = GaussianSpec(2.0)
    a = rasterize([(x0 + fx, y0 + fy)], (64, 64), spec).values
    b = rasterize([(x0 + dx + fx, y0 + dy + fy)], (64, 64), spec).values
    shifted = np.zeros_like(a)
    shifted[max(dy, 0):64 + min(dy, 0), max(dx, 0):64 + min(dx, 0)] = \
        a[max(-dy, 0):64 - max(dy, 0), max(-dx, 0):64 - max(dx, 0)]
    np.testing.assert_array_equal(b, shifted)


@given(st.lists(st.tuples(st.floats(16, 48), st.floats(16, 48)), min_size=1, max_size=6),
       st.lists(st.tuples(st.floats(16, 48), st.floats(16, 48)), min_size=1, max_size=6))
def test_superposition_interior(s1, s2):
    spec = GaussianSpec(3.0)
    both = rasterize(s1 + s2, (64, 64), spec).values
    np.testing.assert_allclose(both, rasterize(s1, (64, 64), spec).values + rasterize(s2, (64, 64), spec).values,
                               atol=1e-6)


def test_sum_pool_examples():
    p = sum_pool(DensityMap(np.ones((4, 4))), 2)
    np.testing.assert_array_equal(p.values, np.full((2, 2), 4.0))
    assert p.scale_divisor == 2 and count(p) == 16
    m = DensityMap(np.random.default_rng(0).random((8, 8)), 4)
    ident = sum_pool(m, 1)
    np.testing.assert_array_equal(ident.values, m.values)
    assert ident.scale_divisor == 4
    with pytest.raises(ShapeError):
        sum_pool(DensityMap(np.ones((6, 4))), 4)


def test_sum_pool_random_factor8():
    v = np.random.default_rng(1).random((32, 32))
    p = sum_pool(DensityMap(v), 8)
    ref = sum(float(x) for x in v.ravel())
    assert abs(count(p) - ref) <= 1e-6 * ref
    for i in range(4):
        for j in range(4):
            assert p.values[i, j] == pytest.approx(v[8 * i:8 * i + 8, 8 * j:8 * j + 8].sum(), rel=1e-12)


def test_count_examples():
    assert count(DensityMap(np.zeros((4, 4)))) == 0
    rng = np.random.default_rng(2)
    heads = rng.uniform(0, 64, size=(7, 2))
    m = rasterize(heads, (64, 64))
    assert abs(count(m) - 7) < 1e-3
    assert count(sum_pool(m, 4)) == pytest.approx(count(m), rel=1e-12)


def test_pyramid_sizes_and_counts():
    rng = np.random.default_rng(3)
    full = rasterize(rng.uniform(0, 224, size=(30, 2)), (224, 224))
    pyr = target_pyramid(full)
    assert {i: m.values.shape for i, m in pyr.items()} == {3: (56, 56), 4: (28, 28), 5: (14, 14), 6: (7, 7)}
    assert {i: m.scale_divisor for i, m in pyr.items()} == {3: 4, 4: 8, 5: 16, 6: 32}
    for m in pyr.values():
        assert abs(count(m) - count(full)) <= 1e-6 * count(full)
    zero = target_pyramid(DensityMap(np.zeros((64, 64))))
    assert all(not np.any(m.values) for m in zero.values())
    with pytest.raises(ShapeError):
        target_pyramid(DensityMap(np.zeros((48, 64))))


def test_dmap_roundtrip(tmp_path):
    m = rasterize([(5.5, 6.5), (20, 3)], (32, 24))
    write_dmap(m, tmp_path / "a.dmap")
    raw = (tmp_path / "a.dmap").read_bytes()
    assert raw[:4] == b"DMAP" and len(raw) == 16 + 4 * 32 * 24
    assert int.from_bytes(raw[4:8], "little") == 24 and int.from_bytes(raw[8:12], "little") == 32
    back = read_dmap(tmp_path / "a.dmap")
    np.testing.assert_array_equal(back.values, m.values.astype(np.float32))
    assert back.scale_divisor == 1


def test_pgm_export(tmp_path):
    m = rasterize([(8, 8)], (16, 16))
    write_pgm(m, tmp_path / "a.pgm")
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n16 16\n255\n")
    px = np.frombuffer(raw[len(b"P5\n16 16\n255\n"):], dtype=np.uint8)
    assert px.max() == 255 and px.size == 256
