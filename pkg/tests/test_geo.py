import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geotlm.errors import (
    DegenerateBox,
    FormatError,
    GridTooSmall,
    OutOfBounds,
    OutOfBox,
    YearUnavailable,
)
from geotlm.geo import (
    EmbeddingFieldStore,
    SpatioTemporalBox,
    YearRaster,
    build_feature_set,
    decode_aefs,
    encode_aefs,
    geo_to_pixel,
    make_anchor_grid,
    pixel_to_geo,
    query_embedding,
    read_aefs,
    write_aefs,
)

from oracles import linspace_oracle


def box(*v, year=2024):
    return SpatioTemporalBox(*v, year)


def distinct_store(cells_x=2, cells_y=2, b=(0.0, 0.0, 1.0, 1.0), year=2024):
    data = np.zeros((cells_y, cells_x, 64), dtype=np.float32)
    for r in range(cells_y):
        for c in range(cells_x):
            data[r, c, :] = r * cells_x + c + 1  # distinct constant per cell
    return EmbeddingFieldStore([YearRaster(box(*b, year=year), data)])


# --- anchor grid ------------------------------------------------------------

def test_unit_box_three_by_three():
    g = make_anchor_grid(box(0, 0, 1, 1), 3, 3)
    assert g.step_lon == g.step_lat == 0.5
    assert list(g.lons) == [0.0, 0.5, 1.0]


def test_grid_matches_linspace_oracle():
    g = make_anchor_grid(box(-1, -1, 1, 1), 5, 2)
    assert g.step_lon == 0.5 and g.step_lat == 2.0
    assert len(g) == 10 and g.nodes.shape == (10, 2)
    np.testing.assert_allclose(g.lons, linspace_oracle(-1, 1, 5), rtol=0, atol=1e-15)
    np.testing.assert_allclose(g.lats, linspace_oracle(-1, 1, 2), rtol=0, atol=1e-15)
    assert g.lons[0] == -1 and g.lons[-1] == 1 and g.lats[0] == -1 and g.lats[-1] == 1


def test_nodes_are_latitude_major():
    g = make_anchor_grid(box(0, 0, 2, 1), 3, 2)
    assert g.nodes.tolist() == [[0, 0], [1, 0], [2, 0], [0, 1], [1, 1], [2, 1]]


@pytest.mark.parametrize("b", [(10, 20, 10, 30), (0, 5, 1, 5), (2, 0, 1, 1)])
def test_degenerate_box(b):
    with pytest.raises(DegenerateBox):
        box(*b)


@pytest.mark.parametrize("n", [(1, 3), (3, 1), (0, 0)])
def test_grid_too_small(n):
    with pytest.raises(GridTooSmall):
        make_anchor_grid(box(0, 0, 1, 1), *n)


@settings(max_examples=100, deadline=None)
@given(st.floats(-170, 170), st.floats(-80, 80), st.floats(1e-4, 5), st.floats(1e-4, 5),
       st.integers(2, 40), st.integers(2, 40))
def test_endpoints_exact(lon, lat, w, h, n_lon, n_lat):
    b = box(lon, lat, lon + w, lat + h)
    g = make_anchor_grid(b, n_lon, n_lat)
    assert (g.lons[0], g.lons[-1], g.lats[0], g.lats[-1]) == (b.lon_min, b.lon_max, b.lat_min, b.lat_max)
    assert np.all(np.diff(g.lons) > 0) and np.all(np.diff(g.lats) > 0)


# --- geo <-> pixel ----------------------------------------------------------

@pytest.mark.parametrize("pt,expected", [((0, 1), (0, 0)), ((0.5, 0.5), (0.5, 0.5)),
                                         ((1, 0), (1, 1)), ((0, 0), (0, 1))])
def test_unit_box_pixels(pt, expected):
    assert geo_to_pixel(box(0, 0, 1, 1), *pt) == expected


def test_hand_interpolation():
    # (101.5 - 100) / 2 = 0.75 ; (31 - 30.25) / 1 = 0.75
    px, py = geo_to_pixel(box(100, 30, 102, 31), 101.5, 30.25)
    assert px == pytest.approx(0.75, abs=1e-15) and py == pytest.approx(0.75, abs=1e-15)


def test_out_of_box():
    with pytest.raises(OutOfBox):
        geo_to_pixel(box(0, 0, 1, 1), 1.5, 0.5)


@settings(max_examples=200, deadline=None)
@given(st.floats(-179, 178), st.floats(-89, 88), st.floats(1e-3, 1), st.floats(1e-3, 1),
       st.floats(0, 1), st.floats(0, 1))
def test_round_trip(lon0, lat0, w, h, u, v):
    b = box(lon0, lat0, lon0 + w, lat0 + h)
    lon = min(b.lon_min + u * (b.lon_max - b.lon_min), b.lon_max)
    lat = min(b.lat_min + v * (b.lat_max - b.lat_min), b.lat_max)
    back = pixel_to_geo(b, *geo_to_pixel(b, lon, lat))
    scale_lon = max(abs(b.lon_min), abs(b.lon_max))
    scale_lat = max(abs(b.lat_min), abs(b.lat_max), 1.0)
    assert abs(back[0] - lon) <= 1e-12 * max(scale_lon, 1.0)
    assert abs(back[1] - lat) <= 1e-12 * scale_lat


# --- store ------------------------------------------------------------------

def test_query_at_cell_centers_bit_identical():
    rng = np.random.default_rng(3)
    data = rng.normal(size=(3, 4, 64)).astype(np.float32)
    r = YearRaster(box(10, 20, 14, 23), data)
    store = EmbeddingFieldStore([r])
    for row in range(3):
        for col in range(4):
            lon, lat = r.cell_center(row, col)
            got = query_embedding(store, lon, lat, 2024)
            assert got.tobytes() == data[row, col].astype(np.float64).tobytes()


def test_quadrants_of_two_by_two_store():
    store = distinct_store()
    eps = 1e-9
    # north row first: NW=1, NE=2, SW=3, SE=4
    corners = {(eps, 1 - eps): 1, (1 - eps, 1 - eps): 2, (eps, eps): 3, (1 - eps, eps): 4,
               (0.5 - eps, 0.5 + eps): 1, (0.5 + eps, 0.5 + eps): 2,
               (0.5 - eps, 0.5 - eps): 3, (0.5 + eps, 0.5 - eps): 4}
    for (lon, lat), want in corners.items():
        assert np.all(store.query(lon, lat, 2024) == want), (lon, lat)


def test_store_boundaries_are_inclusive():
    store = distinct_store()
    assert store.query(1.0, 0.0, 2024)[0] == 4
    assert store.query(0.0, 1.0, 2024)[0] == 1


def test_store_errors():
    store = distinct_store()
    with pytest.raises(YearUnavailable):
        store.query(0.5, 0.5, 2023)
    with pytest.raises(OutOfBounds):
        store.query(1.5, 0.5, 2024)


def test_aefs_layout(tmp_path):
    store = distinct_store(cells_x=3, cells_y=2, b=(100, 30, 103, 32))
    r = store.raster(2024)
    blob = encode_aefs(r)
    assert blob[:5] == b"AEFS\x01"
    assert len(blob) == 5 + 4 + 32 + 12 + 2 * 3 * 64 * 4
    first = np.frombuffer(blob[-2 * 3 * 64 * 4:][:4], "<f4")[0]
    assert first == 1.0  # north-west cell comes first
    write_aefs(tmp_path / "a.aefs", r)
    back = read_aefs(tmp_path / "a.aefs")
    assert encode_aefs(back) == blob
    assert back.resolution == pytest.approx((1.0, 1.0))


@pytest.mark.parametrize("mutate", [lambda b: b"XXXX" + b[4:], lambda b: b[:-4],
                                    lambda b: b[:4] + b"\x02" + b[5:], lambda b: b[:20]])
def test_aefs_malformed(mutate):
    blob = encode_aefs(distinct_store().raster(2024))
    with pytest.raises(FormatError):
        decode_aefs(mutate(blob))


def test_aefs_rejects_wrong_dims():
    blob = bytearray(encode_aefs(distinct_store().raster(2024)))
    blob[49:53] = (32).to_bytes(4, "little")
    with pytest.raises(FormatError):
        decode_aefs(bytes(blob))


def test_store_load_dir(tmp_path):
    for year in (2020, 2021):
        write_aefs(tmp_path / f"aef_{year}.aefs", distinct_store(year=year).raster(year))
    store = EmbeddingFieldStore.load_dir(tmp_path)
    assert store.years == [2020, 2021]


# --- feature sets -----------------------------------------------------------

def test_two_by_two_feature_set_composes_oracles():
    store = distinct_store(cells_x=4, cells_y=4)
    b = box(0.125, 0.125, 0.875, 0.875)  # nodes at cell centers of the corner cells
    fs = build_feature_set(b, 2, 2, store)
    assert len(fs) == 4
    expected = []
    for lon, lat in [(0.125, 0.125), (0.875, 0.125), (0.125, 0.875), (0.875, 0.875)]:
        row = int((1 - lat) * 4)
        col = int(lon * 4)
        expected.append(row * 4 + col + 1)
    assert [v[0] for v in fs.embeddings] == expected
    assert fs.px.tolist() == [0, 1, 0, 1] and fs.py.tolist() == [1, 1, 0, 0]


def test_three_by_two_pixels():
    fs = build_feature_set(box(0.1, 0.1, 0.9, 0.9), 3, 2, distinct_store())
    assert len(fs) == 6
    assert set(fs.px.tolist()) == {0, 0.5, 1} and set(fs.py.tolist()) == {0, 1}
    assert fs.positions.shape == (6, 2)


def test_box_outside_store():
    with pytest.raises(OutOfBounds):
        build_feature_set(box(0.5, 0.5, 1.5, 0.9), 2, 2, distinct_store())


def test_feature_set_is_deterministic_and_order_free():
    rng = np.random.default_rng(0)
    store = EmbeddingFieldStore([YearRaster(box(0, 0, 1, 1), rng.normal(size=(7, 9, 64)))])
    b = box(0.1, 0.2, 0.8, 0.9)
    a1 = build_feature_set(b, 5, 4, store).to_array()
    a2 = build_feature_set(b, 5, 4, store).to_array()
    assert a1.tobytes() == a2.tobytes()
    # query the same nodes in a shuffled order and reassemble
    nodes = make_anchor_grid(b, 5, 4).nodes
    order = rng.permutation(len(nodes))
    emb = np.empty((len(nodes), 64))
    for k in order:
        emb[k] = store.query(*nodes[k], 2024)
    assert emb.tobytes() == a1[:, 4:].tobytes()
