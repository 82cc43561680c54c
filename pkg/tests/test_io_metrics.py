import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twophoton import Disk, Grid, LineSet, ScalarField, Sinogram, ValidationError, rel_l2
from twophoton import io as tio
from twophoton.metrics import interior_mask, rel_linf

finite = st.floats(-1e300, 1e300, allow_nan=False, allow_infinity=False)


@settings(max_examples=25)
@given(vals=st.lists(finite, min_size=1, max_size=20))
def test_csv_round_trip_is_bit_exact(tmp_path_factory, vals):
    path = tmp_path_factory.mktemp("csv") / "t.csv"
    rows = np.column_stack([np.arange(len(vals)), vals])
    tio.write_csv(path, ["i", "v"], rows, int_columns=("i",))
    header, data = tio.read_csv(path)
    assert header == ["i", "v"]
    np.testing.assert_array_equal(data[:, 1], np.asarray(vals))
    assert path.read_text().splitlines()[1].split(",")[0] == "0"


def test_field_round_trip(tmp_path):
    g = Grid.over(Disk(), 7)
    f = ScalarField(g, np.random.default_rng(1).uniform(0, 1, g.shape) / 3.0)
    tio.write_field(tmp_path / "f.csv", f)
    back = tio.read_field(tmp_path / "f.csv", g)
    np.testing.assert_array_equal(back.values, f.values)
    with pytest.raises(ValueError):
        tio.read_field(tmp_path / "f.csv", Grid.over(Disk(), 8))


def test_sinogram_export(tmp_path):
    L = LineSet.parallel_beam(Disk(), 3, 4)
    tio.write_sinogram(tmp_path / "s.csv", Sinogram(L, L.lengths))
    header, data = tio.read_csv(tmp_path / "s.csv")
    assert header == ["angle_index", "offset_index", "entry_x", "entry_y", "dir_x", "dir_y", "value"]
    np.testing.assert_array_equal(data[:, -1], L.lengths)


def test_json_is_sorted_and_numpy_safe(tmp_path):
    tio.write_json(tmp_path / "r.json", {"b": np.float64(1.5), "a": np.arange(3), "c": np.bool_(True),
                                         "d": float("nan")})
    text = (tmp_path / "r.json").read_text()
    assert text.index('"a"') < text.index('"b"')
    assert json.loads(text) == {"a": [0, 1, 2], "b": 1.5, "c": True, "d": "nan"}


@pytest.fixture
def grid():
    return Grid.over(Disk(), 21)


def test_rel_l2_reference_cases(grid):
    t = ScalarField(grid, np.linspace(0.1, 1.0, grid.size).reshape(grid.shape))
    assert rel_l2(t, t).value == 0.0
    assert rel_l2(t.scaled(1.1), t).value == pytest.approx(0.1, rel=1e-12)
    assert rel_l2(t.scaled(1.1), t, Disk()).value == pytest.approx(0.1, rel=1e-12)
    z = rel_l2(t, ScalarField.zeros(grid))
    assert z.absolute and z.value == pytest.approx(np.linalg.norm(t.values))
    with pytest.raises(ValidationError):
        rel_l2(t, ScalarField.zeros(Grid.over(Disk(), 9)))
    assert rel_linf(t.scaled(1.1), t) == pytest.approx(0.1, rel=1e-12)


def test_interior_mask_fraction(grid):
    d = Disk()
    full = interior_mask(grid, d, 1.0)
    shrunk = interior_mask(grid, d, 0.9)
    r = np.linalg.norm(grid.points(), axis=1).reshape(grid.shape)
    assert np.array_equal(shrunk, r <= 0.9)
    assert shrunk.sum() < full.sum()
    with pytest.raises(ValidationError):
        interior_mask(grid, d, 0.0)
