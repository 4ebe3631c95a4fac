import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcde import formats, polydens, simulate, spatial_gmm as sg
from pcde.data import Dataset
from pcde.geometry import PartitionTree, enumerate_partitions

unit = st.floats(0, 1, allow_nan=False, width=64)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 2), st.lists(st.lists(unit, min_size=5, max_size=5), min_size=1, max_size=20))
def test_dataset_csv_roundtrip(d_x, d_y, rows):
    A = np.array(rows)
    data = Dataset(A[:, :d_x], A[:, d_x:d_x + d_y])
    back = formats.dataset_from_csv(formats.dataset_to_csv(data))
    assert np.array_equal(back.X, data.X) and np.array_equal(back.Y, data.Y)


def test_dataset_csv_labels_and_header():
    data = Dataset(np.array([[0.1], [0.2]]), np.array([[-3.5e-7], [1e300]]), np.array([1, 2]))
    text = formats.dataset_to_csv(data)
    assert text.splitlines()[0] == "x1,y1,label"
    assert "e" in text and "," in text
    back = formats.dataset_from_csv(text)
    assert list(back.labels) == [1, 2] and back.Y[1, 0] == 1e300


def test_dataset_csv_errors():
    with pytest.raises(formats.FormatError):
        formats.dataset_from_csv("")
    with pytest.raises(formats.FormatError):
        formats.dataset_from_csv("x1,y1\n0.1,abc\n")
    with pytest.raises(formats.FormatError):
        formats.dataset_from_csv("a,b\n0.1,0.2\n")


def test_cube_roundtrip(tmp_path, rng):
    cube = rng.standard_normal((3, 4, 5))
    formats.write_cube(tmp_path / "c.cube", cube)
    raw = (tmp_path / "c.cube").read_bytes()
    assert raw.startswith(b"CUBE1 3 4 5\n") and len(raw) == 12 + 8 * 60
    data = formats.read_cube(tmp_path / "c.cube")
    assert data.grid_shape == (3, 4)
    assert np.array_equal(data.Y, cube.reshape(12, 5))
    assert np.allclose(data.X[5], [(1 + 0.5) / 3, (1 + 0.5) / 4])


def test_cube_errors(tmp_path):
    (tmp_path / "a.cube").write_bytes(b"CUBE2 1 1 1\n" + b"\0" * 8)
    (tmp_path / "b.cube").write_bytes(b"CUBE1 1 1 2\n" + b"\0" * 8)
    for name in ("a.cube", "b.cube"):
        with pytest.raises(formats.FormatError):
            formats.read_cube(tmp_path / name)


def test_label_maps():
    assert formats.labels_to_csv(np.array([2, 1])) == "label\n2\n1\n"
    assert formats.labels_to_csv(np.array([1, 2, 2, 1]), (2, 2)).splitlines() == [
        "row,col,label", "0,0,1", "0,1,2", "1,0,2", "1,1,1"]


def _poly_models(rng):
    data = Dataset(rng.random((60, 2)), rng.random((60, 1)))
    for kind in ("RDP", "RDSP", "RSP", "HRP", "UDP"):
        trees = list(enumerate_partitions(kind, 8, 2, max_leaves=4))
        xt = trees[-1]
        yt = list(enumerate_partitions("RDP", 60, 1, max_leaves=3))[-1]
        yield polydens.fit(data, xt, yt, (1,))


def _gmm_model(rng):
    data = Dataset(rng.random((200, 2)), rng.standard_normal((200, 3)) + np.repeat([[0, 0, 0], [4, 4, 0]], 100, axis=0))
    spec = sg.CovarianceSpec.parse("mu_K L D_0 A_K", a=50.0)
    opts = sg.EMOptions(E_indices=(0, 1))
    return sg.em_fit(data, PartitionTree.uniform(200, 2, 1), 2, spec, opts)


def test_poly_model_roundtrip(rng):
    Xq, Yq = rng.random((1000, 2)), rng.random((1000, 1))
    for model in _poly_models(rng):
        text = formats.dumps_model(model, {"n": 60, "seed": 1})
        back, meta = formats.loads_model(text)
        assert formats.dumps_model(back, meta) == text
        assert back.identifier == model.identifier
        assert np.array_equal(back.log_density_many(Xq, Yq), model.log_density_many(Xq, Yq))


def test_gmm_model_roundtrip(rng, tmp_path):
    model = _gmm_model(rng)
    formats.save_model(tmp_path / "m.json", model, {"n": 200})
    back, meta = formats.load_model(tmp_path / "m.json")
    formats.save_model(tmp_path / "m2.json", back, meta)
    assert (tmp_path / "m.json").read_bytes() == (tmp_path / "m2.json").read_bytes()
    assert back.spec == model.spec and back.E_indices == model.E_indices
    Xq, Yq = rng.random((1000, 2)), rng.standard_normal((1000, 3)) * 3
    assert np.array_equal(back.log_density_many(Xq, Yq), model.log_density_many(Xq, Yq))


def test_model_document_schema(rng):
    doc = json.loads(formats.dumps_model(_gmm_model(rng)))
    assert doc["schema_version"] == "1" and doc["kind"] == "spatial_gmm"
    doc["schema_version"] = "2"
    with pytest.raises(formats.FormatError):
        formats.model_from_dict(doc)
    with pytest.raises(formats.FormatError):
        formats.loads_model("{not json")


def test_truth_models_serialize():
    for name in ("histogram1d", "poly2d", "gmm2d"):
        model = simulate.load_scenario(name).truth.model
        text = formats.dumps_model(model)
        assert formats.dumps_model(formats.loads_model(text)[0]) == text
