import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tastr.core import (CameraTopology, Tracklet, TrackletDataset, load_dataset, load_topology, save_dataset,
                        save_topology, strip_labels)
from tastr.errors import DatasetParseError, DimensionError, IntegrityError, TopologyError

from conftest import make_tracklet


def _write(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))


def _record(tid, cam=0, times=(0.0, 1.0), d=4, ident=None):
    return {"tracklet_id": tid, "camera_id": cam, "identity": ident,
            "frames": [{"t": t, "f": [float(tid)] * d} for t in times]}


def test_tracklet_endpoints_and_readonly():
    t = make_tracklet(1, 0, 5.0, n=4)
    assert (t.start_time, t.end_time, t.num_frames, t.dim) == (5.0, 8.0, 4, 4)
    with pytest.raises(ValueError):
        t.features[0, 0] = 1.0


def test_tracklet_rejects_empty_and_unordered():
    with pytest.raises(IntegrityError):
        Tracklet(1, 0, np.array([]), np.zeros((0, 3)))
    with pytest.raises(IntegrityError):
        Tracklet(1, 0, np.array([2.0, 2.0]), np.zeros((2, 3)))


def test_dataset_rejects_duplicates_and_mixed_dims():
    with pytest.raises(IntegrityError):
        TrackletDataset((make_tracklet(1, 0, 0), make_tracklet(1, 1, 0)), d_raw=4)
    with pytest.raises(DimensionError):
        TrackletDataset((make_tracklet(1, 0, 0), make_tracklet(2, 0, 0, d=5)), d_raw=4)


def test_load_two_records(tmp_path):
    p = tmp_path / "t.jsonl"
    _write(p, [_record(1), _record(2, cam=1)])
    ds = load_dataset(p)
    assert len(ds) == 2 and ds.d_raw == 4 and ds.cameras == {0, 1}
    assert not ds.labeled


def test_load_empty_file_is_integrity_error(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text("")
    with pytest.raises(IntegrityError):
        load_dataset(p)


def test_load_decreasing_timestamps_names_line(tmp_path):
    p = tmp_path / "t.jsonl"
    _write(p, [_record(1), _record(2, times=(3.0, 2.0))])
    with pytest.raises(DatasetParseError, match="line 2") as exc:
        load_dataset(p)
    assert exc.value.line == 2


def test_load_malformed_json_and_missing_field(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text('{"tracklet_id": 1\n')
    with pytest.raises(DatasetParseError, match="line 1"):
        load_dataset(p)
    _write(p, [{"tracklet_id": 1, "frames": []}])
    with pytest.raises(DatasetParseError):
        load_dataset(p)


def test_load_dimension_and_duplicate_errors(tmp_path):
    p = tmp_path / "t.jsonl"
    _write(p, [_record(1), _record(2, d=3)])
    with pytest.raises(DimensionError):
        load_dataset(p)
    _write(p, [_record(1), _record(1, cam=1)])
    with pytest.raises(IntegrityError):
        load_dataset(p)


def test_strip_labels_examples(toy_dataset):
    s = strip_labels(toy_dataset)
    assert len(s) == len(toy_dataset) and not s.labeled
    assert all(t.true_identity is None for t in s)
    assert strip_labels(s).tracklets == s.tracklets
    partial = TrackletDataset(tuple(make_tracklet(i, 0, 10.0 * i, ident=i if i < 3 else None) for i in range(5)),
                              d_raw=4, labeled=True)
    assert all(t.true_identity is None for t in strip_labels(partial))
    assert len(strip_labels(partial)) == 5


def test_by_camera_and_identities(toy_dataset):
    groups = toy_dataset.by_camera()
    assert sorted(groups) == [0, 1]
    assert [t.tracklet_id for t in groups[0]] == [0, 2, 4]
    assert toy_dataset.identities() == {0: 0, 1: 0, 2: 1, 3: 1, 4: 2, 5: 2}


def test_topology_normalises_and_validates(tmp_path):
    topo = CameraTopology(1.4, {(1, 0): 140.0, (1, 2): 50.0})
    assert topo.path(0, 1) == topo.path(1, 0) == 140.0
    assert topo.cameras == [0, 1, 2]
    with pytest.raises(TopologyError):
        topo.path(0, 2)
    with pytest.raises(TopologyError):
        CameraTopology(1.0, {(0, 1): -5.0})
    with pytest.raises(TopologyError):
        CameraTopology(0.0, {(0, 1): 5.0})
    with pytest.raises(TopologyError):
        CameraTopology(1.0, {(0, 1): 5.0, (1, 0): 6.0})
    save_topology(topo, tmp_path / "topo.json")
    assert load_topology(tmp_path / "topo.json") == topo
    (tmp_path / "bad.json").write_text('{"paths": []}')
    with pytest.raises(TopologyError):
        load_topology(tmp_path / "bad.json")


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@st.composite
def datasets(draw):
    d = draw(st.integers(1, 4))
    n = draw(st.integers(1, 5))
    out = []
    for tid in range(n):
        k = draw(st.integers(1, 4))
        gaps = draw(st.lists(st.floats(1e-3, 100.0), min_size=k, max_size=k))
        times = np.cumsum(gaps)
        feats = np.array(draw(st.lists(st.lists(finite, min_size=d, max_size=d), min_size=k, max_size=k)))
        ident = draw(st.one_of(st.none(), st.integers(0, 3)))
        out.append(Tracklet(tid, draw(st.integers(0, 2)), times, feats, ident))
    return TrackletDataset(tuple(out), d_raw=d, labeled=any(t.true_identity is not None for t in out))


@settings(max_examples=40, deadline=None)
@given(datasets())
def test_save_load_round_trip_is_exact(tmp_path_factory, ds):
    p = tmp_path_factory.mktemp("rt") / "d.jsonl"
    save_dataset(ds, p)
    back = load_dataset(p)
    assert back.tracklets == ds.tracklets and back.d_raw == ds.d_raw


@settings(max_examples=40, deadline=None)
@given(datasets())
def test_strip_labels_idempotent_and_preserving(ds):
    once = strip_labels(ds)
    assert strip_labels(once).tracklets == once.tracklets
    for a, b in zip(ds.tracklets, once.tracklets):
        assert (a.tracklet_id, a.camera_id) == (b.tracklet_id, b.camera_id)
        assert np.array_equal(a.times, b.times) and np.array_equal(a.features, b.features)
