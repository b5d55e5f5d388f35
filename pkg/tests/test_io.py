import json
import time

import numpy as np
import pytest

from hcs import HcsError
from hcs.io import (
    RunManifest,
    as_matrix,
    dumps,
    load_npz,
    read_json,
    read_timeseries_csv,
    save_npz,
    sha256_file,
    to_jsonable,
    write_event_csv,
    write_timeseries_csv,
)


def test_jsonable_handles_numpy_and_non_finite_values():
    payload = {"a": np.arange(3), "b": np.float64(np.nan), 3: [np.inf, -np.inf], "s": {2, 1}, "ok": np.bool_(True)}
    out = to_jsonable(payload)
    assert out == {"a": [0, 1, 2], "b": "NaN", "3": ["Infinity", "-Infinity"], "s": [1, 2], "ok": True}
    json.loads(dumps(payload))  # strict JSON, no bare NaN tokens


def test_read_json_errors(tmp_path):
    with pytest.raises(HcsError) as err:
        read_json(tmp_path / "missing.json")
    assert err.value.kind == "config-error"
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(HcsError) as err:
        read_json(bad)
    assert err.value.kind == "config-error"


def test_as_matrix_forms():
    np.testing.assert_array_equal(as_matrix({"scale": 0.5, "dim": 3}), 0.5 * np.eye(3))
    np.testing.assert_array_equal(as_matrix(2.0), [[2.0]])
    with pytest.raises(HcsError):
        as_matrix([["a", "b"]])
    with pytest.raises(HcsError):
        as_matrix(np.zeros((2, 2, 2)).tolist())


def test_npz_is_byte_for_byte_deterministic(tmp_path):
    arrays = {"b": np.arange(6.0).reshape(2, 3), "a": np.array([1, 2, 3])}
    first = save_npz(tmp_path / "one.npz", arrays)
    time.sleep(1.1)  # a new wall-clock second must not change the bytes
    second = save_npz(tmp_path / "two.npz", dict(reversed(list(arrays.items()))))
    assert first.read_bytes() == second.read_bytes()
    assert sha256_file(first) == sha256_file(second)
    loaded = load_npz(first)
    assert sorted(loaded) == ["a", "b"]
    np.testing.assert_array_equal(loaded["b"], arrays["b"])


def test_load_npz_errors(tmp_path):
    with pytest.raises(HcsError):
        load_npz(tmp_path / "nope.npz")
    junk = tmp_path / "junk.npz"
    junk.write_bytes(b"not a zip")
    with pytest.raises(HcsError):
        load_npz(junk)


def test_timeseries_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    t = np.linspace(0, 1, 5)
    mean = rng.normal(size=(5, 3))
    cov = rng.normal(size=(5, 3, 3))
    path = write_timeseries_csv(tmp_path / "ts.csv", t, mean, cov)
    t2, m2, c2 = read_timeseries_csv(path)
    np.testing.assert_array_equal(t2, t)
    np.testing.assert_array_equal(m2, mean)
    np.testing.assert_array_equal(c2, cov)


def test_event_csv_leaves_missing_events_empty(tmp_path):
    path = write_event_csv(tmp_path / "ev.csv", np.array([[0.5, np.nan], [0.25, 0.75]]))
    lines = path.read_text().splitlines()
    assert lines[0] == "sample,event_0,event_1"
    assert lines[1] == "0,0.5,"
    assert lines[2] == "1,0.25,0.75"


def test_manifest_round_trip_and_fingerprint(tmp_path):
    artifact = tmp_path / "x.txt"
    artifact.write_text("hello")
    man = RunManifest("steer", "demo", {"epsilon": 0.5}, "0.1.0", timings={"total": 1.0})
    man.add_artifact(tmp_path, artifact)
    path = man.write(tmp_path)
    data = json.loads(path.read_text())
    assert data["fingerprint"] == man.fingerprint()
    again = RunManifest.read(path)
    assert again == man
    # Timings are not part of the fingerprint; artifacts are.
    again.timings["total"] = 99.0
    assert again.fingerprint() == man.fingerprint()
    artifact.write_text("changed")
    again.add_artifact(tmp_path, artifact)
    assert again.fingerprint() != man.fingerprint()
