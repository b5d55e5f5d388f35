"""Artifact persistence: JSON payloads, CSV time series, deterministic npz archives and run manifests."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import HcsError

_EPOCH = (1980, 1, 1, 0, 0, 0)


def to_jsonable(obj: Any) -> Any:
    """Recursively convert numpy containers and non-finite floats to plain JSON values.

    Non-finite floats become the strings ``"NaN"``, ``"Infinity"`` and ``"-Infinity"``.
    """
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, set)):
        items = sorted(obj) if isinstance(obj, set) else obj
        return [to_jsonable(v) for v in items]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if math.isnan(x):
            return "NaN"
        if math.isinf(x):
            return "Infinity" if x > 0 else "-Infinity"
        return x
    return obj


def dumps(obj: Any) -> str:
    return json.dumps(to_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path: Path | str, obj: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj))
    return path


def read_json(path: Path | str) -> Any:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise HcsError("config-error", f"file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise HcsError("config-error", f"{path}: invalid JSON ({exc})") from exc


def as_matrix(value: Any, name: str = "matrix") -> np.ndarray:
    """Row-major nested list (or scalar times identity given as ``{"scale": s, "dim": n}``) to an array."""
    if isinstance(value, dict) and "scale" in value:
        return float(value["scale"]) * np.eye(int(value["dim"]))
    try:
        arr = np.atleast_2d(np.asarray(value, dtype=float))
    except (TypeError, ValueError) as exc:
        raise HcsError("config-error", f"{name} is not a numeric matrix") from exc
    if arr.ndim != 2:
        raise HcsError("config-error", f"{name} must be two-dimensional")
    return arr


# ------------------------------------------------------------------ CSV


def write_timeseries_csv(path: Path | str, times: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> Path:
    """One row per time: ``t, mean_0..mean_{n-1}, cov_00, cov_01, ...`` (row-major covariance)."""
    path = Path(path)
    n = mean.shape[1]
    header = ["t"] + [f"mean_{i}" for i in range(n)] + [f"cov_{i}{j}" for i in range(n) for j in range(n)]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t, m, c in zip(times, mean, cov):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in m] + [repr(float(v)) for v in c.ravel()])
    return path


def write_event_csv(path: Path | str, event_times: np.ndarray) -> Path:
    """Per-sample event times, ``sample, event_0, event_1, ...``; missing events are empty cells."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample"] + [f"event_{i}" for i in range(event_times.shape[1])])
        for s, row in enumerate(event_times):
            w.writerow([s] + ["" if not np.isfinite(v) else repr(float(v)) for v in row])
    return path


def read_timeseries_csv(path: Path | str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n = int(round((-1 + math.sqrt(1 + 4 * (data.shape[1] - 1))) / 2))
    return data[:, 0], data[:, 1 : 1 + n], data[:, 1 + n :].reshape(-1, n, n)


# ------------------------------------------------------------------ npz


def save_npz(path: Path | str, arrays: dict[str, np.ndarray]) -> Path:
    """Like ``np.savez`` but with fixed zip timestamps and member order, so equal inputs give equal bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH), buf.getvalue())
    return path


def load_npz(path: Path | str) -> dict[str, np.ndarray]:
    try:
        with np.load(path, allow_pickle=False) as data:
            return {k: data[k] for k in data.files}
    except FileNotFoundError as exc:
        raise HcsError("config-error", f"file not found: {path}") from exc
    except (ValueError, zipfile.BadZipFile) as exc:
        raise HcsError("config-error", f"{path}: not a plan archive ({exc})") from exc


def sha256_file(path: Path | str) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# ------------------------------------------------------------------ manifest


@dataclass
class RunManifest:
    """Everything needed to rerun a command: the resolved config and the hashes of what it wrote.

    Timings are informational and excluded from :meth:`fingerprint`.
    """

    command: str
    experiment: str
    config: dict
    version: str
    artifacts: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    argv: list[str] = field(default_factory=list)

    def add_artifact(self, out_dir: Path, path: Path) -> None:
        self.artifacts[str(Path(path).relative_to(out_dir))] = sha256_file(path)

    def fingerprint(self) -> str:
        payload = dumps({"config": self.config, "artifacts": self.artifacts, "command": self.command})
        return hashlib.sha256(payload.encode()).hexdigest()

    def write(self, out_dir: Path | str) -> Path:
        data = asdict(self)
        data["fingerprint"] = self.fingerprint()
        return write_json(Path(out_dir) / "manifest.json", data)

    @classmethod
    def read(cls, path: Path | str) -> "RunManifest":
        data = read_json(path)
        data.pop("fingerprint", None)
        return cls(**data)
