"""Array-bundle persistence: raw little-endian float32 payload plus a JSON
sidecar manifest carrying shape, dimension names, grid metadata, provenance
(config hash, seed), and a payload checksum.

A bundle named ``x.f32`` has its manifest at ``x.json``.  Reads verify the
payload length and checksum and name the offending file and invariant on
failure; round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .grid import Grid
from .synthdata import FieldSet

BUNDLE_SCHEMA = "diffsr-bundle-1"


class BundleError(RuntimeError):
    pass


def _grid_to_manifest(grid: Grid) -> dict:
    return {
        "n_lat": grid.n_lat,
        "n_lon": grid.n_lon,
        "lat_centers": [float(v) for v in grid.lat_centers],
        "lon_centers": [float(v) for v in grid.lon_centers],
        "row_weights": [float(v) for v in grid.row_weights],
    }


def _grid_from_manifest(g: dict) -> Grid:
    return Grid(
        n_lat=int(g["n_lat"]),
        n_lon=int(g["n_lon"]),
        lat_centers=np.asarray(g["lat_centers"], dtype=float),
        lon_centers=np.asarray(g["lon_centers"], dtype=float),
        row_weights=np.asarray(g["row_weights"], dtype=float),
    )


def write_bundle(
    path: str | Path,
    data: np.ndarray,
    dim_names: list[str],
    channel_names: list[str] | None = None,
    grid: Grid | None = None,
    units: list[str] | None = None,
    config_hash: str = "",
    seed: int = 0,
    extra: dict | None = None,
) -> Path:
    """Write payload + manifest; returns the payload path."""
    path = Path(path)
    if path.suffix != ".f32":
        path = path.with_suffix(".f32")
    if len(dim_names) != data.ndim:
        raise ValueError(f"{len(dim_names)} dim names for {data.ndim}-D data")
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    manifest = {
        "schema": BUNDLE_SCHEMA,
        "shape": list(data.shape),
        "dim_names": dim_names,
        "channel_names": channel_names,
        "units": units,
        "grid": _grid_to_manifest(grid) if grid is not None else None,
        "config_hash": config_hash,
        "seed": int(seed),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)
    path.with_suffix(".json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True) + "\n"
    )
    return path


def read_bundle(path: str | Path) -> tuple[np.ndarray, dict]:
    """Read and verify a bundle; returns (float32 array, manifest)."""
    path = Path(path)
    if path.suffix != ".f32":
        path = path.with_suffix(".f32")
    man_path = path.with_suffix(".json")
    if not path.exists():
        raise BundleError(f"{path}: payload file missing")
    if not man_path.exists():
        raise BundleError(f"{man_path}: manifest file missing")
    try:
        manifest = json.loads(man_path.read_text())
    except json.JSONDecodeError as e:
        raise BundleError(f"{man_path}: manifest is not valid JSON ({e})")
    payload = path.read_bytes()
    shape = tuple(int(s) for s in manifest.get("shape", []))
    expected = 4 * int(np.prod(shape)) if shape else 0
    if len(payload) != expected:
        raise BundleError(
            f"{path}: payload length {len(payload)} != 4 * prod(shape) = {expected}"
        )
    digest = hashlib.sha256(payload).hexdigest()
    if digest != manifest.get("payload_sha256"):
        raise BundleError(f"{path}: payload sha256 mismatch (file corrupt?)")
    data = np.frombuffer(payload, dtype="<f4").reshape(shape)
    return data, manifest


def write_fieldset(path: str | Path, fields: FieldSet, config_hash: str = "",
                   seed: int = 0, units: list[str] | None = None) -> Path:
    return write_bundle(
        path,
        fields.data,
        dim_names=["time", "channel", "lat", "lon"],
        channel_names=list(fields.channel_names),
        grid=fields.grid,
        units=units,
        config_hash=config_hash,
        seed=seed,
        extra={
            "precip_channels": list(fields.precip_channels),
            "time_step_hours": fields.time_step_hours,
        },
    )


def read_fieldset(path: str | Path) -> FieldSet:
    data, manifest = read_bundle(path)
    if manifest.get("grid") is None:
        raise BundleError(f"{path}: bundle has no grid metadata; not a FieldSet")
    return FieldSet(
        data=np.asarray(data, dtype=float),
        channel_names=list(manifest["channel_names"]),
        grid=_grid_from_manifest(manifest["grid"]),
        time_step_hours=float(manifest["extra"].get("time_step_hours", 6.0)),
        precip_channels=tuple(manifest["extra"].get("precip_channels", ())),
    )


def save_params(path: str | Path, params: dict, config_hash: str = "",
                seed: int = 0, extra: dict | None = None) -> Path:
    """Checkpoint: flatten named parameters into one payload + layer table."""
    keys = sorted(params.keys())
    layers = [{"name": k, "shape": list(params[k].value.shape)} for k in keys]
    flat = np.concatenate([params[k].value.reshape(-1) for k in keys])
    info = {"layers": layers}
    info.update(extra or {})
    return write_bundle(
        path,
        flat,
        dim_names=["param"],
        config_hash=config_hash,
        seed=seed,
        extra=info,
    )


def load_params(path: str | Path, params: dict) -> None:
    """Load a checkpoint into an existing module's named parameters."""
    data, manifest = read_bundle(path)
    layers = manifest["extra"]["layers"]
    names = {entry["name"] for entry in layers}
    if names != set(params.keys()):
        missing = sorted(set(params.keys()) - names)[:3]
        surplus = sorted(names - set(params.keys()))[:3]
        raise BundleError(
            f"{path}: checkpoint layers do not match model "
            f"(missing {missing}, surplus {surplus})"
        )
    pos = 0
    flat = np.asarray(data, dtype=float)
    for entry in layers:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        params[entry["name"]].value[...] = flat[pos : pos + size].reshape(shape)
        pos += size
    if pos != flat.size:
        raise BundleError(f"{path}: checkpoint payload has {flat.size - pos} stray values")
