"""On-disk field format: a JSON manifest plus one plain-text matrix per channel.

The manifest ``<stem>.json`` carries ``{nx, ny, channels, channel_names,
domain}`` with ``domain`` fixed to ``"unit_square"``. Each channel lives in
``<stem>.<channel>.txt`` next to the manifest: newline-delimited rows,
comma-delimited columns, row-major over the (s1, s2) grid axes (row index i
runs along s1). Values are 64-bit decimal floats; round-trips are exact to
1e-15 relative.
"""

import json
from pathlib import Path

import numpy as np

from .grid import GridImage

DOMAIN = "unit_square"
_FLOAT_FMT = "%.17g"


def _channel_path(manifest_path: Path, name: str) -> Path:
    stem = manifest_path.name[: -len(".json")] if manifest_path.name.endswith(".json") else manifest_path.name
    return manifest_path.with_name(f"{stem}.{name}.txt")


def write_channels(path, channels: dict[str, np.ndarray]) -> Path:
    """Write named (nx, ny) arrays in the field format; returns the manifest path.

    Low-level writer: values are stored verbatim (non-finite entries allowed,
    e.g. for masked cells of a jump field).
    """
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    names = list(channels)
    if not names:
        raise ValueError("at least one channel is required")
    arrays = {name: np.asarray(arr, dtype=float) for name, arr in channels.items()}
    shapes = {arr.shape for arr in arrays.values()}
    if len(shapes) != 1 or any(len(s) != 2 for s in shapes):
        raise ValueError(f"all channels must share one 2-D shape, got {sorted(shapes)}")
    nx, ny = next(iter(shapes))
    manifest = {
        "nx": int(nx),
        "ny": int(ny),
        "channels": len(names),
        "channel_names": names,
        "domain": DOMAIN,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    for name in names:
        np.savetxt(_channel_path(path, name), arrays[name], fmt=_FLOAT_FMT, delimiter=",")
    return path


def read_channels(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a field file into named (nx, ny) arrays plus its manifest."""
    path = Path(path)
    if not path.exists():
        raise ValueError(f"field manifest not found: {path}")
    with open(path) as f:
        manifest = json.load(f)
    missing = {"nx", "ny", "channels", "channel_names", "domain"}.difference(manifest)
    if missing:
        raise ValueError(f"field manifest {path} missing keys: {sorted(missing)}")
    if manifest["domain"] != DOMAIN:
        raise ValueError(f"unsupported field domain {manifest['domain']!r} in {path}")
    names = list(manifest["channel_names"])
    if len(names) != int(manifest["channels"]):
        raise ValueError(f"manifest {path} declares {manifest['channels']} channels but names {len(names)}")
    nx, ny = int(manifest["nx"]), int(manifest["ny"])
    channels = {}
    for name in names:
        cpath = _channel_path(path, name)
        if not cpath.exists():
            raise ValueError(f"missing channel file for {name!r}: {cpath}")
        arr = np.loadtxt(cpath, delimiter=",", ndmin=2)
        if arr.shape != (nx, ny):
            raise ValueError(f"channel {name!r} in {cpath} has shape {arr.shape}, expected ({nx}, {ny})")
        channels[name] = arr
    return channels, manifest


def write_field(path, image: GridImage, channel_names: list[str] | None = None) -> Path:
    """Write a GridImage; channel names default to channel_0, channel_1, ..."""
    if channel_names is None:
        channel_names = [f"channel_{c}" for c in range(image.channels)]
    if len(channel_names) != image.channels:
        raise ValueError(f"{len(channel_names)} names given for {image.channels} channels")
    return write_channels(path, {name: image.values[:, :, c] for c, name in enumerate(channel_names)})


def read_field(path) -> tuple[GridImage, list[str]]:
    """Read a field file as a GridImage; rejects non-finite values with their location."""
    channels, manifest = read_channels(path)
    for name, arr in channels.items():
        if not np.all(np.isfinite(arr)):
            i, j = np.argwhere(~np.isfinite(arr))[0]
            raise ValueError(f"non-finite value in channel {name!r} of {path} at node (i={i}, j={j})")
    values = np.stack(list(channels.values()), axis=-1)
    return GridImage(values), list(manifest["channel_names"])
