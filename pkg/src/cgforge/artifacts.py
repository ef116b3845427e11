"""
Versioned model containers.

A container is a zip archive holding `meta.json` plus one `.npy` member per
tensor. Member timestamps are pinned and the JSON is written with sorted
keys, so saving the same model twice produces byte-identical files.
"""

import io
import json
import zipfile
from pathlib import Path

import numpy as np
from numpy.lib import format as npy_format

from .errors import DataError

_FIXED_DATE = (1980, 1, 1, 0, 0, 0)
META_MEMBER = "meta.json"


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    return info


def _encode_array(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    npy_format.write_array(buf, np.ascontiguousarray(array), version=(1, 0), allow_pickle=False)
    return buf.getvalue()


def write_container(
    path: Path,
    format_name: str,
    version: int,
    meta: dict,
    tensors: dict[str, np.ndarray],
):
    """Write `meta` and `tensors` to `path`, tensors in sorted name order."""
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": format_name, "version": version, **meta, "tensors": sorted(tensors)}
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr(_member(META_MEMBER), json.dumps(header, sort_keys=True, indent=1))
        for name in sorted(tensors):
            zf.writestr(_member(f"{name}.npy"), _encode_array(tensors[name]))


def read_container(path: Path, format_name: str, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    """
    Read a container written by `write_container`.

    Raises:
        DataError: if the file is missing, is not a container, or carries a
            different format name or version
    """
    if not path.exists():
        raise DataError(f"model file not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read(META_MEMBER))
            if meta.get("format") != format_name:
                raise DataError(f"{path}: expected a {format_name} container, found {meta.get('format')!r}")
            if meta.get("version") != version:
                raise DataError(f"{path}: unsupported {format_name} version {meta.get('version')!r}")
            tensors = {}
            for name in meta.get("tensors", []):
                with zf.open(f"{name}.npy") as f:
                    tensors[name] = npy_format.read_array(io.BytesIO(f.read()), allow_pickle=False)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: not a readable model container ({e})") from e
    return meta, tensors
