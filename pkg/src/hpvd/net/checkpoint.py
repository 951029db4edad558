"""Model checkpoints as ``.npz`` archives with a JSON metadata record."""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np

from ..errors import DataError, MissingFileError
from ..volume import PhaseStats

FORMAT_VERSION = 1


def _config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path: str | Path, params: dict, state: dict, stats: PhaseStats, config: dict) -> None:
    """Write params, batch-norm buffers, phase statistics and config.

    Entries are written in sorted order with a fixed timestamp so equal
    inputs give byte-identical files.
    """
    meta = {"format_version": FORMAT_VERSION, "phase_stats": stats.to_dict(),
            "config": config, "config_hash": _config_hash(config)}
    arrays = {f"param/{k}": v for k, v in params.items()}
    arrays.update({f"state/{k}": v for k, v in state.items()})
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("meta.json", date_time=(1980, 1, 1, 0, 0, 0)),
                    json.dumps(meta, sort_keys=True, indent=1))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.asarray(arrays[name], dtype=np.float64), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_checkpoint(path: str | Path) -> dict:
    """Returns ``{"params", "state", "stats", "config", "config_hash"}``."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"missing checkpoint: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            params, state = {}, {}
            for name in zf.namelist():
                if not name.endswith(".npy"):
                    continue
                arr = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
                group, key = name[:-4].split("/", 1)
                (params if group == "param" else state)[key] = arr
    except (zipfile.BadZipFile, KeyError, ValueError) as exc:
        raise DataError(f"{path}: unreadable checkpoint ({exc})") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
    if _config_hash(meta["config"]) != meta["config_hash"]:
        raise DataError(f"{path}: config hash mismatch")
    return {"params": params, "state": state, "stats": PhaseStats.from_dict(meta["phase_stats"]),
            "config": meta["config"], "config_hash": meta["config_hash"]}
