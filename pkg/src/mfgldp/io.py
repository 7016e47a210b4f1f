"""Result serialization: JSON with ``"inf"`` strings, CSV tables, run manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import __version__
from .model import ModelSpec, model_to_dict


def to_jsonable(obj: Any) -> Any:
    """Recursively convert numpy values; non-finite floats become ``"inf"``, ``"-inf"``, ``"nan"``."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def dump_json(obj: Any, path) -> None:
    text = json.dumps(to_jsonable(obj), indent=2, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def config_hash(model: ModelSpec) -> str:
    """SHA-256 of the canonical (sorted-key, compact) JSON form of the model."""
    canon = json.dumps(model_to_dict(model), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        x = float(v)
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return repr(x)
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if v is None:
        return ""
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence[Any]], config_digest: str | None = None) -> None:
    """Write a table; floats use ``repr`` so output is exact and stable.

    When ``config_digest`` is given a leading ``# config_sha256=...`` line is written.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if config_digest is not None:
            fh.write(f"# config_sha256={config_digest}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


def write_manifest(
    path,
    model: ModelSpec | None,
    argv: Sequence[str],
    seed: int | None,
    wall_time: float,
    outputs: Sequence[str],
    extra: dict | None = None,
) -> dict:
    manifest = {
        "config_sha256": None if model is None else config_hash(model),
        "command_line": list(argv),
        "master_seed": seed,
        "tool_version": __version__,
        "wall_time_s": wall_time,
        "outputs": [os.path.basename(o) for o in outputs],
    }
    if extra:
        manifest.update(extra)
    dump_json(manifest, path)
    return manifest


def sidecar_path(out_path) -> str:
    return str(out_path) + ".manifest.json"
