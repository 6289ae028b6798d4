"""Utilities for writing JSON manifests and CSV artifacts."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, is_dataclass
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Sequence

import numpy as np
import pandas as pd


def _serialize_for_json(obj: Any) -> Any:
    """Convert non-JSON-serializable objects to JSON-compatible types."""
    if isinstance(obj, (date, datetime)):
        return obj.isoformat()
    if is_dataclass(obj) and not isinstance(obj, type):
        return _serialize_for_json(asdict(obj))
    if isinstance(obj, np.ndarray):
        return _serialize_for_json(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): _serialize_for_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_serialize_for_json(item) for item in obj]
    return obj


def canonical_json(payload: Any) -> str:
    return json.dumps(_serialize_for_json(payload), sort_keys=True, separators=(",", ":"))


def manifest_hash(payload: Any) -> str:
    """Short SHA-256 of the canonical JSON form; stable across runs."""
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()[:16]


def save_json_report(data: Dict[str, Any], output_file: Path) -> None:
    """Save a report to a JSON file."""
    try:
        serializable_data = _serialize_for_json(data)
        output_file = Path(output_file)
        output_file.parent.mkdir(parents=True, exist_ok=True)
        with output_file.open("w", encoding="utf-8") as f:
            json.dump(serializable_data, f, indent=2, sort_keys=True)
    except (OSError, TypeError, ValueError) as e:
        raise RuntimeError(f"Failed to save JSON report to {output_file}: {e}") from e


def write_csv(
    rows: Iterable[Mapping[str, Any]],
    columns: Sequence[str],
    output_path: Path,
    manifest: str | None = None,
) -> Path:
    """Write rows with a fixed column order; an empty row list yields the header only.

    When ``manifest`` is given every row carries it in a trailing
    ``manifest_hash`` column.
    """
    cols: List[str] = list(columns)
    records = [{col: row.get(col) for col in cols} for row in rows]
    if manifest is not None:
        cols.append("manifest_hash")
        for record in records:
            record["manifest_hash"] = manifest
    frame = pd.DataFrame.from_records(records, columns=cols)
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(output_path, index=False, lineterminator="\n")
    return output_path


def iso_timestamp() -> str:
    """Return a UTC timestamp suitable for JSON serialisation."""

    return datetime.now(timezone.utc).isoformat()


__all__ = [
    "canonical_json",
    "manifest_hash",
    "save_json_report",
    "write_csv",
    "iso_timestamp",
]
