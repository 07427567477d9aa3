"""
JSON and CSV serialization utilities for loadcouple.

Floats are written with Python's shortest round-trip representation, so every
value read back is bit-identical to the value written.
"""

import csv
import json
import math
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Sequence, Union

import numpy as np
from pydantic import BaseModel

from .exceptions import ScenarioFormatError

PathLike = Union[str, Path]


class JSONEncoder(json.JSONEncoder):
    """Custom JSON encoder that handles numpy, enum and pydantic values."""

    def default(self, obj: Any) -> Any:
        # Handle numpy scalars and arrays
        if isinstance(obj, np.generic):
            return obj.item()
        if isinstance(obj, np.ndarray):
            return obj.tolist()

        # Handle pydantic models
        if isinstance(obj, BaseModel):
            return obj.model_dump(mode="json")

        # Handle Enums
        if isinstance(obj, Enum):
            return obj.value

        # Handle sets
        if isinstance(obj, (set, frozenset)):
            return sorted(obj)

        # Handle Path objects
        if isinstance(obj, Path):
            return str(obj)

        # Let the base class handle anything else
        return super().default(obj)


def serialize(obj: Any, indent: int = None) -> str:
    """
    Serialize any Python object to a JSON string.

    Args:
        obj: Any Python object to serialize
        indent: Optional indentation for human-readable output

    Returns:
        str: JSON-encoded string representation

    Example:
        >>> serialize({"radius": np.float64(0.5), "cells": np.arange(2)})
        '{"radius": 0.5, "cells": [0, 1]}'
    """
    return json.dumps(obj, cls=JSONEncoder, indent=indent)


def deserialize(json_str: str) -> Any:
    """
    Deserialize a JSON string back into Python objects.

    Args:
        json_str: JSON-encoded string

    Returns:
        Any: Decoded Python object

    Raises:
        ScenarioFormatError: If the string is not valid JSON, with its line and column
    """
    try:
        return json.loads(json_str)
    except json.JSONDecodeError as e:
        raise ScenarioFormatError(f"Malformed JSON: {e.msg}", line=e.lineno, column=e.colno)


def write_json(obj: Any, path: PathLike) -> None:
    Path(path).write_text(serialize(obj, indent=2) + "\n", encoding="utf-8")


def read_json(path: PathLike) -> Any:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ScenarioFormatError(f"Cannot read {path}: {e.strerror or e}")
    return deserialize(text)


def format_value(value: Any) -> str:
    """CSV cell text: shortest round-trip floats, lowercase booleans, empty for None."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        return repr(value)
    return str(value)


def write_csv(header: Sequence[str], rows: Iterable[Sequence[Any]], path: PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])


def pydantic_error_field(error: dict) -> str:
    """Dotted location of the first pydantic error, e.g. ``topology.users.3.regular_cell``."""
    return ".".join(str(part) for part in error.get("loc", ()))
