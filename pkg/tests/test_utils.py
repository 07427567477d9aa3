import logging

import numpy as np
import pytest

from loadcouple.exceptions import ScenarioFormatError
from loadcouple.log_config import CustomFormatter
from loadcouple.serialization import deserialize, format_value, serialize
from loadcouple.utils import format_seconds, parse_rho_grid, rho_grid


def test_rho_grid():
    grid = rho_grid(0.005)
    assert len(grid) == 199
    assert grid[0] == 0.005
    assert grid[-1] == 0.995
    assert rho_grid(0.1) == [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]


@pytest.mark.parametrize("step", [0.0, -0.1, 0.2])
def test_rho_grid_rejects_bad_steps(step):
    with pytest.raises(ValueError):
        rho_grid(step)


@pytest.mark.parametrize(
    "text, expected",
    [
        ("0.25:0.25:0.75", [0.25, 0.5, 0.75]),
        ("0.5, 1", [0.5, 1.0]),
        ("0.1:0.1:0.3,0.2,1", [0.1, 0.2, 0.3, 1.0]),
    ],
)
def test_parse_rho_grid(text, expected):
    assert parse_rho_grid(text) == expected


def test_default_sweep_grid_matches_search_grid():
    assert parse_rho_grid("0.005:0.005:0.995") == rho_grid(0.005)


@pytest.mark.parametrize("text", ["", "abc", "0.1:0:0.5", "0.5,1.5", "0:0.5:1"])
def test_parse_rho_grid_errors(text):
    with pytest.raises(ValueError):
        parse_rho_grid(text)


def test_format_seconds():
    assert format_seconds(0.25) == "250 ms"
    assert format_seconds(12.34) == "12.3 s"
    assert format_seconds(125) == "2 min 5 s"


def test_format_value():
    assert format_value(None) == ""
    assert format_value(True) == "true"
    assert format_value(np.bool_(False)) == "false"
    assert format_value(float("nan")) == "nan"
    assert format_value(0.1 + 0.2) == "0.30000000000000004"
    assert format_value(np.float64(1e-300)) == "1e-300"
    assert format_value(7) == "7"


def test_serialize_numpy_values():
    text = serialize({"radius": np.float64(0.5), "cells": np.arange(2), "tags": {"b", "a"}})
    assert deserialize(text) == {"radius": 0.5, "cells": [0, 1], "tags": ["a", "b"]}


def test_deserialize_reports_position():
    with pytest.raises(ScenarioFormatError) as exc:
        deserialize('{\n  "noise": }')
    assert exc.value.line == 2


def test_formatter_without_colors():
    formatter = CustomFormatter(fmt="%(levelname)s|%(message)s", use_colors=False)
    record = logging.LogRecord("loadcouple", logging.WARNING, __file__, 1, "radius %.1f", (0.5,), None)
    assert formatter.format(record) == "WARNING |radius 0.5"
    assert record.levelname == "WARNING"
